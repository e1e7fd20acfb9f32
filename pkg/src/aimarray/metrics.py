"""Sample counts, sidelobe statistics, SSIM and FOV cropping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geometry import ApertureFigures, SamplingFunction
from .imaging import ComplexImage, SceneImage

DB_FLOOR = -300.0


class MetricError(ValueError):
    pass


def count_unique(s: SamplingFunction) -> tuple[int, int]:
    """(distinct UV cells, total multiplicity minus distinct cells)."""
    unique = len(s.cells)
    return unique, s.total - unique


@dataclass(frozen=True)
class SllProfile:
    angles: np.ndarray  # degrees
    levels: np.ndarray  # dB re peak

    def to_csv(self) -> str:
        lines = ["angle_deg,level_db"]
        lines += [f"{a:g},{lv:.6f}" for a, lv in zip(self.angles, self.levels)]
        return "\n".join(lines) + "\n"


def to_db(mag: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(20.0 * np.log10(mag), DB_FLOOR)


def _ray_sidelobe(levels: np.ndarray) -> float:
    """Highest level beyond the main lobe along one ray (levels start at the peak)."""
    mid = levels[1:-1]
    is_min = (mid <= levels[:-2]) & (mid < levels[2:])
    if is_min.any():
        stop = int(np.argmax(is_min)) + 1
    else:
        below = np.nonzero(levels <= -3.0)[0]
        if below.size == 0:
            raise MetricError("main lobe fills raster")
        stop = int(below[0])
    return float(levels[stop:].max())


def sll_profile(
    psf_image: ComplexImage | np.ndarray,
    step_deg: float = 1.0,
    radial_step: float = 0.25,
) -> SllProfile:
    """Peak sidelobe along rays from the PSF peak, one value per angle.

    The main lobe on each ray ends at its first local minimum, or at the
    -3 dB point when the ray has no minimum before the raster edge.
    Samples are bilinear in |PSF|.
    """
    mag = np.abs(psf_image.pixels if isinstance(psf_image, ComplexImage) else np.asarray(psf_image))
    R0, R1 = mag.shape
    peak = mag.max()
    if peak <= 0:
        raise MetricError("PSF is identically zero")
    mag = mag / peak
    cy, cx = R0 // 2, R1 // 2
    if not np.isclose(mag[cy, cx], 1.0, rtol=1e-9):
        raise MetricError("PSF peak is not at the raster centre")
    angles = np.arange(0.0, 360.0, step_deg)
    rmax = math.hypot(R0, R1) / 2 + 1
    radii = np.arange(0.0, rmax, radial_step)
    th = np.deg2rad(angles)[:, None]
    cols = cx + radii[None, :] * np.cos(th)
    rows = cy + radii[None, :] * np.sin(th)
    vals = ndimage.map_coordinates(mag, [rows.ravel(), cols.ravel()], order=1, mode="constant", cval=np.nan)
    vals = vals.reshape(rows.shape)
    # the unpaired -R/2 row and column are left out so the sampled square is
    # symmetric under 90 degree rotation about the peak
    half = min(cy, cx, R0 - 1 - cy, R1 - 1 - cx)
    inside = (np.abs(rows - cy) <= half + 1e-9) & (np.abs(cols - cx) <= half + 1e-9)
    levels = np.empty(len(angles))
    for i in range(len(angles)):
        last = np.nonzero(inside[i])[0].max()
        levels[i] = _ray_sidelobe(to_db(vals[i, : last + 1]))
    return SllProfile(angles, levels)


def avg_sll(profile: SllProfile) -> float:
    """Mean of the per-angle dB levels."""
    if len(profile.levels) == 0:
        raise MetricError("empty profile")
    return float(np.mean(profile.levels))


def peak_sll(profile: SllProfile) -> float:
    return float(np.max(profile.levels))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    a: SceneImage | np.ndarray,
    b: SceneImage | np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    dynamic_range: float | None = None,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local SSIM with a Gaussian window.

    ``dynamic_range`` defaults to the larger of the two images' ranges, which
    keeps the index symmetric. Window-sized borders are excluded from the mean.
    """
    x = np.asarray(a.pixels if isinstance(a, SceneImage) else a, dtype=float)
    y = np.asarray(b.pixels if isinstance(b, SceneImage) else b, dtype=float)
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < window:
        raise MetricError(f"images must be 2-D and at least {window} pixels per side")
    L = dynamic_range if dynamic_range is not None else max(np.ptp(x), np.ptp(y))
    if L == 0:
        if np.array_equal(x, y):
            return 1.0
        L = max(np.abs(x).max(), np.abs(y).max())
    C1, C2 = (k1 * L) ** 2, (k2 * L) ** 2
    w = gaussian_window(window, sigma)

    def filt(img):
        return ndimage.correlate(img, w, mode="reflect")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
    pad = (window - 1) // 2
    return float(np.clip(smap[pad:-pad, pad:-pad].mean(), -1.0, 1.0))


def crop_to_fov(img: SceneImage, fov: ApertureFigures | tuple[float, float]) -> SceneImage:
    """Sub-raster with |alpha| <= fov_alpha and |beta| <= fov_beta."""
    fa, fb = (fov.fov_alpha, fov.fov_beta) if isinstance(fov, ApertureFigures) else fov
    for name, f, ax in (("alpha", fa, img.alpha_axis), ("beta", fb, img.beta_axis)):
        if not (np.isfinite(f) and f > 0):
            raise MetricError(f"degenerate FOV along {name}: {f}")
        if f > np.abs(ax).max() + 1e-9:
            raise MetricError(f"FOV {f:.5g} along {name} is larger than the image ({np.abs(ax).max():.5g})")
    tol = 1e-12
    ka = np.abs(img.alpha_axis) <= fa + tol
    kb = np.abs(img.beta_axis) <= fb + tol
    return SceneImage(img.pixels[np.ix_(kb, ka)], img.alpha_axis[ka], img.beta_axis[kb])


def clamp_fov(fov: ApertureFigures, img: SceneImage) -> tuple[float, float]:
    """FOV half-extents limited to what the raster can show."""
    return (
        min(fov.fov_alpha, float(np.abs(img.alpha_axis).max())),
        min(fov.fov_beta, float(np.abs(img.beta_axis).max())),
    )


@dataclass(frozen=True)
class MetricReport:
    unique_samples: int
    redundant_samples: int
    avg_sll_db: float
    psl_db: float
    ssim: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)
