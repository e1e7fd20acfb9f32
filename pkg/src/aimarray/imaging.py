"""PSFs, visibility-domain sampling, dirty-image reconstruction and test scenes.

Conventions
-----------
Rasters are square, ``R x R`` with ``R`` even, indexed ``[row, col] = [beta, alpha]``
(and ``[v, u]`` on the UV side). Centred indices run over ``-R/2 .. R/2 - 1`` with
zero at array position ``R/2``. With UV cell size ``c`` (wavelengths) the image
axes are ``alpha_m = m / (R c)``.

Visibility:      V(u, v)   = sum I(a, b) exp(+j 2 pi (u a + v b))
Reconstruction:  I_r(a, b) = 1/R^2 sum V_s(u, v) exp(-j 2 pi (u a + v b))

so a forward/inverse round trip is the identity and the PSF is the
reconstruction of the sampling mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.fft import fft2, fftshift, ifft2, ifftshift

from .geometry import DEFAULT_CELL, SamplingFunction

DEFAULT_RASTER = 256


class RasterError(ValueError):
    pass


def image_axis(raster: int, cell_size: float) -> np.ndarray:
    """Direction-cosine coordinates of an image axis."""
    m = np.arange(raster) - raster // 2
    return m / (raster * cell_size)


def _check_axis(axis: np.ndarray, name: str) -> None:
    if axis.ndim != 1 or len(axis) < 2:
        raise RasterError(f"{name} axis must be 1-D with at least 2 points")
    step = np.diff(axis)
    if np.any(step <= 0) or not np.allclose(step, step[0], rtol=1e-9, atol=1e-12):
        raise RasterError(f"{name} axis must be strictly increasing and uniform")
    if axis[0] < -1 - 1e-9 or axis[-1] > 1 + 1e-9:
        raise RasterError(f"{name} axis leaves [-1, 1]")


@dataclass(frozen=True)
class SceneImage:
    pixels: np.ndarray
    alpha_axis: np.ndarray
    beta_axis: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        a = np.asarray(self.alpha_axis, dtype=float)
        b = np.asarray(self.beta_axis, dtype=float)
        _check_axis(a, "alpha")
        _check_axis(b, "beta")
        if px.shape != (len(b), len(a)):
            raise RasterError(f"pixels {px.shape} do not match axes ({len(b)}, {len(a)})")
        if np.any(px < 0):
            raise RasterError("scene intensities must be non-negative")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "alpha_axis", a)
        object.__setattr__(self, "beta_axis", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def cell_size(self) -> float:
        return _cell_from_axis(self.alpha_axis)

    def normalized(self) -> "SceneImage":
        peak = self.pixels.max()
        px = self.pixels / peak if peak > 0 else self.pixels.copy()
        return SceneImage(px, self.alpha_axis, self.beta_axis)

    @classmethod
    def blank(cls, raster: int = DEFAULT_RASTER, cell_size: float = DEFAULT_CELL) -> "SceneImage":
        ax = image_axis(raster, cell_size)
        return cls(np.zeros((raster, raster)), ax, ax)


@dataclass(frozen=True)
class ComplexImage:
    pixels: np.ndarray
    alpha_axis: np.ndarray
    beta_axis: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=complex)
        if px.shape != (len(self.beta_axis), len(self.alpha_axis)):
            raise RasterError("pixels do not match axes")
        object.__setattr__(self, "pixels", px)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.pixels)

    @property
    def cell_size(self) -> float:
        return _cell_from_axis(np.asarray(self.alpha_axis))


def _cell_from_axis(axis: np.ndarray) -> float:
    return float(1.0 / (len(axis) * (axis[1] - axis[0])))


@dataclass(frozen=True)
class VisibilityGrid:
    """Complex visibilities on the centred UV cell lattice plus sample multiplicities."""

    cells: np.ndarray
    cell_size: float
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=complex)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1] or cells.shape[0] % 2:
            raise RasterError(f"UV raster must be square with even size, got {cells.shape}")
        mask = np.ones(cells.shape) if self.mask is None else np.asarray(self.mask, dtype=float)
        if mask.shape != cells.shape:
            raise RasterError("mask shape differs from cells")
        if np.any(mask < 0):
            raise RasterError("mask must be non-negative")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "mask", mask)

    @property
    def raster(self) -> int:
        return self.cells.shape[0]

    def hermitian_error(self) -> float:
        """Largest |V(-p,-q) - conj V(p,q)| over cells sampled at both points."""
        R = self.raster
        # index R/2 + p  ->  R/2 - p  (mod R)
        flip = np.roll(self.cells[::-1, ::-1], 1, axis=(0, 1))
        fmask = np.roll(self.mask[::-1, ::-1], 1, axis=(0, 1))
        both = (self.mask > 0) & (fmask > 0)
        both[0, :] = False
        both[:, 0] = False  # -R/2 has no partner inside the raster
        if not both.any():
            return 0.0
        return float(np.abs(flip[both] - np.conj(self.cells[both])).max()) if R else 0.0


def sampling_raster(s: SamplingFunction, raster: int, weighting: str = "binary") -> np.ndarray:
    """Place a sampling function on an R x R UV raster centred at DC."""
    need = 2 * s.max_index() + 2
    if raster < need:
        raise RasterError(f"UV support exceeds raster; need raster_size >= {need}")
    out = np.zeros((raster, raster))
    if not s.cells:
        return out
    pq, w = s.as_arrays()
    c = raster // 2
    if weighting == "binary":
        w = np.ones_like(w)
    elif weighting != "multiplicity":
        raise ValueError(f"unknown weighting {weighting!r}")
    out[pq[:, 1] + c, pq[:, 0] + c] = w
    return out


def _inverse(cells: np.ndarray) -> np.ndarray:
    R = cells.shape[0]
    return fftshift(fft2(ifftshift(cells))) / (R * R)


def _forward(pixels: np.ndarray) -> np.ndarray:
    R = pixels.shape[0]
    return fftshift(ifft2(ifftshift(pixels))) * (R * R)


def psf(
    s: SamplingFunction,
    raster_size: int = DEFAULT_RASTER,
    weighting: str = "binary",
    normalize: bool = True,
) -> ComplexImage:
    """Inverse transform of the sampling function.

    Unnormalized, the PSF energy obeys ``sum |psf|^2 = sum w^2 / R^2``.
    With ``normalize`` the peak magnitude is scaled to 1.
    """
    mask = sampling_raster(s, raster_size, weighting)
    img = _inverse(mask)
    if normalize:
        peak = np.abs(img).max()
        if peak > 0:
            img = img / peak
    ax = image_axis(raster_size, s.cell_size)
    return ComplexImage(img, ax, ax)


def scene_visibility(scene: SceneImage) -> VisibilityGrid:
    if scene.shape[0] != scene.shape[1] or scene.shape[0] % 2:
        raise RasterError("scene raster must be square with even size")
    return VisibilityGrid(_forward(scene.pixels), scene.cell_size)


def sample_visibility(v: VisibilityGrid, s: SamplingFunction, weighting: str = "binary") -> VisibilityGrid:
    """Keep only sampled cells. ``mask`` of the result carries the multiplicities."""
    if not np.isclose(v.cell_size, s.cell_size, rtol=1e-9):
        raise RasterError(f"cell size mismatch: visibility {v.cell_size} vs sampling {s.cell_size}")
    weight = sampling_raster(s, v.raster, weighting)
    mult = sampling_raster(s, v.raster, "multiplicity")
    return VisibilityGrid(v.cells * weight, v.cell_size, mult)


def reconstruct(v_s: VisibilityGrid, normalize: bool = False) -> SceneImage:
    """Dirty image: magnitude of the inverse transform of the sampled visibility."""
    img = np.abs(_inverse(v_s.cells))
    if normalize:
        peak = img.max()
        if peak > 0:
            img = img / peak
    ax = image_axis(v_s.raster, v_s.cell_size)
    return SceneImage(img, ax, ax)


def reconstruct_direct(v_s: VisibilityGrid) -> np.ndarray:
    """Literal double sum over sampled cells, O(R^4). For checking small rasters only."""
    R = v_s.raster
    k = np.arange(R) - R // 2
    c = v_s.cell_size
    u = k * c
    a = image_axis(R, c)
    # kernel[m, p] = exp(-j 2 pi u_p alpha_m)
    ker = np.exp(-2j * np.pi * np.outer(a, u))
    out = np.zeros((R, R), dtype=complex)
    for iv in range(R):
        for iu in range(R):
            val = v_s.cells[iv, iu]
            if val != 0:
                out += val * np.outer(ker[:, iv], ker[:, iu])
    return np.abs(out) / (R * R)


def circular_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Centred circular convolution: the kernel's centre pixel is the zero lag."""
    return ifft2(fft2(a) * fft2(ifftshift(b)))


def simulate_reconstruction(scene: SceneImage, psf_image: ComplexImage) -> SceneImage:
    """Scene convolved with the complex PSF, magnitude taken afterwards, peak-normalized."""
    if scene.shape != psf_image.pixels.shape:
        raise RasterError(f"scene {scene.shape} and PSF {psf_image.pixels.shape} differ")
    if not np.isclose(scene.cell_size, psf_image.cell_size, rtol=1e-9):
        raise RasterError("scene and PSF use different cell sizes")
    img = np.abs(circular_convolve(scene.pixels, psf_image.pixels))
    peak = img.max()
    if peak > 0:
        img = img / peak
    return SceneImage(img, scene.alpha_axis, scene.beta_axis)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for random test scenes. Extents and sizes are direction cosines."""

    raster: int = DEFAULT_RASTER
    cell_size: float = DEFAULT_CELL
    shape_count: tuple[int, int] = (2, 8)
    intensity: tuple[float, float] = (0.2, 1.0)
    extent: float = 0.9
    size: tuple[float, float] = (0.01, 0.03)  # small targets expose sidelobe clutter
    circle_fraction: float = 0.5

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "circle"
    centre: tuple[float, float]
    half_size: tuple[float, float]  # (ha, hb) for rects, (r, r) for circles
    intensity: float


def draw_shapes(rng: np.random.Generator, spec: SceneSpec) -> list[Shape]:
    lo, hi = spec.shape_count
    count = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(count):
        kind = "circle" if rng.random() < spec.circle_fraction else "rect"
        centre = tuple(rng.uniform(-spec.extent, spec.extent, 2))
        if kind == "circle":
            r = rng.uniform(*spec.size)
            half = (r, r)
        else:
            half = tuple(rng.uniform(*spec.size, 2))
        intensity = rng.uniform(*spec.intensity)
        shapes.append(Shape(kind, (float(centre[0]), float(centre[1])), (float(half[0]), float(half[1])), float(intensity)))
    return shapes


def render_shapes(shapes: list[Shape], raster: int, cell_size: float) -> SceneImage:
    """Painter's order: later shapes overwrite earlier ones."""
    ax = image_axis(raster, cell_size)
    A, B = np.meshgrid(ax, ax)
    px = np.zeros((raster, raster))
    for sh in shapes:
        a0, b0 = sh.centre
        if sh.kind == "circle":
            inside = (A - a0) ** 2 + (B - b0) ** 2 <= sh.half_size[0] ** 2
        else:
            inside = (np.abs(A - a0) <= sh.half_size[0]) & (np.abs(B - b0) <= sh.half_size[1])
        px[inside] = sh.intensity
    return SceneImage(px, ax, ax)


def generate_random_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SceneImage:
    rng = np.random.default_rng(seed)
    return render_shapes(draw_shapes(rng, spec), spec.raster, spec.cell_size)


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM of a non-negative image, linearly scaled to its peak."""
    from .io import atomic_write_bytes

    img = np.asarray(image, dtype=float)
    peak = img.max()
    scaled = np.zeros(img.shape) if peak <= 0 else img / peak
    # row 0 of the file is the top of the picture (largest beta)
    data = np.round(scaled[::-1] * 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    atomic_write_bytes(path, header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)
    return data[::-1].astype(float) / maxval


def write_raster_csv(path, image: np.ndarray) -> None:
    from .io import atomic_write_text

    lines = [",".join(f"{v:.9g}" for v in row) for row in np.asarray(image)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_sidecar(path, cell_size: float, raster: int, wavelength_mm: float) -> None:
    from .io import atomic_write_text

    atomic_write_text(
        path,
        json.dumps({"cell_size": cell_size, "raster": raster, "wavelength_mm": wavelength_mm}, indent=2) + "\n",
    )
