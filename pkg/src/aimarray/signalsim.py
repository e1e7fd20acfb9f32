"""Monte-Carlo receiver model and point-source channel calibration.

Scene points are independent incoherent emitters. Per snapshot, point k emits
a circular complex Gaussian sample of variance I_k and receiver i sees

    E_i = g_i * sum_k s_k exp(+j 2 pi (x_i a_k + y_i b_k) / lambda) + n_i

so the averaged cross-product <E_i E_j*> tends to the visibility at
u = (x_i - x_j) / lambda, with the same sign convention as :mod:`imaging`.
Channels are numbered 1..N in the layout's (sorted) slot order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_CELL, ArrayLayout, PositionGrid, quantize, wavelength_mm
from .imaging import DEFAULT_RASTER, RasterError, SceneImage, VisibilityGrid, reconstruct

SNAPSHOT_CHUNK = 4096  # snapshots drawn per derived RNG stream


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmitterScene:
    """Point emitters as (alpha, beta, intensity) triples."""

    points: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        pts = tuple((float(a), float(b), float(i)) for a, b, i in self.points)
        for a, b, i in pts:
            if not all(math.isfinite(v) for v in (a, b, i)):
                raise ValueError(f"non-finite emitter {(a, b, i)}")
            if a * a + b * b > 1.0 + 1e-12:
                raise ValueError(f"direction cosines ({a}, {b}) lie outside the unit disc")
            if i < 0:
                raise ValueError(f"negative intensity {i}")
        object.__setattr__(self, "points", pts)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def beta(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def intensity(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])

    @classmethod
    def point(cls, alpha: float = 0.0, beta: float = 0.0, intensity: float = 1.0) -> "EmitterScene":
        return cls(((alpha, beta, intensity),))


def random_emitter_scene(rng: np.random.Generator, max_points: int = 5, extent: float = 0.5) -> EmitterScene:
    k = int(rng.integers(1, max_points + 1))
    ab = rng.uniform(-extent, extent, (k, 2))
    inten = rng.uniform(0.2, 1.0, k)
    return EmitterScene(tuple((a, b, i) for (a, b), i in zip(ab, inten)))


@dataclass(frozen=True)
class ChannelModel:
    gains: np.ndarray = field(repr=False)  # complex, one per channel
    noise_power: float = 0.0

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=complex).ravel()
        if np.any(np.abs(g) <= 0) or not np.all(np.isfinite(g)):
            raise ValueError("gain amplitudes must be positive and finite")
        if not (self.noise_power >= 0 and math.isfinite(self.noise_power)):
            raise ValueError(f"noise_power must be non-negative, got {self.noise_power}")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @property
    def n(self) -> int:
        return len(self.gains)

    @classmethod
    def unit(cls, n: int, noise_power: float = 0.0) -> "ChannelModel":
        return cls(np.ones(n, dtype=complex), noise_power)

    @classmethod
    def random(
        cls,
        n: int,
        seed: int,
        amp_range: tuple[float, float] = (0.7, 1.4),
        noise_power: float = 0.0,
    ) -> "ChannelModel":
        """Uniform amplitudes in ``amp_range`` and phases over the full circle."""
        rng = np.random.default_rng(seed)
        amp = rng.uniform(*amp_range, n)
        phase = rng.uniform(-math.pi, math.pi, n)
        return cls(amp * np.exp(1j * phase), noise_power)

    def to_json(self) -> str:
        gains = [{"amp": float(abs(g)), "phase_rad": float(np.angle(g))} for g in self.gains]
        return json.dumps({"gains": gains, "noise_power": self.noise_power}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChannelModel":
        try:
            obj = json.loads(text)
            g = [float(e["amp"]) * np.exp(1j * float(e["phase_rad"])) for e in obj["gains"]]
            return cls(np.array(g), float(obj.get("noise_power", 0.0)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"invalid channel model JSON: {exc}") from None


@dataclass(frozen=True)
class VisibilityEstimate:
    """Snapshot-averaged cross-products for every ordered channel pair.

    Only the upper triangle is computed; the lower one is its conjugate.
    """

    matrix: np.ndarray = field(repr=False)
    snapshots: int = 1

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("estimate matrix must be square")
        if self.snapshots < 1:
            raise ValueError("snapshots must be >= 1")
        up = np.triu(m, 1)
        herm = up + up.conj().T + np.diag(m.diagonal().real)
        herm.setflags(write=False)
        object.__setattr__(self, "matrix", herm)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def pair(self, i: int, j: int) -> complex:
        """Estimate for channels i, j (1-based)."""
        return complex(self.matrix[i - 1, j - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,j,re,im\n")
        for i in range(self.n):
            for j in range(self.n):
                z = self.matrix[i, j]
                buf.write(f"{i + 1},{j + 1},{z.real:.17g},{z.imag:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, snapshots: int = 1) -> "VisibilityEstimate":
        rows = list(csv.DictReader(io.StringIO(text)))
        n = max(int(r["i"]) for r in rows)
        m = np.zeros((n, n), dtype=complex)
        for r in rows:
            m[int(r["i"]) - 1, int(r["j"]) - 1] = complex(float(r["re"]), float(r["im"]))
        return cls(m, snapshots)


def _positions(layout: ArrayLayout, grid: PositionGrid) -> np.ndarray:
    layout.check(grid)
    return grid.positions(layout.indices)


def steering_matrix(xy: np.ndarray, scene: EmitterScene, wavelength: float) -> np.ndarray:
    """(N, K) phase factors exp(+j 2 pi (x a + y b) / lambda)."""
    if not scene.points:
        return np.zeros((len(xy), 0), dtype=complex)
    ph = (np.outer(xy[:, 0], scene.alpha) + np.outer(xy[:, 1], scene.beta)) / wavelength
    return np.exp(2j * np.pi * ph)


def analytic_visibility(
    scene: EmitterScene,
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
) -> np.ndarray:
    """Exact <E_i E_j*> for unit gains and no noise, as an (N, N) matrix."""
    lam = wavelength_mm() if wavelength is None else wavelength
    A = steering_matrix(_positions(layout, grid), scene, lam)
    return (A * scene.intensity) @ A.conj().T


def simulate_visibility(
    scene: EmitterScene,
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
    channel: ChannelModel | None = None,
    snapshots: int = 10_000,
    seed: int = 0,
    chunk: int = SNAPSHOT_CHUNK,
) -> VisibilityEstimate:
    """Average E E^H over ``snapshots`` independent draws.

    Snapshots are drawn in blocks of ``chunk``, each from its own stream
    spawned off ``seed``, so results depend only on (seed, snapshots, chunk).
    Noise samples are drawn even when the noise power is zero, which keeps
    the emitter draws identical across channel models.
    """
    if snapshots < 1:
        raise ValueError("snapshots must be >= 1")
    lam = wavelength_mm() if wavelength is None else wavelength
    xy = _positions(layout, grid)
    n = len(xy)
    channel = ChannelModel.unit(n) if channel is None else channel
    if channel.n != n:
        raise ValueError(f"channel model has {channel.n} gains for {n} receivers")
    A = steering_matrix(xy, scene, lam) * channel.gains[:, None]
    amp = np.sqrt(scene.intensity / 2.0)[:, None]
    namp = math.sqrt(channel.noise_power / 2.0)
    n_chunks = -(-snapshots // chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    acc = np.zeros((n, n), dtype=complex)
    for c, ss in enumerate(streams):
        t = min(chunk, snapshots - c * chunk)
        rng = np.random.default_rng(ss)
        k = A.shape[1]
        s = amp * (rng.standard_normal((k, t)) + 1j * rng.standard_normal((k, t)))
        noise = namp * (rng.standard_normal((n, t)) + 1j * rng.standard_normal((n, t)))
        E = A @ s + noise
        acc += E @ E.conj().T
    return VisibilityEstimate(acc / snapshots, snapshots)


@dataclass(frozen=True)
class Calibration:
    """Per-channel gain estimates; ``weights`` (= 1/gains) undo them."""

    gains: np.ndarray = field(repr=False)
    source_power: float = 1.0
    max_phase_residual: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.gains

    def apply(self, est: VisibilityEstimate) -> VisibilityEstimate:
        w = self.weights
        if len(w) != est.n:
            raise ValueError(f"{len(w)} weights for {est.n} channels")
        return VisibilityEstimate(w[:, None] * est.matrix * w.conj()[None, :], est.snapshots)


def _wrap(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def calibrate_point_source(
    measured: VisibilityEstimate,
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
    source: tuple[float, float] = (0.0, 0.0),
) -> Calibration:
    """Fit g_i so that measured(i, j) ~ P g_i conj(g_j) model(i, j) over cross pairs.

    Log-amplitudes and phases are solved separately by linear least squares.
    The gain amplitudes are anchored to geometric mean 1 (any common factor is
    absorbed into the source power P) and channel 1 has phase 0.
    """
    lam = wavelength_mm() if wavelength is None else wavelength
    xy = _positions(layout, grid)
    n = len(xy)
    if measured.n != n:
        raise ValueError(f"estimate has {measured.n} channels, layout has {n}")
    if n < 3:
        raise CalibrationError(f"rank-deficient: {n} channels give fewer than {n + 1} independent equations")
    model = analytic_visibility(EmitterScene.point(*source), layout, grid, lam)
    iu, ju = np.triu_indices(n, 1)
    r = measured.matrix[iu, ju] / model[iu, ju]
    if np.any(np.abs(r) == 0) or not np.all(np.isfinite(r)):
        raise CalibrationError("zero or non-finite cross-pair estimate; cannot take logarithms")
    m = len(iu)

    # log|r_ij| = c + a_i + a_j, with sum(a) = 0
    A = np.zeros((m + 1, n + 1))
    A[np.arange(m), iu] = 1.0
    A[np.arange(m), ju] += 1.0
    A[:m, n] = 1.0
    A[m, :n] = 1.0
    rhs = np.append(np.log(np.abs(r)), 0.0)
    if np.linalg.matrix_rank(A) < n + 1:
        raise CalibrationError("rank-deficient amplitude system")
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    log_amp, log_power = sol[:n], sol[n]

    # arg r_ij = phi_i - phi_j, phi_1 = 0; unwrap against a first guess from channel 1
    phi0 = np.zeros(n)
    phi0[1:] = np.angle(measured.matrix[1:, 0] / model[1:, 0])
    guess = phi0[iu] - phi0[ju]
    target = guess + _wrap(np.angle(r) - guess)
    B = np.zeros((m, n - 1))
    rows = np.arange(m)
    ok_i, ok_j = iu > 0, ju > 0
    B[rows[ok_i], iu[ok_i] - 1] += 1.0
    B[rows[ok_j], ju[ok_j] - 1] -= 1.0
    if np.linalg.matrix_rank(B) < n - 1:
        raise CalibrationError("rank-deficient phase system")
    phi = np.concatenate([[0.0], np.linalg.lstsq(B, target, rcond=None)[0]])
    resid = np.abs(_wrap(np.angle(r) - (phi[iu] - phi[ju])))
    worst = float(resid.max())
    if worst > np.pi / 2:
        k = int(resid.argmax())
        raise CalibrationError(
            f"phase residual {worst:.3f} rad on channels {iu[k] + 1},{ju[k] + 1} exceeds pi/2"
        )
    return Calibration(np.exp(log_amp + 1j * phi), float(np.exp(log_power)), worst)


def grid_estimate(
    est: VisibilityEstimate,
    layout: ArrayLayout,
    grid: PositionGrid,
    raster: int = DEFAULT_RASTER,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> VisibilityGrid:
    """Average pair estimates falling in each UV cell; ``mask`` holds the pair counts."""
    lam = wavelength_mm() if wavelength is None else wavelength
    xy = _positions(layout, grid)
    if est.n != len(xy):
        raise ValueError(f"estimate has {est.n} channels, layout has {len(xy)}")
    scale = 1.0 / (lam * cell_size)
    p = quantize((xy[:, None, 0] - xy[None, :, 0]) * scale).ravel()
    q = quantize((xy[:, None, 1] - xy[None, :, 1]) * scale).ravel()
    need = 2 * int(max(np.abs(p).max(), np.abs(q).max())) + 2
    if raster < need:
        raise RasterError(f"UV support exceeds raster; need raster_size >= {need}")
    c = raster // 2
    cells = np.zeros((raster, raster), dtype=complex)
    mask = np.zeros((raster, raster))
    np.add.at(cells, (q + c, p + c), est.matrix.ravel())
    np.add.at(mask, (q + c, p + c), 1.0)
    hit = mask > 0
    cells[hit] /= mask[hit]
    return VisibilityGrid(cells, cell_size, mask)


def estimate_image(
    est: VisibilityEstimate,
    layout: ArrayLayout,
    grid: PositionGrid,
    raster: int = DEFAULT_RASTER,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> SceneImage:
    """Dirty image of a visibility estimate (unnormalized magnitude)."""
    return reconstruct(grid_estimate(est, layout, grid, raster, wavelength, cell_size))
