"""Candidate grids, array layouts, baselines and the UV sampling function."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s
DEFAULT_FREQ_GHZ = 38.0
DEFAULT_CELL = 0.5
DEFAULT_MIN_SPACING_MM = 26.0
DEFAULT_MAX_EXTENT_MM = 202.0
DEFAULT_N_ELEMENTS = 24

SHIPPED_GRIDS = ("lattice48", "rect48")


class GridError(ValueError):
    """A grid file or grid definition violates one of the grid invariants."""

    def __init__(self, message: str, slots: Iterable[int] = (), line: int | None = None):
        self.slots = tuple(slots)
        self.line = line
        super().__init__(message)


class LayoutError(ValueError):
    pass


def wavelength_mm(freq_ghz: float = DEFAULT_FREQ_GHZ) -> float:
    if freq_ghz <= 0:
        raise ValueError(f"frequency must be positive, got {freq_ghz}")
    return SPEED_OF_LIGHT / (freq_ghz * 1e9) * 1e3


@dataclass(frozen=True)
class PositionGrid:
    """Allowed element locations; slot ids run 1..n in file order."""

    ids: tuple[int, ...]
    xy: np.ndarray = field(repr=False)  # (n, 2) mm
    name: str = "grid"
    min_spacing: float = DEFAULT_MIN_SPACING_MM
    max_extent: float = DEFAULT_MAX_EXTENT_MM

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        xy.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        self.validate()

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def x(self) -> np.ndarray:
        return self.xy[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xy[:, 1]

    @property
    def extents(self) -> tuple[float, float]:
        if len(self) == 0:
            return 0.0, 0.0
        return float(np.ptp(self.x)), float(np.ptp(self.y))

    def min_pair_distance(self) -> float:
        if len(self) < 2:
            return math.inf
        d = np.hypot(*(self.xy[:, None, :] - self.xy[None, :, :]).transpose(2, 0, 1))
        return float(d[np.triu_indices(len(self), 1)].min())

    def positions(self, indices: Iterable[int]) -> np.ndarray:
        """Coordinates (mm) of the given 1-based slot ids."""
        idx = np.asarray(list(indices), dtype=int)
        return self.xy[idx - 1]

    def validate(self) -> None:
        n = len(self.ids)
        if n == 0:
            raise GridError("no slots")
        if len(self.xy) != n:
            raise GridError(f"{n} ids but {len(self.xy)} coordinate rows")
        seen: dict[int, int] = {}
        for i in self.ids:
            if i in seen:
                raise GridError(f"duplicate slot id {i}", slots=[i])
            seen[i] = 1
        if sorted(self.ids) != list(self.ids) or self.ids != tuple(range(1, n + 1)):
            raise GridError("slot ids must be contiguous 1..n in order", slots=self.ids)
        if not np.all(np.isfinite(self.xy)):
            raise GridError("non-finite coordinate")
        if n >= 2:
            diff = self.xy[:, None, :] - self.xy[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            iu, ju = np.triu_indices(n, 1)
            bad = dist[iu, ju] < self.min_spacing - 1e-9
            if bad.any():
                k = int(np.argmin(np.where(bad, dist[iu, ju], np.inf)))
                a, b = self.ids[iu[k]], self.ids[ju[k]]
                raise GridError(
                    f"slots {a} and {b} are {dist[iu[k], ju[k]]:.3f} mm apart "
                    f"(minimum {self.min_spacing:g} mm)",
                    slots=[a, b],
                )
        for axis, name in ((0, "x"), (1, "y")):
            col = self.xy[:, axis]
            if np.ptp(col) > self.max_extent + 1e-9:
                lo, hi = int(np.argmin(col)), int(np.argmax(col))
                raise GridError(
                    f"{name} extent {np.ptp(col):.3f} mm exceeds maximum "
                    f"{self.max_extent:g} mm (slots {self.ids[lo]}, {self.ids[hi]})",
                    slots=[self.ids[lo], self.ids[hi]],
                )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("id,x_mm,y_mm\n")
        for i, (x, y) in zip(self.ids, self.xy):
            buf.write(f"{i},{x:.4f},{y:.4f}\n")
        return buf.getvalue()


def parse_grid_csv(
    text: str,
    name: str = "grid",
    min_spacing: float = DEFAULT_MIN_SPACING_MM,
    max_extent: float = DEFAULT_MAX_EXTENT_MM,
) -> PositionGrid:
    """Parse the ``id,x_mm,y_mm`` grid format."""
    rows = [r for r in csv.reader(io.StringIO(text))]
    body = [(n, r) for n, r in enumerate(rows, start=1) if r and any(c.strip() for c in r)]
    if not body:
        raise GridError("no slots")
    header = [c.strip().lower() for c in body[0][1]]
    if header != ["id", "x_mm", "y_mm"]:
        raise GridError(f"bad header {body[0][1]!r}, expected id,x_mm,y_mm", line=body[0][0])
    ids, xy = [], []
    seen: dict[int, int] = {}
    for line, row in body[1:]:
        if len(row) != 3:
            raise GridError(f"line {line}: expected 3 fields, got {len(row)}", line=line)
        try:
            sid = int(row[0])
            x, y = float(row[1]), float(row[2])
        except ValueError as exc:
            raise GridError(f"line {line}: {exc}", line=line) from None
        if sid in seen:
            raise GridError(
                f"line {line}: duplicate slot id {sid} (first on line {seen[sid]})",
                slots=[sid],
                line=line,
            )
        seen[sid] = line
        ids.append(sid)
        xy.append((x, y))
    if not ids:
        raise GridError("no slots")
    return PositionGrid(tuple(ids), np.array(xy), name=name, min_spacing=min_spacing, max_extent=max_extent)


def load_grid(
    source: str | Path,
    min_spacing: float = DEFAULT_MIN_SPACING_MM,
    max_extent: float = DEFAULT_MAX_EXTENT_MM,
) -> PositionGrid:
    """Load a grid CSV from a path, or one of the shipped grids by name."""
    if str(source) in SHIPPED_GRIDS:
        name = str(source)
        text = resources.files("aimarray.data.grids").joinpath(f"{name}.csv").read_text()
    else:
        path = Path(source)
        text = path.read_text()
        name = path.stem
    return parse_grid_csv(text, name=name, min_spacing=min_spacing, max_extent=max_extent)


@dataclass(frozen=True)
class ArrayLayout:
    grid_name: str
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            dup = sorted({i for i in idx if idx.count(i) > 1})
            raise LayoutError(f"duplicate slot indices {dup}")
        object.__setattr__(self, "indices", idx)

    @property
    def n(self) -> int:
        return len(self.indices)

    def check(self, grid: PositionGrid, n: int | None = None) -> None:
        bad = [i for i in self.indices if i < 1 or i > len(grid)]
        if bad:
            raise LayoutError(f"slot(s) {bad} not in grid {grid.name!r} ({len(grid)} slots)")
        if n is not None and self.n != n:
            raise LayoutError(f"layout has {self.n} elements, expected {n}")

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid_name, "indices": list(self.indices), "n": self.n})

    @classmethod
    def from_json(cls, text: str) -> "ArrayLayout":
        try:
            obj = json.loads(text)
            layout = cls(str(obj["grid"]), tuple(obj["indices"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise LayoutError(f"invalid layout JSON: {exc}") from None
        if "n" in obj and int(obj["n"]) != layout.n:
            raise LayoutError(f"layout declares n={obj['n']} but lists {layout.n} indices")
        return layout


def load_layout(source: str | Path) -> ArrayLayout:
    """Read a layout JSON file, or a shipped layout by name (e.g. ``circular24``)."""
    path = Path(source)
    if not path.exists() and not path.suffix:
        text = resources.files("aimarray.data.layouts").joinpath(f"{source}.json").read_text()
    else:
        text = path.read_text()
    return ArrayLayout.from_json(text)


def quantize(x: np.ndarray) -> np.ndarray:
    """Nearest integer, halves rounded away from zero (odd symmetric)."""
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass(frozen=True)
class SamplingFunction:
    """Quantized UV cells hit by every ordered element pair, with multiplicities."""

    cells: Mapping[tuple[int, int], int]
    cell_size: float = DEFAULT_CELL
    wavelength: float = field(default_factory=wavelength_mm)

    @property
    def unique(self) -> int:
        return len(self.cells)

    @property
    def total(self) -> int:
        return int(sum(self.cells.values()))

    def max_index(self) -> int:
        return max((max(abs(p), abs(q)) for p, q in self.cells), default=0)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(k, 2) cell indices and (k,) multiplicities, in sorted cell order."""
        keys = sorted(self.cells)
        pq = np.array(keys, dtype=np.int64).reshape(-1, 2)
        w = np.array([self.cells[k] for k in keys], dtype=np.int64)
        return pq, w


def pair_cells(xy: np.ndarray, wavelength: float, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Quantized (u, v) cell indices for every ordered pair, as two (n, n) arrays."""
    scale = 1.0 / (wavelength * cell_size)
    dx = xy[:, None, 0] - xy[None, :, 0]
    dy = xy[:, None, 1] - xy[None, :, 1]
    return quantize(dx * scale), quantize(dy * scale)


def sampling_function(
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> SamplingFunction:
    if wavelength is None:
        wavelength = wavelength_mm()
    if wavelength <= 0 or cell_size <= 0:
        raise ValueError("wavelength and cell_size must be positive")
    layout.check(grid)
    xy = grid.positions(layout.indices)
    p, q = pair_cells(xy, wavelength, cell_size)
    keys, counts = np.unique(np.stack([p.ravel(), q.ravel()], axis=1), axis=0, return_counts=True)
    cells = {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}
    return SamplingFunction(cells, cell_size=cell_size, wavelength=wavelength)


@dataclass(frozen=True)
class ApertureFigures:
    """Largest/smallest per-axis separations and the resolution and FOV they imply.

    Undefined per-axis figures (all elements aligned on that axis) are NaN.
    """

    D_x: float
    D_y: float
    d_x: float
    d_y: float
    res_alpha: float
    res_beta: float
    fov_alpha: float
    fov_beta: float
    wavelength: float

    @property
    def defined(self) -> bool:
        return all(math.isfinite(v) for v in (self.res_alpha, self.res_beta, self.fov_alpha, self.fov_beta))

    @property
    def worst_res(self) -> float:
        return max(self.res_alpha, self.res_beta)

    @property
    def worst_fov(self) -> float:
        return min(self.fov_alpha, self.fov_beta)

    def as_dict(self) -> dict:
        return {k: (None if not math.isfinite(v) else v) for k, v in self.__dict__.items()}


def resolution(wavelength: float, largest: float) -> float:
    return 0.88 * wavelength / largest if largest > 0 else math.nan


def field_of_view(wavelength: float, smallest: float) -> float:
    return wavelength / (2.0 * smallest) if smallest > 0 else math.nan


def axis_spacings(coord: np.ndarray, align_tol: float) -> tuple[float, float]:
    """Largest and smallest non-aligned separation along one axis (NaN if none)."""
    sep = np.abs(coord[:, None] - coord[None, :])
    sep = sep[sep >= align_tol]
    if sep.size == 0:
        return math.nan, math.nan
    return float(sep.max()), float(sep.min())


def aperture_figures(
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
    align_tol: float | None = None,
) -> ApertureFigures:
    """Per-axis resolution (0.88 lambda / D) and unambiguous FOV (lambda / 2d).

    ``d`` is the smallest per-axis separation that is not an alignment; pairs
    closer than ``align_tol`` on an axis (default: half a UV cell, i.e. they
    share a sampling column) count as aligned.
    """
    if wavelength is None:
        wavelength = wavelength_mm()
    if align_tol is None:
        align_tol = 0.5 * cell_size * wavelength
    layout.check(grid)
    xy = grid.positions(layout.indices)
    Dx, dx = axis_spacings(xy[:, 0], align_tol)
    Dy, dy = axis_spacings(xy[:, 1], align_tol)
    return ApertureFigures(
        D_x=Dx,
        D_y=Dy,
        d_x=dx,
        d_y=dy,
        res_alpha=resolution(wavelength, Dx),
        res_beta=resolution(wavelength, Dy),
        fov_alpha=field_of_view(wavelength, dx),
        fov_beta=field_of_view(wavelength, dy),
        wavelength=wavelength,
    )


def rectangular_grid(
    columns: int,
    rows: int,
    pitch_x: float,
    pitch_y: float,
    name: str = "rect",
    **limits,
) -> PositionGrid:
    """Regular lattice, slots numbered row by row from the lower left."""
    xy = [(c * pitch_x, r * pitch_y) for r in range(rows) for c in range(columns)]
    return PositionGrid(tuple(range(1, len(xy) + 1)), np.array(xy, dtype=float), name=name, **limits)


def circular_layout(grid: PositionGrid, n: int = DEFAULT_N_ELEMENTS, radius: float = 95.0) -> ArrayLayout:
    """The n slots closest to a circle centred on the grid's bounding box.

    Ties in distance-to-circle are broken by slot id.
    """
    centre = (grid.xy.min(axis=0) + grid.xy.max(axis=0)) / 2
    r = np.hypot(*(grid.xy - centre).T)
    off = np.round(np.abs(r - radius), 9)
    order = np.lexsort((np.array(grid.ids), off))
    return ArrayLayout(grid.name, tuple(int(grid.ids[k]) for k in order[:n]))
