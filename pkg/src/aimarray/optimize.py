"""Layout search: seeded random search and an NSGA-II style multi-objective GA.

Objectives are all minimised: ``(-unique samples, worst-axis resolution,
-worst-axis FOV)``. Genomes are sorted vectors of distinct 0-based slot
positions internally and 1-based slot ids everywhere else.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import (
    DEFAULT_CELL,
    ArrayLayout,
    PositionGrid,
    aperture_figures,
    pair_cells,
    sampling_function,
    wavelength_mm,
)
from .io import atomic_write_text, dumps
from .metrics import count_unique

log = logging.getLogger(__name__)

RANDOM_BATCH = 4096


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ObjectiveVector:
    neg_unique: float
    worst_res: float
    neg_worst_fov: float

    @property
    def feasible(self) -> bool:
        return all(math.isfinite(v) for v in (self.neg_unique, self.worst_res, self.neg_worst_fov))

    @property
    def unique(self) -> int:
        return int(-self.neg_unique)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.neg_unique, self.worst_res, self.neg_worst_fov)

    def dominates(self, other: "ObjectiveVector") -> bool:
        a, b = self.as_tuple(), other.as_tuple()
        return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def evaluate_objectives(
    layout: ArrayLayout,
    grid: PositionGrid,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> ObjectiveVector:
    """Objective vector of one layout; NaN components mark an infeasible layout."""
    if wavelength is None:
        wavelength = wavelength_mm()
    unique, _ = count_unique(sampling_function(layout, grid, wavelength, cell_size))
    fig = aperture_figures(layout, grid, wavelength, cell_size)
    if not fig.defined:
        return ObjectiveVector(-float(unique), math.nan, math.nan)
    return ObjectiveVector(-float(unique), fig.worst_res, -fig.worst_fov)


class LayoutEvaluator:
    """Batch objective evaluation for many layouts on one grid.

    Produces the same numbers as :func:`evaluate_objectives`, vectorised over
    a ``(B, n)`` array of 0-based slot positions.
    """

    def __init__(self, grid: PositionGrid, wavelength: float | None = None, cell_size: float = DEFAULT_CELL):
        self.grid = grid
        self.wavelength = wavelength_mm() if wavelength is None else wavelength
        self.cell_size = cell_size
        self.align_tol = 0.5 * cell_size * self.wavelength
        p, q = pair_cells(grid.xy, self.wavelength, cell_size)
        span = int(max(np.abs(p).max(), np.abs(q).max())) + 1
        self.codes = (p + span) * (2 * span + 1) + (q + span)
        self.x = grid.xy[:, 0]
        self.y = grid.xy[:, 1]

    @property
    def n_slots(self) -> int:
        return len(self.grid)

    def unique(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        g = self.codes[idx[:, :, None], idx[:, None, :]].reshape(len(idx), -1)
        g.sort(axis=1)
        return 1 + np.count_nonzero(np.diff(g, axis=1), axis=1)

    def _axis(self, coord: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = coord[idx]
        sep = np.abs(c[:, :, None] - c[:, None, :])
        ok = sep >= self.align_tol
        big = np.where(ok, sep, -np.inf).max(axis=(1, 2))
        small = np.where(ok, sep, np.inf).min(axis=(1, 2))
        bad = ~ok.any(axis=(1, 2))
        big[bad] = np.nan
        small[bad] = np.nan
        return big, small

    def evaluate(self, idx: np.ndarray) -> np.ndarray:
        """(B, 3) objective matrix; rows with NaN are infeasible."""
        idx = np.atleast_2d(idx)
        u = self.unique(idx).astype(float)
        Dx, dx = self._axis(self.x, idx)
        Dy, dy = self._axis(self.y, idx)
        lam = self.wavelength
        with np.errstate(invalid="ignore"):
            res = np.maximum(0.88 * lam / Dx, 0.88 * lam / Dy)
            fov = np.minimum(lam / (2.0 * dx), lam / (2.0 * dy))
        res[np.isnan(Dx) | np.isnan(Dy)] = np.nan
        fov[np.isnan(dx) | np.isnan(dy)] = np.nan
        return np.stack([-u, res, -fov], axis=1)


def _lex_order(genomes: np.ndarray) -> np.ndarray:
    """Row order sorting genomes lexicographically (first column most significant)."""
    return np.lexsort(genomes.T[::-1])


def _best_index(F: np.ndarray, genomes: np.ndarray) -> int:
    """Max unique, then min worst_res, then lexicographically smallest genome."""
    feasible = np.isfinite(F).all(axis=1)
    res = np.where(np.isfinite(F[:, 1]), F[:, 1], np.inf)
    lex_rank = np.empty(len(genomes), dtype=np.int64)
    lex_rank[_lex_order(genomes)] = np.arange(len(genomes))
    order = np.lexsort((lex_rank, res, F[:, 0], ~feasible))
    return int(order[0])


@dataclass(frozen=True)
class RandomSearchResult:
    layout: ArrayLayout
    objectives: ObjectiveVector
    n_trials: int
    seed: int


def random_search(
    grid: PositionGrid,
    n_elements: int,
    n_trials: int,
    seed: int,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> RandomSearchResult:
    """Best of ``n_trials`` uniformly drawn layouts by unique sample count.

    Ties go to the smaller worst-axis resolution, then the lexicographically
    smaller index vector. Draws are made in fixed-size batches so the result
    depends only on ``seed``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    m = len(grid)
    if n_elements > m:
        raise ValueError(f"cannot place {n_elements} elements on {m} slots")
    ev = LayoutEvaluator(grid, wavelength, cell_size)
    rng = np.random.default_rng(seed)
    best_g, best_f = None, None
    done = 0
    while done < n_trials:
        b = min(RANDOM_BATCH, n_trials - done)
        keys = rng.random((b, m))
        idx = np.sort(np.argsort(keys, axis=1, kind="stable")[:, :n_elements], axis=1)
        F = ev.evaluate(idx)
        k = _best_index(F, idx)
        if best_g is None:
            best_g, best_f = idx[k], F[k]
        else:
            pair_g = np.stack([best_g, idx[k]])
            pair_f = np.stack([best_f, F[k]])
            j = _best_index(pair_f, pair_g)
            best_g, best_f = pair_g[j], pair_f[j]
        done += b
    layout = ArrayLayout(grid.name, tuple(int(i) + 1 for i in best_g))
    return RandomSearchResult(layout, ObjectiveVector(*map(float, best_f)), n_trials, seed)


@dataclass(frozen=True)
class GaParams:
    population: int = 200
    generations: int = 100
    crossover_fraction: float = 0.8
    pareto_fraction: float = 0.6
    mutation_rate: float | None = None  # default 2 / n_elements
    seed: int = 0
    max_repair: int = 100

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise ValueError("population must be even and >= 4")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0.0 <= self.crossover_fraction <= 1.0:
            raise ValueError("crossover_fraction must lie in [0, 1]")
        if not 0.0 < self.pareto_fraction <= 1.0:
            raise ValueError("pareto_fraction must lie in (0, 1]")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")

    @classmethod
    def full_scale(cls, **kw) -> "GaParams":
        return cls(population=500, generations=200, crossover_fraction=0.8, pareto_fraction=0.6, **kw)

    def resolved_mutation(self, n_elements: int) -> float:
        return 2.0 / n_elements if self.mutation_rate is None else self.mutation_rate


@dataclass(frozen=True)
class ParetoSolution:
    layout: ArrayLayout
    objectives: ObjectiveVector

    def as_dict(self) -> dict:
        return {
            "indices": list(self.layout.indices),
            "unique": self.objectives.unique,
            "worst_res": self.objectives.worst_res,
            "worst_fov": -self.objectives.neg_worst_fov,
        }


def nondominated_fronts(F: np.ndarray) -> list[np.ndarray]:
    """Fast non-dominated sort of a finite (M, k) objective matrix."""
    M = len(F)
    if M == 0:
        return []
    le = (F[:, None, :] <= F[None, :, :]).all(axis=2)
    lt = (F[:, None, :] < F[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    fronts = []
    current = np.nonzero(count == 0)[0]
    assigned = np.zeros(M, dtype=bool)
    while current.size:
        fronts.append(current)
        assigned[current] = True
        count = count - dom[current].sum(axis=0)
        current = np.nonzero((count == 0) & ~assigned)[0]
    return fronts


def crowding_distance(F: np.ndarray) -> np.ndarray:
    n, k = F.shape
    d = np.zeros(n)
    if n <= 2:
        d[:] = np.inf
        return d
    for j in range(k):
        order = np.argsort(F[:, j], kind="stable")
        col = F[order, j]
        span = col[-1] - col[0]
        d[order[0]] = d[order[-1]] = np.inf
        if span > 0:
            d[order[1:-1]] += (col[2:] - col[:-2]) / span
    return d


def _rank_population(F: np.ndarray, genomes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-individual front rank and crowding distance.

    Infeasible rows share one rank after every feasible front.
    """
    n = len(F)
    rank = np.full(n, np.iinfo(np.int64).max // 2, dtype=np.int64)
    crowd = np.zeros(n)
    feas = np.nonzero(np.isfinite(F).all(axis=1))[0]
    fronts = nondominated_fronts(F[feas])
    for r, fr in enumerate(fronts):
        members = feas[fr]
        rank[members] = r
        crowd[members] = crowding_distance(F[members])
    rank[~np.isfinite(F).all(axis=1)] = len(fronts)
    return rank, crowd


def _survivor_order(F: np.ndarray, genomes: np.ndarray) -> np.ndarray:
    """Environmental-selection order: distinct genomes first, then rank, crowding,
    unique count and finally lexicographic genome order."""
    n = len(F)
    _, first = np.unique(genomes, axis=0, return_index=True)
    dup = np.ones(n, dtype=bool)
    dup[first] = False
    rank, crowd = _rank_population(F, genomes)
    lex_rank = np.empty(n, dtype=np.int64)
    lex_rank[_lex_order(genomes)] = np.arange(n)
    neg_u = np.where(np.isfinite(F[:, 0]), F[:, 0], 0.0)
    return np.lexsort((lex_rank, neg_u, -crowd, rank, dup))


def _repair(child: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Replace repeated genes by uniform draws from unused slots."""
    seen: set[int] = set()
    dup_pos = []
    for i, g in enumerate(child.tolist()):
        if g in seen:
            dup_pos.append(i)
        else:
            seen.add(g)
    if dup_pos:
        unused = np.setdiff1d(np.arange(m), child)
        fill = rng.choice(unused, size=len(dup_pos), replace=False)
        child = child.copy()
        child[dup_pos] = fill
    return child


def _mutate(child: np.ndarray, m: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    hits = np.nonzero(rng.random(len(child)) < rate)[0]
    if hits.size == 0:
        return child
    child = child.copy()
    for i in hits:
        unused = np.setdiff1d(np.arange(m), child)
        if unused.size == 0:
            break
        child[i] = unused[rng.integers(unused.size)]
    return child


def _crossover(a: np.ndarray, b: np.ndarray, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    take = rng.random(len(a)) < 0.5
    c1 = np.where(take, a, b)
    c2 = np.where(take, b, a)
    return _repair(c1, m, rng), _repair(c2, m, rng)


def _tournament(rank: np.ndarray, crowd: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(rank)
    a = rng.integers(n, size=k)
    b = rng.integers(n, size=k)
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & ((crowd[a] > crowd[b]) | ((crowd[a] == crowd[b]) & (a <= b))))
    return np.where(a_wins, a, b)


def _initial_population(ev: LayoutEvaluator, n: int, params: GaParams, rng: np.random.Generator) -> np.ndarray:
    m = ev.n_slots
    pop = np.empty((params.population, n), dtype=np.int64)
    for i in range(params.population):
        for _attempt in range(params.max_repair):
            g = np.sort(rng.permutation(m)[:n])
            if np.isfinite(ev.evaluate(g[None])).all():
                break
        pop[i] = g
    F = ev.evaluate(pop)
    if not np.isfinite(F).all(axis=1).any():
        raise OptimizationError(
            f"no feasible layout found after {params.max_repair} draws per individual "
            f"({params.population} individuals, {n} of {m} slots); every layout is axis-degenerate"
        )
    return pop


def grid_fingerprint(grid: PositionGrid) -> str:
    return hashlib.sha256(grid.to_csv().encode()).hexdigest()[:16]


@dataclass
class GaRun:
    """Result of a GA run: the truncated first front plus run history."""

    front: list[ParetoSolution]
    history: list[dict] = field(default_factory=list)
    params: GaParams | None = None
    n_elements: int = 0
    grid_name: str = ""

    def report(self) -> dict:
        return {
            "grid": self.grid_name,
            "n_elements": self.n_elements,
            "params": asdict(self.params) if self.params else None,
            "history": self.history,
            "front": [s.as_dict() for s in self.front],
            "selected": select_final(self.front).as_dict() if self.front else None,
        }


def _truncate_front(F: np.ndarray, genomes: np.ndarray, keep: int) -> np.ndarray:
    """Indices of at most ``keep`` members, preferring large crowding distance."""
    crowd = crowding_distance(F)
    lex_rank = np.empty(len(genomes), dtype=np.int64)
    lex_rank[_lex_order(genomes)] = np.arange(len(genomes))
    order = np.lexsort((lex_rank, F[:, 0], -crowd))
    return order[:keep]


def _save_checkpoint(path: Path, gen: int, pop, rng, history, params, n, grid) -> None:
    state = {
        "generation": gen,
        "population": pop.tolist(),
        "rng_state": rng.bit_generator.state,
        "history": history,
        "params": asdict(params),
        "n_elements": n,
        "grid": grid.name,
        "grid_fingerprint": grid_fingerprint(grid),
    }
    atomic_write_text(path, json.dumps(state, sort_keys=True))


def ga_multiobjective(
    grid: PositionGrid,
    n_elements: int,
    params: GaParams = GaParams(),
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
    checkpoint: str | Path | None = None,
    checkpoint_every: int = 10,
    resume: bool = False,
    on_generation: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> GaRun:
    """Elitist non-dominated-sorting GA over sets of slot indices.

    Each generation: binary tournament on (rank, crowding), uniform crossover
    with duplicate repair for a ``crossover_fraction`` of parent pairs,
    per-gene uniform mutation to unused slots, then survivor selection from
    parents and children together. Returns the final first front truncated
    to ``ceil(pareto_fraction * population)`` by crowding distance.
    """
    m = len(grid)
    if n_elements > m:
        raise ValueError(f"cannot place {n_elements} elements on {m} slots")
    ev = LayoutEvaluator(grid, wavelength, cell_size)
    rate = params.resolved_mutation(n_elements)
    rng = np.random.default_rng(params.seed)
    history: list[dict] = []
    start = 0
    ckpt = Path(checkpoint) if checkpoint else None

    if resume and ckpt is not None and ckpt.exists():
        state = json.loads(ckpt.read_text())
        if state["grid_fingerprint"] != grid_fingerprint(grid) or state["n_elements"] != n_elements:
            raise OptimizationError("checkpoint was written for a different grid or element count")
        if GaParams(**state["params"]) != params:
            raise OptimizationError("checkpoint parameters differ from the requested run")
        pop = np.array(state["population"], dtype=np.int64)
        rng.bit_generator.state = state["rng_state"]
        history = state["history"]
        start = state["generation"]
    else:
        pop = _initial_population(ev, n_elements, params, rng)

    F = ev.evaluate(pop)
    P = params.population
    for gen in range(start, params.generations):
        rank, crowd = _rank_population(F, pop)
        parents = _tournament(rank, crowd, P, rng)
        children = np.empty_like(pop)
        for k in range(0, P, 2):
            a, b = pop[parents[k]], pop[parents[k + 1]]
            if rng.random() < params.crossover_fraction:
                a, b = _crossover(a, b, m, rng)
            children[k] = np.sort(_mutate(a, m, rate, rng))
            children[k + 1] = np.sort(_mutate(b, m, rate, rng))
        Fc = ev.evaluate(children)
        allg = np.vstack([pop, children])
        allF = np.vstack([F, Fc])
        keep = _survivor_order(allF, allg)[:P]
        pop, F = allg[keep], allF[keep]
        feas = np.isfinite(F).all(axis=1)
        u = -F[feas, 0]
        history.append(
            {
                "generation": gen + 1,
                "best_unique": int(u.max()) if u.size else None,
                "mean_unique": float(u.mean()) if u.size else None,
            }
        )
        if on_generation is not None:
            on_generation(gen + 1, pop, F)
        if ckpt is not None and ((gen + 1) % checkpoint_every == 0 or gen + 1 == params.generations):
            _save_checkpoint(ckpt, gen + 1, pop, rng, history, params, n_elements, grid)

    feas = np.nonzero(np.isfinite(F).all(axis=1))[0]
    if feas.size == 0:
        raise OptimizationError("final population has no feasible layout")
    g, first = np.unique(pop[feas], axis=0, return_index=True)
    Ff = F[feas][first]
    front_idx = nondominated_fronts(Ff)[0]
    keep_n = math.ceil(params.pareto_fraction * P)
    chosen = front_idx[_truncate_front(Ff[front_idx], g[front_idx], keep_n)]
    front = [
        ParetoSolution(ArrayLayout(grid.name, tuple(int(i) + 1 for i in g[c])), ObjectiveVector(*map(float, Ff[c])))
        for c in chosen
    ]
    front.sort(key=_final_key)
    return GaRun(front, history, params, n_elements, grid.name)


def _final_key(sol: ParetoSolution):
    o = sol.objectives
    return (o.neg_unique, o.worst_res, o.neg_worst_fov, sol.layout.indices)


def select_final(front: list[ParetoSolution]) -> ParetoSolution:
    """Most unique samples; ties to finer resolution, wider FOV, then index order."""
    if not front:
        raise ValueError("empty front")
    return min(front, key=_final_key)


def exhaustive_front(
    grid: PositionGrid,
    n_elements: int,
    wavelength: float | None = None,
    cell_size: float = DEFAULT_CELL,
) -> list[ParetoSolution]:
    """True Pareto front by enumerating every layout; small grids only."""
    from itertools import combinations

    combos = list(combinations(range(1, len(grid) + 1), n_elements))
    sols = [
        ParetoSolution(ArrayLayout(grid.name, c), evaluate_objectives(ArrayLayout(grid.name, c), grid, wavelength, cell_size))
        for c in combos
    ]
    sols = [s for s in sols if s.objectives.feasible]
    front = [s for s in sols if not any(o.objectives.dominates(s.objectives) for o in sols)]
    front.sort(key=_final_key)
    return front


def run_report_json(run: GaRun) -> str:
    return dumps(run.report())
