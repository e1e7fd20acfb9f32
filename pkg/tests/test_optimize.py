import json
import math
from itertools import combinations

import numpy as np
import pytest

from aimarray.geometry import ArrayLayout, PositionGrid
from aimarray.optimize import (
    GaParams,
    LayoutEvaluator,
    ObjectiveVector,
    OptimizationError,
    ParetoSolution,
    _initial_population,
    crowding_distance,
    evaluate_objectives,
    exhaustive_front,
    ga_multiobjective,
    nondominated_fronts,
    random_search,
    run_report_json,
    select_final,
)
from conftest import toy_grid


def six_slot_grid():
    xy = np.array([[0, 0], [31, 4], [12, 47], [70, 22], [44, 61], [83, 79]], float)
    return PositionGrid(tuple(range(1, 7)), xy, name="six", min_spacing=10)


def test_objective_examples(lam):
    line = PositionGrid((1, 2, 3), np.array([[0, 0], [lam / 2, 0], [lam, 0]]), min_spacing=0)
    o = evaluate_objectives(ArrayLayout("l", (1, 2, 3)), line, lam)
    assert o.neg_unique == -5 and not o.feasible
    sq = PositionGrid((1, 2, 3, 4), np.array([[0, 0], [26, 0], [0, 26], [26, 26]]))
    o = evaluate_objectives(ArrayLayout("s", (1, 2, 3, 4)), sq, lam)
    assert o.unique == 9 and o.worst_res == pytest.approx(0.88 * lam / 26) and -o.neg_worst_fov == pytest.approx(lam / 52)


def test_evaluator_matches_scalar_path(lattice48):
    ev = LayoutEvaluator(lattice48)
    rng = np.random.default_rng(0)
    idx = np.sort(np.array([rng.choice(48, 24, replace=False) for _ in range(50)]), axis=1)
    F = ev.evaluate(idx)
    for row, f in zip(idx, F):
        o = evaluate_objectives(ArrayLayout("lattice48", tuple(row + 1)), lattice48)
        assert f[0] == o.neg_unique and f[0] >= -553
        assert f[1] == pytest.approx(o.worst_res, rel=1e-12)
        assert f[2] == pytest.approx(o.neg_worst_fov, rel=1e-12)


def test_dominance():
    a, b = ObjectiveVector(-10, 0.1, -1), ObjectiveVector(-9, 0.1, -1)
    assert a.dominates(b) and not b.dominates(a) and not a.dominates(a)


def test_nondominated_fronts_and_crowding():
    F = np.array([[0, 0], [1, 1], [0, 1], [2, 2], [1, 0]], float)
    fronts = nondominated_fronts(F)
    assert [sorted(f.tolist()) for f in fronts] == [[0], [2, 4], [1], [3]]
    d = crowding_distance(np.array([[0, 3], [1, 2], [2, 1], [3, 0]], float))
    assert np.isinf(d[[0, 3]]).all() and d[1] == pytest.approx(4 / 3)


def test_random_search_single_trial(lattice48):
    res = random_search(lattice48, 24, 1, seed=5)
    rng = np.random.default_rng(5)
    keys = rng.random((1, 48))
    first = tuple(np.sort(np.argsort(keys, axis=1, kind="stable")[0, :24]) + 1)
    assert res.layout.indices == first


def brute_best(grid, n):
    sols = [(evaluate_objectives(ArrayLayout(grid.name, c), grid), c) for c in combinations(range(1, len(grid) + 1), n)]
    key = lambda t: (~np.isfinite(t[0].worst_res), t[0].neg_unique, t[0].worst_res if t[0].feasible else math.inf, t[1])
    return min(sols, key=key)


def test_random_search_matches_exhaustive():
    g = six_slot_grid()
    res = random_search(g, 3, 10_000, seed=1)
    o, c = brute_best(g, 3)
    assert res.layout.indices == c and res.objectives == o


def test_random_search_errors(lattice48):
    with pytest.raises(ValueError):
        random_search(lattice48, 49, 10, 0)
    with pytest.raises(ValueError):
        random_search(lattice48, 24, 0, 0)


def test_ga_params_validation():
    with pytest.raises(ValueError):
        GaParams(population=5)
    with pytest.raises(ValueError):
        GaParams(crossover_fraction=1.5)
    p = GaParams.full_scale(seed=3)
    assert (p.population, p.generations, p.crossover_fraction, p.pareto_fraction) == (500, 200, 0.8, 0.6)
    assert GaParams().resolved_mutation(24) == pytest.approx(2 / 24)


def front_set(front):
    return {s.layout.indices for s in front}


def test_ga_six_slot_front_is_exhaustive():
    g = six_slot_grid()
    run = ga_multiobjective(g, 3, GaParams(population=40, generations=30, seed=0))
    assert front_set(run.front) == front_set(exhaustive_front(g, 3))


def test_ga_without_evolution_returns_initial_front():
    g = six_slot_grid()
    # pareto_fraction 1 so the front is not truncated below the population size
    params = GaParams(
        population=4, generations=1, crossover_fraction=0.0, mutation_rate=0.0, pareto_fraction=1.0, seed=2
    )
    run = ga_multiobjective(g, 3, params)
    ev = LayoutEvaluator(g)
    init = np.unique(_initial_population(ev, 3, params, np.random.default_rng(2)), axis=0)
    F = ev.evaluate(init)
    ok = np.isfinite(F).all(axis=1)
    first = nondominated_fronts(F[ok])[0]
    assert front_set(run.front) == {tuple(init[ok][k] + 1) for k in first}


def test_ga_determinism_elitism_feasibility(lattice48):
    params = GaParams(population=40, generations=15, seed=4)
    seen = []
    a = ga_multiobjective(lattice48, 24, params, on_generation=lambda g, pop, F: seen.append(pop.copy()))
    b = ga_multiobjective(lattice48, 24, params)
    assert run_report_json(a) == run_report_json(b)
    best = [h["best_unique"] for h in a.history]
    assert best == sorted(best)
    for pop in seen:
        assert all(len(set(row)) == 24 and row.min() >= 0 and row.max() < 48 for row in pop)
    objs = [s.objectives for s in a.front]
    assert not any(x.dominates(y) for x in objs for y in objs)
    assert len(a.front) <= math.ceil(0.6 * 40)


def test_ga_checkpoint_resume(tmp_path, lattice48):
    params = GaParams(population=20, generations=10, seed=9)
    whole = ga_multiobjective(lattice48, 24, params)
    ckpt = tmp_path / "ga.json"

    class Stop(Exception):
        pass

    def interrupt(gen, pop, F):
        if gen == 7:
            raise Stop

    with pytest.raises(Stop):
        ga_multiobjective(lattice48, 24, params, checkpoint=ckpt, checkpoint_every=5, on_generation=interrupt)
    assert json.loads(ckpt.read_text())["generation"] == 5
    resumed = ga_multiobjective(lattice48, 24, params, checkpoint=ckpt, checkpoint_every=5, resume=True)
    assert run_report_json(resumed) == run_report_json(whole)
    with pytest.raises(OptimizationError, match="parameters"):
        ga_multiobjective(lattice48, 24, GaParams(population=20, generations=10, seed=8), checkpoint=ckpt, resume=True)


def test_ga_all_degenerate_raises():
    g = PositionGrid(tuple(range(1, 6)), np.array([[i * 30.0, 0.0] for i in range(5)]), min_spacing=26, max_extent=500)
    with pytest.raises(OptimizationError, match="axis-degenerate"):
        ga_multiobjective(g, 3, GaParams(population=4, generations=1, max_repair=5))


def test_select_final_rules():
    lay = lambda *i: ArrayLayout("g", i)
    a = ParetoSolution(lay(1, 2), ObjectiveVector(-10, 0.04, -1))
    b = ParetoSolution(lay(3, 4), ObjectiveVector(-10, 0.03, -1))
    c = ParetoSolution(lay(5, 6), ObjectiveVector(-9, 0.01, -2))
    assert select_final([a]) is a
    assert select_final([a, b, c]) is b
    with pytest.raises(ValueError):
        select_final([])


def test_select_final_on_exhaustive_front():
    g = six_slot_grid()
    front = exhaustive_front(g, 3)
    brute = min(front, key=lambda s: (-s.objectives.unique, s.objectives.worst_res, s.objectives.neg_worst_fov, s.layout.indices))
    assert select_final(front) == brute


@pytest.mark.parametrize("seed,slots,n", [(0, 7, 3), (1, 8, 4), (2, 9, 3)])
def test_ga_matches_exhaustive_on_random_toys(seed, slots, n):
    g = toy_grid(np.random.default_rng(seed), slots, box=60.0)
    C = math.comb(slots, n)
    run = ga_multiobjective(g, n, GaParams(population=2 * C + (2 * C) % 2, generations=50, seed=seed))
    assert front_set(run.front) == front_set(exhaustive_front(g, n))
