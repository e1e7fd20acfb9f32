"""``aimarray`` command-line interface.

Exit codes: 0 success, 2 bad input, 3 the run itself could not be completed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (
    DEFAULT_CELL,
    DEFAULT_FREQ_GHZ,
    DEFAULT_MAX_EXTENT_MM,
    DEFAULT_MIN_SPACING_MM,
    DEFAULT_N_ELEMENTS,
    GridError,
    LayoutError,
    aperture_figures,
    load_grid,
    load_layout,
    sampling_function,
    wavelength_mm,
)
from .imaging import (
    DEFAULT_RASTER,
    RasterError,
    SceneSpec,
    generate_random_scene,
    psf,
    simulate_reconstruction,
    write_pgm,
    write_sidecar,
)
from .io import atomic_write_text, dumps, write_json
from .metrics import (
    MetricError,
    SllProfile,
    avg_sll,
    clamp_fov,
    count_unique,
    crop_to_fov,
    peak_sll,
    sll_profile,
    ssim,
)
from .optimize import (
    GaParams,
    OptimizationError,
    ga_multiobjective,
    random_search,
    run_report_json,
    select_final,
)
from .signalsim import (
    CalibrationError,
    ChannelModel,
    EmitterScene,
    calibrate_point_source,
    estimate_image,
    simulate_visibility,
)

log = logging.getLogger("aimarray")

EXIT_INPUT = 2
EXIT_RUNTIME = 3
LOW_SNAPSHOTS = 100


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    freq_ghz: float = DEFAULT_FREQ_GHZ
    cell_size: float = DEFAULT_CELL
    raster: int = DEFAULT_RASTER
    seed: int = 0
    out_dir: Path = Path(".")

    def __post_init__(self):
        if not self.freq_ghz > 0:
            raise InputError(f"--freq-ghz must be positive, got {self.freq_ghz}")
        if not self.cell_size > 0:
            raise InputError(f"--cell must be positive, got {self.cell_size}")
        r = self.raster
        if r < 32 or r & (r - 1):
            raise InputError(f"--raster must be a power of two >= 32, got {r}")

    @property
    def wavelength(self) -> float:
        return wavelength_mm(self.freq_ghz)

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        return cls(
            freq_ghz=args.freq_ghz,
            cell_size=args.cell,
            raster=args.raster,
            seed=args.seed,
            out_dir=Path(args.out_dir),
        )


def _grid(args):
    return load_grid(args.grid, min_spacing=args.min_spacing, max_extent=args.max_extent)


def _layout(source, grid, n=None):
    layout = load_layout(source)
    layout.check(grid, n)
    if layout.grid_name != grid.name:
        log.info("layout was made for grid %r, evaluating on %r", layout.grid_name, grid.name)
    return layout


def _label(source: str, taken: dict) -> str:
    base = Path(source).stem
    taken[base] = taken.get(base, 0) + 1
    return base if taken[base] == 1 else f"{base}#{taken[base]}"


def cmd_grid_validate(args) -> int:
    grid = _grid(args)
    w, h = grid.extents
    print(f"{len(grid)} slots, {w:g}×{h:g} mm, min {grid.min_pair_distance():.1f} mm, OK")
    return 0


def _sidelobes(p) -> tuple[dict, SllProfile | None]:
    """avg SLL and PSL, or nulls with the reason when the PSF has no sidelobes."""
    try:
        prof = sll_profile(p)
    except MetricError as exc:
        # e.g. a collinear layout: nothing to measure across the line
        log.warning("sidelobe metrics unavailable: %s", exc)
        return {"avg_sll_db": None, "psl_db": None, "sll_error": str(exc)}, None
    return {"avg_sll_db": avg_sll(prof), "psl_db": peak_sll(prof)}, prof


def layout_metrics(grid, layout, cfg: RunConfig) -> dict:
    s = sampling_function(layout, grid, cfg.wavelength, cfg.cell_size)
    unique, redundant = count_unique(s)
    fig = aperture_figures(layout, grid, cfg.wavelength, cfg.cell_size)
    sll, _ = _sidelobes(psf(s, cfg.raster))
    return {
        "grid": grid.name,
        "indices": list(layout.indices),
        "n_elements": layout.n,
        "unique_samples": unique,
        "redundant_samples": redundant,
        **sll,
        "aperture": fig.as_dict(),
        "raster": cfg.raster,
        "cell_size": cfg.cell_size,
        "freq_ghz": cfg.freq_ghz,
    }


def cmd_layout_eval(args) -> int:
    cfg = RunConfig.from_args(args)
    grid = _grid(args)
    report = layout_metrics(grid, _layout(args.layout, grid), cfg)
    text = dumps(report)
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(cfg.out_dir / args.out, text)
    return 0


def cmd_optimize(args) -> int:
    cfg = RunConfig.from_args(args)
    grid = _grid(args)
    out = cfg.out_dir
    if args.mode == "random":
        res = random_search(grid, args.n_elements, args.trials, cfg.seed, cfg.wavelength, cfg.cell_size)
        atomic_write_text(out / "layout.json", res.layout.to_json() + "\n")
        o = res.objectives
        write_json(
            out / "report.json",
            {
                "mode": "random",
                "grid": grid.name,
                "n_elements": args.n_elements,
                "n_trials": res.n_trials,
                "seed": res.seed,
                "selected": {
                    "indices": list(res.layout.indices),
                    "unique": o.unique,
                    "worst_res": o.worst_res,
                    "worst_fov": -o.neg_worst_fov,
                },
            },
        )
        log.info("random search: unique %d", o.unique)
        return 0

    extra = {"seed": cfg.seed}
    if args.mutation is not None:
        extra["mutation_rate"] = args.mutation
    if args.full_scale:
        params = GaParams.full_scale(**extra)
    else:
        params = GaParams(
            population=args.population,
            generations=args.generations,
            crossover_fraction=args.crossover,
            pareto_fraction=args.pareto_fraction,
            **extra,
        )
    log.info(
        "GA params: population %d, generations %d, crossover %g, pareto fraction %g",
        params.population,
        params.generations,
        params.crossover_fraction,
        params.pareto_fraction,
    )
    run = ga_multiobjective(
        grid,
        args.n_elements,
        params,
        cfg.wavelength,
        cfg.cell_size,
        checkpoint=args.checkpoint,
        resume=args.resume,
    )
    best = select_final(run.front)
    atomic_write_text(out / "layout.json", best.layout.to_json() + "\n")
    write_json(out / "front.json", [s.as_dict() for s in run.front])
    atomic_write_text(out / "report.json", run_report_json(run))
    log.info("GA: front of %d, selected unique %d", len(run.front), best.objectives.unique)
    return 0


def cmd_psf(args) -> int:
    cfg = RunConfig.from_args(args)
    grid = _grid(args)
    layout = _layout(args.layout, grid)
    s = sampling_function(layout, grid, cfg.wavelength, cfg.cell_size)
    p = psf(s, cfg.raster)
    sll, prof = _sidelobes(p)
    out = cfg.out_dir
    write_pgm(out / "psf.pgm", p.magnitude)
    write_sidecar(out / "psf.json", cfg.cell_size, cfg.raster, cfg.wavelength)
    if prof is not None:
        atomic_write_text(out / "sll.csv", prof.to_csv())
    unique, redundant = count_unique(s)
    write_json(out / "sll.json", {**sll, "unique_samples": unique, "redundant_samples": redundant})
    return 0


def cmd_scene_study(args) -> int:
    cfg = RunConfig.from_args(args)
    grid = _grid(args)
    if not args.layout:
        raise InputError("scene-study needs at least one --layout")
    if args.n_scenes < 0:
        raise InputError("--n-scenes must be >= 0")
    taken: dict = {}
    columns = []
    for src in args.layout:
        layout = _layout(src, grid)
        s = sampling_function(layout, grid, cfg.wavelength, cfg.cell_size)
        fig = aperture_figures(layout, grid, cfg.wavelength, cfg.cell_size)
        columns.append((_label(src, taken), psf(s, cfg.raster), fig))
    spec = SceneSpec(raster=cfg.raster, cell_size=cfg.cell_size)
    rows = []
    for k in range(args.n_scenes):
        scene = generate_random_scene(cfg.seed + k, spec).normalized()
        vals = []
        for _, p, fig in columns:
            rec = simulate_reconstruction(scene, p)
            fov = clamp_fov(fig, scene)
            vals.append(ssim(crop_to_fov(rec, fov), crop_to_fov(scene, fov)))
        rows.append((str(cfg.seed + k), vals))
    lines = ["scene," + ",".join(c[0] for c in columns)]
    lines += [name + "," + ",".join(f"{v:.6f}" for v in vals) for name, vals in rows]
    if rows:
        means = np.mean([v for _, v in rows], axis=0)
        lines.append("mean," + ",".join(f"{v:.6f}" for v in means))
    atomic_write_text(cfg.out_dir / "ssim.csv", "\n".join(lines) + "\n")
    return 0


def _load_scene(source: str | None) -> EmitterScene:
    if source is None:
        return EmitterScene.point()
    try:
        obj = json.loads(Path(source).read_text())
        return EmitterScene(tuple((p["alpha"], p["beta"], p["intensity"]) for p in obj["points"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid scene file {source}: {exc}") from None


def cmd_signalsim(args) -> int:
    cfg = RunConfig.from_args(args)
    grid = _grid(args)
    layout = _layout(args.layout, grid)
    scene = _load_scene(args.scene)
    if args.channel:
        try:
            channel = ChannelModel.from_json(Path(args.channel).read_text())
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        channel = ChannelModel.unit(layout.n)
    if channel.n != layout.n:
        raise InputError(f"channel file has {channel.n} gains for a {layout.n}-element layout")
    if args.snapshots < 1:
        raise InputError("--snapshots must be >= 1")
    if args.snapshots < LOW_SNAPSHOTS:
        log.warning("only %d snapshots: estimates will have high variance", args.snapshots)
    lam = cfg.wavelength
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    est = simulate_visibility(scene, layout, grid, lam, channel, args.snapshots, int(seeds[0]))
    summary: dict = {"snapshots": args.snapshots, "seed": cfg.seed, "calibrated": bool(args.calibrate)}
    if args.calibrate:
        probe = simulate_visibility(EmitterScene.point(), layout, grid, lam, channel, args.snapshots, int(seeds[1]))
        cal = calibrate_point_source(probe, layout, grid, lam)
        est = cal.apply(est)
        summary["calibration"] = {
            "weights": [{"amp": float(abs(w)), "phase_rad": float(np.angle(w))} for w in cal.weights],
            "source_power": cal.source_power,
            "max_phase_residual_rad": cal.max_phase_residual,
        }
    img = estimate_image(est, layout, grid, cfg.raster, lam, cfg.cell_size)
    out = cfg.out_dir
    atomic_write_text(out / "visibility.csv", est.to_csv())
    write_pgm(out / "image.pgm", img.pixels)
    write_sidecar(out / "image.json", cfg.cell_size, cfg.raster, lam)
    r, c = np.unravel_index(int(np.argmax(img.pixels)), img.shape)
    summary["peak"] = {
        "value": float(img.pixels[r, c]),
        "row": int(r),
        "col": int(c),
        "alpha": float(img.alpha_axis[c]),
        "beta": float(img.beta_axis[r]),
    }
    write_json(out / "summary.json", summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grid", default="lattice48", help="grid CSV path or shipped grid name")
    common.add_argument("--min-spacing", type=float, default=DEFAULT_MIN_SPACING_MM, help="mm")
    common.add_argument("--max-extent", type=float, default=DEFAULT_MAX_EXTENT_MM, help="mm")
    common.add_argument("--freq-ghz", type=float, default=DEFAULT_FREQ_GHZ)
    common.add_argument("--cell", type=float, default=DEFAULT_CELL, help="UV cell size in wavelengths")
    common.add_argument("--raster", type=int, default=DEFAULT_RASTER)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aimarray", description="Sparse receive-array layout design for AIM imaging.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid-validate", parents=[common], help="check a grid file")
    g.add_argument("path", nargs="?", help="grid CSV (overrides --grid)")
    g.set_defaults(func=cmd_grid_validate)

    e = sub.add_parser("layout-eval", parents=[common], help="metrics of one layout as JSON")
    e.add_argument("--layout", required=True)
    e.add_argument("--out", help="also write the report to this file in --out-dir")
    e.set_defaults(func=cmd_layout_eval)

    o = sub.add_parser("optimize", parents=[common], help="random search or GA")
    o.add_argument("mode", choices=("random", "ga"))
    o.add_argument("--n-elements", type=int, default=DEFAULT_N_ELEMENTS)
    o.add_argument("--trials", type=int, default=100_000, help="random search draws")
    o.add_argument("--population", type=int, default=GaParams.population)
    o.add_argument("--generations", type=int, default=GaParams.generations)
    o.add_argument("--crossover", type=float, default=GaParams.crossover_fraction)
    o.add_argument("--pareto-fraction", type=float, default=GaParams.pareto_fraction)
    o.add_argument("--mutation", type=float, default=None, help="per-gene rate (default 2/n)")
    o.add_argument("--full-scale", action="store_true", help="population 500, 200 generations")
    o.add_argument("--checkpoint", help="GA checkpoint file")
    o.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("psf", parents=[common], help="PSF image and sidelobe profile")
    s.add_argument("--layout", required=True)
    s.set_defaults(func=cmd_psf)

    c = sub.add_parser("scene-study", parents=[common], help="SSIM of reconstructions on random scenes")
    c.add_argument("--layout", action="append", default=[], help="repeat for each layout")
    c.add_argument("--n-scenes", type=int, default=20)
    c.set_defaults(func=cmd_scene_study)

    m = sub.add_parser("signalsim", parents=[common], help="Monte-Carlo visibilities and dirty image")
    m.add_argument("--layout", required=True)
    m.add_argument("--scene", help="emitter JSON {points: [{alpha, beta, intensity}]}; default boresight point")
    m.add_argument("--snapshots", type=int, default=10_000)
    m.add_argument("--channel", help="channel JSON {gains: [{amp, phase_rad}], noise_power}")
    m.add_argument("--calibrate", action="store_true", help="calibrate on a boresight point source first")
    m.set_defaults(func=cmd_signalsim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "grid-validate" and args.path:
        args.grid = args.path
    try:
        return args.func(args)
    except (OptimizationError, CalibrationError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (GridError, LayoutError, RasterError, InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
