"""``forcetune`` command line.

Exit codes: 0 success, 2 invalid config or input files, 3 runtime fault.
Set ``FORCETUNE_LOG`` (DEBUG, INFO, WARNING, ...) to choose log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .bo import run_continuous_bo, window_objective
from .config import ConfigError, ExperimentConfig, load
from .controller import ControllerGains
from .io import ArtifactError, load_run, write_run
from .report import (
    MixedObjectivesError,
    before_after_rows,
    convergence_svg,
    format_before_after,
    format_improvement,
    improvement_rows,
)
from .sim import simulate
from .transfer import TaskDataset, merge_tasks, run_tl_bo

log = logging.getLogger("forcetune")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    pass


def _map(fn, jobs: list, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _require_mode(cfg: ExperimentConfig, allowed: tuple[str, ...], command: str) -> None:
    if cfg.mode not in allowed:
        raise ConfigError(f"mode: {cfg.mode!r} cannot be used with '{command}' (expected {' or '.join(allowed)})")


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_json(), encoding="utf-8")


def _jobs(cfg: ExperimentConfig) -> list[tuple[float, int, int]]:
    return [(ref, i, seed) for ref in cfg.ref_forces_n for i, seed in enumerate(cfg.seeds)]


def _tune_one(cfg: ExperimentConfig, job):
    ref, _, seed = job
    return run_continuous_bo(cfg.setup, ref, cfg.space, seed, cfg.settings, cfg.initial_gains)


def _tl_one(cfg: ExperimentConfig, sources: list[TaskDataset], job):
    ref, _, seed = job
    return run_tl_bo(sources, ref, cfg.setup, cfg.task_space, seed, cfg.settings, cfg.initial_gains)


def _announce(stem: str, run) -> None:
    gains = ", ".join(f"{k}={v:.6g}" for k, v in zip(("kp", "ki", "kd", "kdd"), run.best_input))
    unit = " (normalized)" if run.normalized else " N"
    print(f"{stem}: best gains {gains}; best objective {run.best_objective:.6g}{unit}; RMSE {run.best_rmse_n:.6g} N")


def cmd_tune(args) -> int:
    cfg = load(args.config, args.seed)
    _require_mode(cfg, ("single",), "tune")
    out = Path(args.out)
    _write_config(cfg, out)
    jobs = _jobs(cfg)
    runs = _map(partial(_tune_one, cfg), jobs, cfg.workers)
    for (ref, i, _), run in zip(jobs, runs):
        stem = f"tune_ref{ref:g}N_run{i}"
        write_run(out, stem, run, cfg.sha256, engine_version=__version__)
        _announce(stem, run)
    return EXIT_OK


def _load_sources(paths: list[str], cfg: ExperimentConfig) -> tuple[list[TaskDataset], list[dict]]:
    sources, provenance = [], []
    for p in paths:
        loaded = load_run(p)
        ds = TaskDataset.from_run(loaded.run, label=loaded.name)
        sources.append(ds)
        provenance.append(
            {
                "file": loaded.path.name,
                "label": ds.label,
                "ref_force_n": sorted(ds.ref_forces),
                "n_observations": len(ds.observations),
            }
        )
    try:
        merge_tasks(sources, cfg.task_space)
    except ValueError as exc:
        raise ArtifactError(str(exc)) from None
    return sources, provenance


def cmd_tl_tune(args) -> int:
    cfg = load(args.config, args.seed)
    _require_mode(cfg, ("tl", "compare"), "tl-tune")
    for ref in cfg.ref_forces_n:
        if not cfg.task_space.force_in_bounds(ref):
            raise ConfigError(f"ref_force_n: {ref} outside force_bounds_n {cfg.task_space.force_bounds_n}")
    sources, provenance = _load_sources(args.sources or [], cfg)
    out = Path(args.out)
    _write_config(cfg, out)
    jobs = _jobs(cfg)
    runs = _map(partial(_tl_one, cfg, sources), jobs, cfg.workers)
    named = []
    for (ref, i, _), run in zip(jobs, runs):
        stem = f"tl_ref{ref:g}N_run{i}"
        write_run(out, stem, run, cfg.sha256, provenance, __version__)
        _announce(stem, run)
        named.append((stem, run))
    if cfg.mode == "compare":
        baselines = _map(partial(_tl_one, cfg, []), jobs, cfg.workers)
        named_base = []
        for (ref, i, _), run in zip(jobs, baselines):
            stem = f"notl_ref{ref:g}N_run{i}"
            write_run(out, stem, run, cfg.sha256, [], __version__)
            named_base.append((stem, run))
        table = format_improvement(improvement_rows(named, named_base))
        (out / "improvement.md").write_text(table, encoding="utf-8")
        print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = [load_run(p) for p in args.runs]
    named = [(r.name, r.run) for r in runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = "## Before and after tuning\n\n" + format_before_after(before_after_rows(named))
    (out / "convergence.svg").write_text(convergence_svg(named), encoding="utf-8")
    if args.baseline:
        base = [load_run(p) for p in args.baseline]
        named_base = [(b.name, b.run) for b in base]
        text += "\n## Change against baselines\n\n" + format_improvement(improvement_rows(named, named_base))
        (out / "convergence_baseline.svg").write_text(convergence_svg(named_base), encoding="utf-8")
    (out / "report.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load(args.config, args.seed)
    gains = args.gains if args.gains is not None else cfg.raw.get("gains")
    if gains is None:
        raise ConfigError("gains: give --gains KP KI KD KDD or a 'gains' entry in the config")
    if not cfg.space.contains(gains):
        raise ConfigError(f"gains: {list(gains)} outside the search bounds")
    g = ControllerGains.from_array(gains)
    out = Path(args.out)
    _write_config(cfg, out)
    n_win = cfg.settings.n_windows
    win_steps = cfg.setup.steps(cfg.settings.window_s)
    for ref in cfg.ref_forces_n:
        trace = simulate(cfg.setup, g, ref, cfg.settings.total_s, cfg.seeds[0])
        stem = f"simulate_ref{ref:g}N"
        rows = ["time_s,force_n,command_mm_s"]
        rows += [f"{t:.9g},{f:.9g},{u:.9g}" for t, f, u in zip(trace.time_s, trace.force_n, trace.command_mm_s)]
        (out / f"{stem}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        rmses = [
            float(f"{window_objective(trace.force_n[k * win_steps:(k + 1) * win_steps], ref, cfg.settings.settle_fraction):.9g}")
            for k in range(n_win)
        ]
        summary = {
            "reference_force_n": ref,
            "gains": dict(zip(("kp", "ki", "kd", "kdd"), map(float, gains))),
            "window_rmse_n": rmses,
            "mean_window_rmse_n": float(f"{np.mean(rmses):.9g}"),
            "config_sha256": cfg.sha256,
        }
        (out / f"{stem}.summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        print(f"{stem}: window RMSE " + ", ".join(f"{r:.6g}" for r in rmses) + " N")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forcetune", description="Continuous BO tuning of an extrusion-force controller.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    common(sub.add_parser("tune", help="single-task tuning runs"), "runs")
    tl = sub.add_parser("tl-tune", help="tuning warm-started from earlier runs")
    common(tl, "runs")
    tl.add_argument("--sources", nargs="*", default=[], help="observation CSVs of source tasks")
    rep = sub.add_parser("report", help="tables and convergence plots from run files")
    rep.add_argument("runs", nargs="+", help="observation CSVs")
    rep.add_argument("--baseline", nargs="*", default=[], help="baseline CSVs, paired with runs in order")
    rep.add_argument("--out", default="report")
    sim = sub.add_parser("simulate", help="force trace of one fixed controller")
    common(sim, "sim")
    sim.add_argument("--gains", nargs=4, type=float, metavar=("KP", "KI", "KD", "KDD"))
    return p


COMMANDS = {"tune": cmd_tune, "tl-tune": cmd_tl_tune, "report": cmd_report, "simulate": cmd_simulate}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FORCETUNE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ArtifactError, MixedObjectivesError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # any fault while running is reported, not raised
        log.debug("runtime fault", exc_info=True)
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
