"""Run artifacts on disk.

A run ``<stem>`` is stored as three files:

* ``<stem>.csv``: one row per window, columns
  ``window,kp,ki,kd,kdd,ref_force_n,objective,best_so_far``, numbers to 9
  significant digits;
* ``<stem>.summary.json``: best gains and objective, iterations to
  convergence, whether objectives are normalized, config hash, provenance;
* ``<stem>.meta.json``: wall-clock timestamp and engine version.

The first two are byte-deterministic for a given config and seed; anything
time-dependent goes in the meta file.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .bo import Observation, TuningRun, iterations_to_convergence
from .controller import GAIN_NAMES

CSV_COLUMNS = ("window", *GAIN_NAMES, "ref_force_n", "objective", "best_so_far")


class ArtifactError(ValueError):
    """A run or dataset file is missing or malformed."""


def _g(x: float) -> str:
    return f"{x:.9g}"


def observations_csv(run: TuningRun) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for o, best in zip(run.observations, run.best_so_far()):
        ref = o.ref_force_n if o.ref_force_n is not None else run.reference_force_n
        w.writerow([o.window, *map(_g, o.gains), _g(ref), _g(o.objective), _g(best)])
    return buf.getvalue()


def parse_observations(text: str, source: str = "<csv>") -> list[Observation]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ArtifactError(f"{source}: header must be {','.join(CSV_COLUMNS)}")
    obs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ArtifactError(f"{source}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        try:
            window = int(row[0])
            gains = tuple(float(v) for v in row[1:5])
            ref, objective = float(row[5]), float(row[6])
            obs.append(Observation(window, gains, objective, ref))
        except ValueError as exc:
            raise ArtifactError(f"{source}:{lineno}: {exc}") from None
    return obs


def summary_dict(run: TuningRun, config_sha256: str, provenance: list[dict] | None = None) -> dict:
    out = {
        "reference_force_n": run.reference_force_n,
        "seed": run.seed,
        "normalized": run.normalized,
        "n_observations": len(run.observations),
        "best_window": run.observations[run.best_index].window,
        "best_gains": dict(zip(GAIN_NAMES, run.best_input)),
        "best_objective": run.best_objective,
        "best_rmse_n": run.best_rmse_n,
        "iterations_to_convergence": iterations_to_convergence(run),
        "config_sha256": config_sha256,
        "flags": list(run.flags),
    }
    if provenance is not None:
        out["provenance"] = {"source_tasks": provenance}
    return out


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_run(
    out_dir: Path,
    stem: str,
    run: TuningRun,
    config_sha256: str,
    provenance: list[dict] | None = None,
    engine_version: str = "",
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(observations_csv(run), encoding="utf-8")
    (out_dir / f"{stem}.summary.json").write_text(
        _dump(summary_dict(run, config_sha256, provenance)), encoding="utf-8"
    )
    meta = {
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "engine_version": engine_version,
        "config_sha256": config_sha256,
    }
    (out_dir / f"{stem}.meta.json").write_text(_dump(meta), encoding="utf-8")
    return csv_path


def summary_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name.removesuffix(".csv") + ".summary.json")


@dataclass
class LoadedRun:
    path: Path
    run: TuningRun
    summary: dict

    @property
    def name(self) -> str:
        return self.path.name.removesuffix(".csv")


def load_run(csv_path: str | Path) -> LoadedRun:
    """Read a run CSV and its sibling summary.

    The summary is required: only it records whether the objectives are
    normalized, and guessing would silently rescale source data.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ArtifactError(f"{csv_path}: file not found")
    obs = parse_observations(csv_path.read_text(encoding="utf-8"), str(csv_path))
    if not obs:
        raise ArtifactError(f"{csv_path}: no observations")
    sp = summary_path(csv_path)
    if not sp.is_file():
        raise ArtifactError(f"{sp}: summary not found (it records whether objectives are normalized)")
    try:
        summary = json.loads(sp.read_text(encoding="utf-8"))
        normalized = summary["normalized"]
        ref = float(summary["reference_force_n"])
        seed = int(summary.get("seed", 0))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{sp}: malformed summary ({exc})") from None
    if not isinstance(normalized, bool):
        raise ArtifactError(f"{sp}: 'normalized' must be true or false")
    run = TuningRun(obs, ref, seed, normalized)
    return LoadedRun(csv_path, run, summary)
