"""Transfer learning across reference forces.

Each reference force is a task.  The GP input is the gain vector extended by
the task's reference force, and objectives are RMSE divided by that force so
tasks share a scale.  Data from earlier tasks enter the GP as ordinary
observations; the acquisition then searches the gain slice at the target
force.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bo import (
    BOSettings,
    Observation,
    SearchSpace,
    TuningRun,
    _tuning_loop,
    iterations_to_convergence,
    quantize,
    run_continuous_bo,
)
from .sim import ProcessSetup

log = logging.getLogger(__name__)


def normalize_objective(rmse_n: float, ref_force_n: float) -> float:
    if not ref_force_n > 0:
        raise ValueError("reference force must be > 0")
    return rmse_n / ref_force_n


@dataclass
class TaskDataset:
    """Observations of one source task, objectives already normalized."""

    observations: list[Observation]
    label: str = ""

    def __post_init__(self):
        for o in self.observations:
            if o.ref_force_n is None or not o.ref_force_n > 0:
                raise ValueError(f"{self.label or 'dataset'}: every observation needs a positive reference force")

    @classmethod
    def from_run(cls, run: TuningRun, label: str = "") -> TaskDataset:
        obs = run.observations
        if not run.normalized:
            obs = [
                Observation(
                    o.window,
                    o.gains,
                    quantize(normalize_objective(o.objective, o.ref_force_n or run.reference_force_n)),
                    o.ref_force_n or run.reference_force_n,
                )
                for o in obs
            ]
        return cls(list(obs), label or f"{run.reference_force_n:g} N")

    @property
    def ref_forces(self) -> set[float]:
        return {o.ref_force_n for o in self.observations}


@dataclass(frozen=True)
class AugmentedSpace:
    gains: SearchSpace = SearchSpace()
    force_bounds_n: tuple[float, float] = (0.05, 0.5)

    def __post_init__(self):
        lo, hi = self.force_bounds_n
        if not 0 < lo < hi:
            raise ValueError("force bounds must satisfy 0 < lower < upper")

    @property
    def dim(self) -> int:
        return self.gains.dim + 1

    def force_in_bounds(self, f: float) -> bool:
        lo, hi = self.force_bounds_n
        return lo <= f <= hi

    def unit_force(self, f: float) -> float:
        lo, hi = self.force_bounds_n
        return (f - lo) / (hi - lo)

    def to_unit(self, gains, force_n: float) -> np.ndarray:
        return np.append(self.gains.to_unit(gains), self.unit_force(force_n))

    def from_unit(self, u) -> tuple[np.ndarray, float]:
        u = np.asarray(u, dtype=float)
        lo, hi = self.force_bounds_n
        return self.gains.from_unit(u[:-1]), lo + float(u[-1]) * (hi - lo)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.targets)


def merge_tasks(datasets: list[TaskDataset], space: AugmentedSpace = AugmentedSpace()) -> Dataset:
    """Stack source tasks into one unit-cube dataset over (gains, reference force)."""
    rows, ys, labels = [], [], []
    for ds in datasets:
        bad = sorted(f for f in ds.ref_forces if not space.force_in_bounds(f))
        if bad:
            raise ValueError(
                f"source {ds.label!r}: reference force(s) {bad} outside {space.force_bounds_n}"
            )
        for o in ds.observations:
            if not space.gains.contains(o.gains):
                raise ValueError(f"source {ds.label!r}: window {o.window} gains outside the search space")
            rows.append(space.to_unit(o.gains, o.ref_force_n))
            ys.append(o.objective)
            labels.append(ds.label)
    inputs = np.array(rows) if rows else np.zeros((0, space.dim))
    return Dataset(inputs, np.array(ys, dtype=float), labels)


def run_tl_bo(
    sources: list[TaskDataset],
    target_ref_force_n: float,
    setup: ProcessSetup,
    space: AugmentedSpace = AugmentedSpace(),
    seed: int = 0,
    settings: BOSettings = BOSettings(),
    initial_gains=None,
) -> TuningRun:
    """Continuous BO on a new reference force, warm-started from source tasks.

    Objectives are recorded normalized.  Without source data this is exactly
    single-task BO on the normalized objective: a constant task coordinate
    carries no information, so the GP stays four-dimensional.
    """
    if not space.force_in_bounds(target_ref_force_n):
        raise ValueError(f"target force {target_ref_force_n} outside {space.force_bounds_n}")
    if not any(ds.observations for ds in sources):
        run = run_continuous_bo(
            setup,
            target_ref_force_n,
            space.gains,
            seed,
            settings,
            initial_gains,
            normalize_objective=True,
        )
    else:
        merged = merge_tasks(sources, space)
        run = _tuning_loop(
            setup,
            target_ref_force_n,
            space.gains,
            seed,
            settings,
            initial_gains,
            merged.inputs,
            merged.targets,
            tail=(space.unit_force(target_ref_force_n),),
            normalized=True,
        )
    run.sources = [ds.label for ds in sources]
    return run


class Improvement(NamedTuple):
    rmse_change_percent: float
    iterations_change_percent: float


def percent_change(before: float, after: float) -> float:
    if before == 0:
        raise ZeroDivisionError("percent change undefined for a zero baseline")
    return (after - before) / before * 100.0


def improvement_report(baseline: TuningRun, tl: TuningRun, tolerance_fraction: float = 0.05) -> Improvement:
    """Relative change of best RMSE and iterations-to-convergence, TL vs baseline.

    Both RMSEs are compared in newtons, whatever objective each run recorded.
    An undefined change (zero baseline) is reported as NaN.
    """
    if not baseline.observations or not tl.observations:
        raise ValueError("both runs need observations")

    def safe(before, after):
        try:
            return percent_change(before, after)
        except ZeroDivisionError:
            log.warning("baseline value is zero; change undefined")
            return math.nan

    return Improvement(
        safe(baseline.best_rmse_n, tl.best_rmse_n),
        safe(
            iterations_to_convergence(baseline, tolerance_fraction),
            iterations_to_convergence(tl, tolerance_fraction),
        ),
    )
