"""Closed-loop deployment of a controller on the simulated plant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import (
    ControllerConfig,
    ControllerGains,
    ControllerState,
    control_step,
)
from .plant import (
    CornerDipConfig,
    DisturbanceSchedule,
    Plant,
    PlantParams,
    parse_toolpath,
    schedule_from_toolpath,
    square_toolpath,
)


@dataclass(frozen=True)
class ForceTrace:
    time_s: np.ndarray
    force_n: np.ndarray
    command_mm_s: np.ndarray

    def __len__(self):
        return len(self.force_n)


@dataclass(frozen=True)
class ProcessSetup:
    """Everything about the simulated print that is fixed during tuning."""

    plant: PlantParams = PlantParams()
    schedule: DisturbanceSchedule | None = None
    controller: ControllerConfig = ControllerConfig()

    def __post_init__(self):
        if self.schedule is None:
            tp = parse_toolpath(square_toolpath())
            object.__setattr__(self, "schedule", schedule_from_toolpath(tp))

    @classmethod
    def from_toolpath_text(
        cls,
        text: str,
        plant: PlantParams = PlantParams(),
        dips: CornerDipConfig = CornerDipConfig(),
        controller: ControllerConfig = ControllerConfig(),
    ) -> ProcessSetup:
        return cls(plant, schedule_from_toolpath(parse_toolpath(text), dips), controller)

    def feedforward(self, ref_force_n: float) -> float:
        return self.controller.feedforward(self.plant, ref_force_n)

    def new_plant(self, ref_force_n: float, seed=None) -> Plant:
        """Plant already extruding at the feedforward operating point."""
        return Plant(self.plant, self.schedule, seed, self.feedforward(ref_force_n))

    def steps(self, duration_s: float) -> int:
        return int(round(duration_s / self.plant.sample_period_s))


def deploy(
    plant: Plant,
    gains: ControllerGains,
    ref_force_n: float,
    n_steps: int,
    config: ControllerConfig,
    u_ff: float,
) -> ForceTrace:
    """Run ``gains`` from a reset controller for ``n_steps`` samples.

    The plant is advanced in place; its state carries over to the next call.
    """
    ts = plant.params.sample_period_s
    t = np.empty(n_steps)
    f = np.empty(n_steps)
    u_log = np.empty(n_steps)
    state = ControllerState()
    measured = plant.last_measured
    for i in range(n_steps):
        state, u = control_step(state, gains, ref_force_n - measured, ts, config, u_ff)
        measured = plant.step(u)
        t[i] = plant.time_s
        f[i] = measured
        u_log[i] = u
    return ForceTrace(t, f, u_log)


def simulate(
    setup: ProcessSetup,
    gains: ControllerGains,
    ref_force_n: float,
    duration_s: float,
    seed=None,
) -> ForceTrace:
    """Fresh plant at the feedforward operating point, one controller throughout."""
    plant = setup.new_plant(ref_force_n, seed)
    return deploy(
        plant,
        gains,
        ref_force_n,
        setup.steps(duration_s),
        setup.controller,
        setup.feedforward(ref_force_n),
    )
