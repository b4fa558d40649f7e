"""Dual-derivative PID for extrusion-force regulation.

The output is a filament drive speed in mm/s.  Besides the usual P and I
terms there are two derivative terms, each a low-pass filtered backward
difference of the error: a fast one (small time constant) and a slow, more
damped one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GAIN_NAMES = ("kp", "ki", "kd", "kdd")
GAIN_LOWER = (0.0, 0.0, 0.0, 0.0)
GAIN_UPPER = (50.0, 50.0, 100.0, 100.0)


class ControllerFault(RuntimeError):
    pass


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    kdd: float = 0.0

    def __post_init__(self):
        for name, lo, hi in zip(GAIN_NAMES, GAIN_LOWER, GAIN_UPPER):
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise ValueError(f"{name}={v!r} outside [{lo}, {hi}]")

    @classmethod
    def from_array(cls, values) -> ControllerGains:
        kp, ki, kd, kdd = (float(v) for v in values)
        return cls(kp, ki, kd, kdd)

    def as_array(self) -> np.ndarray:
        return np.array([self.kp, self.ki, self.kd, self.kdd])


@dataclass(frozen=True)
class ControllerConfig:
    tau_fast_s: float = 0.02
    tau_slow_s: float = 0.5
    u_max_mm_s: float = 25.0
    # "steady_state" inverts the plant's equilibrium map at the reference,
    # "zero" disables feedforward, a number is used verbatim
    u_ff_mode: str | float = "steady_state"

    def __post_init__(self):
        if not (self.tau_fast_s > 0 and self.tau_slow_s > 0):
            raise ValueError("filter time constants must be > 0")
        if not self.u_max_mm_s > 0:
            raise ValueError("u_max_mm_s must be > 0")
        if isinstance(self.u_ff_mode, str):
            if self.u_ff_mode not in ("steady_state", "zero"):
                raise ValueError(f"unknown u_ff_mode {self.u_ff_mode!r}")
        elif not self.u_ff_mode >= 0:
            raise ValueError("numeric u_ff_mode must be >= 0")

    def feedforward(self, plant_params, ref_force_n: float) -> float:
        if self.u_ff_mode == "zero":
            return 0.0
        if self.u_ff_mode == "steady_state":
            u = plant_params.drive_for_force(ref_force_n)
        else:
            u = float(self.u_ff_mode)
        return min(max(u, 0.0), self.u_max_mm_s)


@dataclass(frozen=True)
class ControllerState:
    integrator: float = 0.0
    deriv_fast: float = 0.0
    deriv_slow: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False


def reset(state: ControllerState | None = None) -> ControllerState:
    return ControllerState()


def control_step(
    state: ControllerState,
    gains: ControllerGains,
    error_n: float,
    ts_s: float,
    config: ControllerConfig,
    u_ff: float = 0.0,
) -> tuple[ControllerState, float]:
    """One controller update; returns the new state and the clamped drive speed."""
    if not ts_s > 0:
        raise ValueError("ts_s must be > 0")
    if not math.isfinite(error_n):
        raise ControllerFault(f"non-finite error {error_n!r}")

    u_max = config.u_max_mm_s
    prev = state.prev_error if state.initialized else error_n

    integrator = state.integrator + error_n * ts_s
    if gains.ki > 0:
        lim = u_max / gains.ki
        integrator = min(max(integrator, -lim), lim)

    raw = (error_n - prev) / ts_s
    a_fast = ts_s / (config.tau_fast_s + ts_s)
    a_slow = ts_s / (config.tau_slow_s + ts_s)
    deriv_fast = (1 - a_fast) * state.deriv_fast + a_fast * raw
    deriv_slow = (1 - a_slow) * state.deriv_slow + a_slow * raw

    u = (
        u_ff
        + gains.kp * error_n
        + gains.ki * integrator
        + gains.kd * deriv_fast
        + gains.kdd * deriv_slow
    )
    if not math.isfinite(u):
        raise ControllerFault("non-finite controller output")
    u = min(max(u, 0.0), u_max)
    return (
        ControllerState(integrator, deriv_fast, deriv_slow, error_n, True),
        u,
    )
