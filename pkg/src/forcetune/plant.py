"""Simulated extrusion process.

A first-order, dead-time, shear-thinning model maps filament drive speed
(mm/s) to extrusion force (N).  Corners of the printed contour momentarily
starve the melt flow; those dips are derived from a toolpath and repeat every
lap of the contour.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class SimulationFault(RuntimeError):
    """Raised when the plant receives or produces a non-finite value."""


class ToolpathError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class PlantParams:
    time_constant_s: float = 0.15
    gain_coeff: float = 0.05          # N per (mm/s)**flow_exponent
    flow_exponent: float = 0.8
    dead_time_s: float = 0.05
    force_saturation_n: float = 1.0
    noise_std_n: float = 0.005
    sample_period_s: float = 0.01

    def __post_init__(self):
        if not self.time_constant_s > 0:
            raise ValueError("time_constant_s must be > 0")
        if not self.dead_time_s >= 0:
            raise ValueError("dead_time_s must be >= 0")
        if not self.force_saturation_n > 0:
            raise ValueError("force_saturation_n must be > 0")
        if not self.sample_period_s > 0:
            raise ValueError("sample_period_s must be > 0")
        if not 0 < self.flow_exponent <= 1:
            raise ValueError("flow_exponent must lie in (0, 1]")
        if not self.gain_coeff > 0:
            raise ValueError("gain_coeff must be > 0")
        if not self.noise_std_n >= 0:
            raise ValueError("noise_std_n must be >= 0")
        # explicit Euler stability
        if not self.sample_period_s < 2 * self.time_constant_s:
            raise ValueError("sample_period_s must be < 2 * time_constant_s")

    @property
    def delay_steps(self) -> int:
        return int(round(self.dead_time_s / self.sample_period_s))

    def steady_state_force(self, drive_mm_s: float) -> float:
        """Noiseless, undisturbed equilibrium force for a constant drive speed."""
        force = self.gain_coeff * drive_mm_s ** self.flow_exponent
        return min(force, self.force_saturation_n)

    def drive_for_force(self, force_n: float) -> float:
        """Inverse of :meth:`steady_state_force` below saturation."""
        if force_n < 0:
            raise ValueError("force must be non-negative")
        return (force_n / self.gain_coeff) ** (1.0 / self.flow_exponent)


# ---------------------------------------------------------------------------
# toolpath
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    x_mm: float
    y_mm: float
    feed_mm_s: float


@dataclass(frozen=True)
class Toolpath:
    """Linear moves starting from the machine origin ``start``."""

    segments: tuple[Segment, ...] = ()
    start: tuple[float, float] = (0.0, 0.0)

    def vertices(self) -> list[tuple[float, float]]:
        pts = [self.start]
        pts.extend((s.x_mm, s.y_mm) for s in self.segments)
        return pts

    def segment_lengths(self) -> list[float]:
        pts = self.vertices()
        return [math.dist(a, b) for a, b in zip(pts[:-1], pts[1:])]

    @property
    def length_mm(self) -> float:
        return sum(self.segment_lengths())

    @property
    def lap_time_s(self) -> float:
        return sum(
            ln / s.feed_mm_s for ln, s in zip(self.segment_lengths(), self.segments)
        )

    @property
    def is_closed(self) -> bool:
        if not self.segments:
            return False
        last = self.segments[-1]
        return math.isclose(last.x_mm, self.start[0], abs_tol=1e-9) and math.isclose(
            last.y_mm, self.start[1], abs_tol=1e-9
        )


_WORD = re.compile(r"^([A-Za-z])([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)$")


def parse_toolpath(text: str) -> Toolpath:
    """Parse the ``G1 X.. Y.. F..`` move dialect.

    Feed rates are given in mm/min and are modal; X and Y are modal too, so a
    move may omit an unchanged axis.
    """
    x, y = 0.0, 0.0
    feed: float | None = None
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0].upper() not in ("G1", "G01"):
            raise ToolpathError(f"unknown command {words[0]!r}", lineno)
        seen = set()
        for word in words[1:]:
            m = _WORD.match(word)
            if m is None:
                raise ToolpathError(f"malformed word {word!r}", lineno)
            letter, value = m.group(1).upper(), float(m.group(2))
            if letter in seen:
                raise ToolpathError(f"duplicate {letter} word", lineno)
            seen.add(letter)
            if letter == "X":
                x = value
            elif letter == "Y":
                y = value
            elif letter == "F":
                if value <= 0:
                    raise ToolpathError("feed rate must be positive", lineno)
                feed = value / 60.0
            else:
                raise ToolpathError(f"unsupported word {word!r}", lineno)
        if feed is None:
            raise ToolpathError("no feed rate set", lineno)
        if seen - {"F"}:
            segments.append(Segment(x, y, feed))
    return Toolpath(tuple(segments))


def square_toolpath(side_mm: float = 20.0, feed_mm_min: float = 6000.0) -> str:
    """Toolpath source for one closed square lap starting at the origin."""
    return (
        f"; {side_mm:g} mm square contour\n"
        f"G1 X{side_mm:g} Y0 F{feed_mm_min:g}\n"
        f"G1 X{side_mm:g} Y{side_mm:g}\n"
        f"G1 X0 Y{side_mm:g}\n"
        "G1 X0 Y0\n"
    )


# ---------------------------------------------------------------------------
# disturbances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CornerDipConfig:
    dip_magnitude: float = 0.2
    dip_duration_s: float = 0.05
    angle_threshold_deg: float = 30.0

    def __post_init__(self):
        if not 0 < self.dip_magnitude <= 1:
            raise ValueError("dip_magnitude must lie in (0, 1]")
        if not self.dip_duration_s > 0:
            raise ValueError("dip_duration_s must be > 0")
        if not 0 <= self.angle_threshold_deg < 180:
            raise ValueError("angle_threshold_deg must lie in [0, 180)")


@dataclass(frozen=True)
class DipEvent:
    time_s: float
    magnitude: float
    duration_s: float


# slack for comparing accumulated sample times against event boundaries
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Corner dips for one lap; the lap repeats every ``cycle_s`` seconds."""

    events: tuple[DipEvent, ...] = ()
    cycle_s: float = 0.0

    def __post_init__(self):
        times = [e.time_s for e in self.events]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise ValueError("events must be sorted strictly by time")
        if any(e.duration_s <= 0 for e in self.events):
            raise ValueError("dip durations must be positive")
        if self.events and not self.cycle_s > 0:
            raise ValueError("cycle_s must be positive when events exist")

    def factor(self, t: float) -> float:
        """Multiplicative flow factor d(t): 1 - magnitude while a dip is active."""
        d = 1.0
        for e in self.events:
            lag = t - e.time_s + _TIME_EPS
            if lag < 0:
                break
            if lag % self.cycle_s < e.duration_s:
                d = min(d, 1.0 - e.magnitude)
        return d


def _turn_angle_deg(a, b, c) -> float:
    v1 = (b[0] - a[0], b[1] - a[1])
    v2 = (c[0] - b[0], c[1] - b[1])
    n1, n2 = math.hypot(*v1), math.hypot(*v2)
    cos = (v1[0] * v2[0] + v1[1] * v2[1]) / (n1 * n2)
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


def schedule_from_toolpath(
    tp: Toolpath, config: CornerDipConfig = CornerDipConfig()
) -> DisturbanceSchedule:
    """One dip per vertex whose direction change exceeds the angle threshold.

    A closed contour also contributes its closing vertex, timed at the end of
    the lap.  Zero-length moves are ignored.
    """
    pts = [tp.start]
    arrival = [0.0]
    for seg in tp.segments:
        p = (seg.x_mm, seg.y_mm)
        ln = math.dist(pts[-1], p)
        if ln == 0:
            continue
        pts.append(p)
        arrival.append(arrival[-1] + ln / seg.feed_mm_s)
    cycle = arrival[-1]
    if len(pts) < 3:
        return DisturbanceSchedule((), cycle)

    corners = []
    for i in range(1, len(pts) - 1):
        if _turn_angle_deg(pts[i - 1], pts[i], pts[i + 1]) > config.angle_threshold_deg:
            corners.append(arrival[i])
    if tp.is_closed and _turn_angle_deg(pts[-2], pts[0], pts[1]) > config.angle_threshold_deg:
        corners.append(cycle)
    events = tuple(
        DipEvent(t, config.dip_magnitude, config.dip_duration_s) for t in corners
    )
    return DisturbanceSchedule(events, cycle)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@dataclass
class PlantState:
    force_n: float
    command_queue: deque
    step_index: int
    rng: np.random.Generator
    sample_period_s: float = field(repr=False, default=0.01)

    @property
    def time_s(self) -> float:
        # counted in samples so event timing does not drift
        return self.step_index * self.sample_period_s


def initial_state(
    params: PlantParams, seed=None, drive_mm_s: float = 0.0
) -> PlantState:
    """Plant at rest under a constant ``drive_mm_s`` (force at its equilibrium)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return PlantState(
        force_n=params.steady_state_force(drive_mm_s),
        command_queue=deque([float(drive_mm_s)] * params.delay_steps),
        step_index=0,
        rng=rng,
        sample_period_s=params.sample_period_s,
    )


def step(
    state: PlantState,
    drive_speed_mm_s: float,
    schedule: DisturbanceSchedule,
    params: PlantParams,
) -> tuple[PlantState, float]:
    """Advance one sample period; returns the (mutated) state and measured force."""
    if not math.isfinite(drive_speed_mm_s):
        raise SimulationFault(f"non-finite drive speed {drive_speed_mm_s!r}")
    if drive_speed_mm_s < 0:
        raise ValueError("drive speed must be non-negative")

    queue = state.command_queue
    if queue:
        queue.append(drive_speed_mm_s)
        u = queue.popleft()
    else:
        u = drive_speed_mm_s

    d = schedule.factor(state.time_s)
    f_sat = params.force_saturation_n
    target = params.gain_coeff * u ** params.flow_exponent * d
    force = state.force_n + params.sample_period_s / params.time_constant_s * (
        target - state.force_n
    )
    if not math.isfinite(force):
        raise SimulationFault("non-finite plant force")
    force = min(max(force, 0.0), f_sat)
    state.force_n = force
    state.step_index += 1

    measured = force
    if params.noise_std_n > 0:
        measured += params.noise_std_n * state.rng.standard_normal()
        measured = min(max(measured, 0.0), f_sat)
    return state, measured


class Plant:
    """Stateful convenience wrapper around :func:`step`."""

    def __init__(
        self,
        params: PlantParams,
        schedule: DisturbanceSchedule,
        seed=None,
        initial_drive_mm_s: float = 0.0,
    ):
        self.params = params
        self.schedule = schedule
        self.state = initial_state(params, seed, initial_drive_mm_s)
        self.last_measured = self.state.force_n

    @property
    def time_s(self) -> float:
        return self.state.time_s

    def step(self, drive_speed_mm_s: float) -> float:
        _, self.last_measured = step(
            self.state, drive_speed_mm_s, self.schedule, self.params
        )
        return self.last_measured
