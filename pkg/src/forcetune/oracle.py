"""Vectorized noise-free controller evaluation and coarse grid search.

This re-implements the closed loop over a whole batch of gain vectors with
numpy arrays.  It serves as an independent reference for the tuning loop:
grid optima bound what the optimizer should reach, and the batch loop is
cross-checked against the scalar one in the tests.
"""

from __future__ import annotations

import itertools

import numpy as np

from .controller import GAIN_LOWER, GAIN_UPPER
from .sim import ProcessSetup


def batch_rmse(
    setup: ProcessSetup,
    gains: np.ndarray,
    ref_force_n: float,
    window_s: float = 10.0,
    settle_fraction: float = 0.1,
) -> np.ndarray:
    """Noise-free window RMSE for each row of ``gains`` (shape ``(B, 4)``).

    Every row starts from a fresh plant at the feedforward operating point
    and a reset controller, mirroring :func:`forcetune.sim.simulate`.
    """
    gains = np.atleast_2d(np.asarray(gains, dtype=float))
    kp, ki, kd, kdd = gains.T
    p = setup.plant
    c = setup.controller
    ts = p.sample_period_s
    n = setup.steps(window_s)
    delay = p.delay_steps
    u_ff = setup.feedforward(ref_force_n)
    u_max = c.u_max_mm_s
    a_f = ts / (c.tau_fast_s + ts)
    a_s = ts / (c.tau_slow_s + ts)
    with np.errstate(divide="ignore"):
        i_lim = np.where(ki > 0, u_max / ki, np.inf)
    dips = np.array([setup.schedule.factor(k * ts) for k in range(n)])

    b = len(gains)
    force = np.full(b, p.steady_state_force(u_ff))
    pipe = np.full((delay + 1, b), u_ff)
    integ = np.zeros(b)
    d_fast = np.zeros(b)
    d_slow = np.zeros(b)
    prev = None
    skip = int(settle_fraction * n)
    sq = np.zeros(b)
    for k in range(n):
        err = ref_force_n - force
        raw = np.zeros(b) if prev is None else (err - prev) / ts
        prev = err
        integ = np.clip(integ + err * ts, -i_lim, i_lim)
        d_fast = (1 - a_f) * d_fast + a_f * raw
        d_slow = (1 - a_s) * d_slow + a_s * raw
        u = u_ff + kp * err + ki * integ + kd * d_fast + kdd * d_slow
        u = np.clip(u, 0.0, u_max)
        pipe[k % (delay + 1)] = u
        u_del = pipe[(k + 1) % (delay + 1)] if delay else u
        drive = p.gain_coeff * u_del ** p.flow_exponent * dips[k]
        force = np.clip(force + ts / p.time_constant_s * (drive - force), 0.0, p.force_saturation_n)
        if k >= skip:
            sq += (force - ref_force_n) ** 2
    return np.sqrt(sq / (n - skip))


def gain_grid(points_per_axis: int = 11, lower=GAIN_LOWER, upper=GAIN_UPPER) -> np.ndarray:
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(lower, upper)]
    return np.array(list(itertools.product(*axes)))


def grid_search(
    setup: ProcessSetup,
    ref_force_n: float,
    points_per_axis: int = 11,
    window_s: float = 10.0,
    settle_fraction: float = 0.1,
    chunk: int = 4096,
) -> tuple[np.ndarray, float]:
    """Best gain vector on a full factorial grid and its noise-free RMSE."""
    grid = gain_grid(points_per_axis)
    scores = np.concatenate(
        [
            batch_rmse(setup, grid[i : i + chunk], ref_force_n, window_s, settle_fraction)
            for i in range(0, len(grid), chunk)
        ]
    )
    best = int(np.argmin(scores))
    return grid[best], float(scores[best])
