"""Continuous Bayesian optimization of controller gains.

Each BO iteration is one fixed-length deployment window inside a single,
uninterrupted simulated print: the window's force RMSE is observed, the GP is
updated, expected improvement picks the next gains, and those are deployed
immediately on the still-running plant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from . import gp
from .controller import (
    GAIN_LOWER,
    GAIN_NAMES,
    GAIN_UPPER,
    ControllerFault,
    ControllerGains,
)
from .plant import Plant, SimulationFault
from .sim import ProcessSetup, deploy

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# independent random streams, keyed together with the run seed
_STREAM_PLANT, _STREAM_INIT, _STREAM_FIT, _STREAM_ACQ = range(4)

# objectives below this are treated as this value before taking logs
_LOG_FLOOR = 1e-12


def _stream(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *key])


def quantize(x: float) -> float:
    """Round to the 9 significant digits used by the observation files."""
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class SearchSpace:
    lower: tuple[float, ...] = GAIN_LOWER
    upper: tuple[float, ...] = GAIN_UPPER
    names: tuple[str, ...] = GAIN_NAMES

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if not len(self.lower) == len(self.upper) == len(self.names):
            raise ValueError("lower, upper and names must have equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("lower bound must be below upper bound in every dimension")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def to_unit(self, x) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return (np.asarray(x, dtype=float) - lo) / (hi - lo)

    def from_unit(self, u) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.clip(lo + np.asarray(u, dtype=float) * (hi - lo), lo, hi)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def snap(self, x) -> tuple[float, ...]:
        """Quantize a point and clip it back inside the bounds."""
        return tuple(
            min(max(quantize(v), lo), hi) for v, lo, hi in zip(x, self.lower, self.upper)
        )


@dataclass(frozen=True)
class Observation:
    window: int
    gains: tuple[float, ...]
    objective: float
    ref_force_n: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        if not self.objective >= 0:
            raise ValueError("objective must be non-negative")


@dataclass(frozen=True)
class BOSettings:
    window_s: float = 10.0
    total_s: float = 600.0
    xi: float = 1e-3
    settle_fraction: float = 0.1
    restarts: int = 8
    refit_every_until: int = 50
    refit_period: int = 5
    n_candidates: int = 1024
    n_refine: int = 10
    refine_steps: int = 100
    # model log(objective) instead of the raw RMSE; EI then works on the log scale
    log_objective: bool = True

    def __post_init__(self):
        if not self.window_s > 0:
            raise ValueError("window_s must be > 0")
        if not self.total_s >= self.window_s:
            raise ValueError("total_s must be >= window_s")
        if not 0 <= self.settle_fraction < 1:
            raise ValueError("settle_fraction must lie in [0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def n_windows(self) -> int:
        return int(math.floor(self.total_s / self.window_s + 1e-9))


@dataclass
class TuningRun:
    observations: list[Observation]
    reference_force_n: float
    seed: int
    normalized: bool = False
    settings: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def best_so_far(self) -> list[float]:
        out, best = [], math.inf
        for o in self.observations:
            best = min(best, o.objective)
            out.append(best)
        return out

    @property
    def best_index(self) -> int:
        objs = [o.objective for o in self.observations]
        return objs.index(min(objs))

    @property
    def best_objective(self) -> float:
        return self.observations[self.best_index].objective

    @property
    def best_input(self) -> tuple[float, ...]:
        return self.observations[self.best_index].gains

    @property
    def best_rmse_n(self) -> float:
        """Best objective expressed as an RMSE in newtons."""
        scale = self.reference_force_n if self.normalized else 1.0
        return self.best_objective * scale

    def deployed_gains(self) -> list[tuple[float, ...]]:
        return [o.gains for o in self.observations]


# ---------------------------------------------------------------------------
# objective and acquisition
# ---------------------------------------------------------------------------


def window_objective(forces, ref_force_n: float, settle_fraction: float = 0.1) -> float:
    """Force RMSE of a window after discarding the first ``settle_fraction`` of it."""
    f = np.asarray(getattr(forces, "force_n", forces), dtype=float)
    if f.size == 0:
        raise ValueError("empty force trace")
    if not ref_force_n > 0:
        raise ValueError("ref_force_n must be > 0")
    f = f[int(settle_fraction * f.size) :]
    return float(np.sqrt(np.mean((f - ref_force_n) ** 2)))


def expected_improvement(mean, variance, best_objective, xi: float = 1e-3):
    """Analytic EI for minimization: E[max(best - f + xi, 0)] under N(mean, variance)."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ValueError("variance must be non-negative")
    sigma = np.sqrt(variance)
    # grouped so that EI == 0 exactly when sigma == 0 and mean >= best + xi
    delta = (best_objective + xi) - mean
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, delta / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(
            sigma > 0,
            delta * ndtr(z) + sigma * _INV_SQRT_2PI * np.exp(-0.5 * z * z),
            np.maximum(delta, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass(frozen=True)
class Proposal:
    point: tuple[float, ...]
    ei: float
    fallback: bool = False


def _pattern_search(f, starts: np.ndarray, fstart: np.ndarray, steps: int, step0: float = 0.1):
    """Coordinate pattern search on the unit cube, all starts advanced together."""
    x, fx = starts.copy(), fstart.copy()
    k, d = x.shape
    dirs = np.vstack([np.eye(d), -np.eye(d)])
    step = np.full(k, step0)
    rows = np.arange(k)
    for _ in range(steps):
        nb = np.clip(x[:, None, :] + step[:, None, None] * dirs[None], 0.0, 1.0)
        fn = f(nb.reshape(-1, d)).reshape(k, 2 * d)
        j = np.argmax(fn, axis=1)
        better = fn[rows, j] > fx
        x[better] = nb[better, j[better]]
        fx[better] = fn[better, j[better]]
        step[~better] *= 0.5
    return x, fx


def maximize_acquisition(
    model: gp.GPModel,
    space: SearchSpace,
    best_objective: float,
    xi: float,
    rng,
    fixed_tail=(),
    settings: BOSettings = BOSettings(),
) -> Proposal:
    """Maximize EI over ``space``; ``fixed_tail`` unit coordinates are appended
    to every candidate before querying the model (used to pin a task input).
    """
    rng = np.random.default_rng(rng)
    d = space.dim
    tail = np.asarray(fixed_tail, dtype=float)

    def ei_of(u):
        q = np.hstack([u, np.broadcast_to(tail, (len(u), tail.size))]) if tail.size else u
        mean, var = model.predict(q)
        return expected_improvement(mean, var, best_objective, xi)

    m = int(math.log2(settings.n_candidates))
    sobol = qmc.Sobol(d, scramble=True, seed=rng)
    cand = sobol.random_base2(m) if 2**m == settings.n_candidates else sobol.random(settings.n_candidates)
    ei = ei_of(cand)
    if np.ptp(ei) <= 1e-12 * max(1.0, float(np.max(np.abs(ei)))):
        u = rng.uniform(size=d)
        return Proposal(space.snap(space.from_unit(u)), float(ei_of(u[None])[0]), True)

    order = np.argsort(-ei, kind="stable")[: settings.n_refine]
    xr, fr = _pattern_search(ei_of, cand[order], ei[order], settings.refine_steps)
    pool_x = np.vstack([xr, cand])
    pool_f = np.concatenate([fr, ei])
    i = int(np.argmax(pool_f))
    return Proposal(space.snap(space.from_unit(pool_x[i])), float(pool_f[i]))


# ---------------------------------------------------------------------------
# the continuous loop
# ---------------------------------------------------------------------------


def _cap_objective(setup: ProcessSetup, ref: float) -> float:
    return max(ref, setup.plant.force_saturation_n - ref)


def _restart_plant(setup: ProcessSetup, ref: float, old: Plant) -> Plant:
    fresh = Plant(setup.plant, setup.schedule, old.state.rng, setup.feedforward(ref))
    fresh.state.step_index = old.state.step_index
    return fresh


def _tuning_loop(
    setup: ProcessSetup,
    ref_force_n: float,
    space: SearchSpace,
    seed: int,
    settings: BOSettings,
    initial_gains=None,
    prior_x: np.ndarray | None = None,
    prior_y: np.ndarray | None = None,
    tail: tuple[float, ...] = (),
    normalized: bool = False,
) -> TuningRun:
    if not ref_force_n > 0:
        raise ValueError("ref_force_n must be > 0")
    dim = space.dim + len(tail)
    prior_x = np.zeros((0, dim)) if prior_x is None else np.asarray(prior_x, dtype=float)
    prior_y = np.zeros(0) if prior_y is None else np.asarray(prior_y, dtype=float)
    tail_arr = np.asarray(tail, dtype=float)
    scale = ref_force_n if normalized else 1.0

    run = TuningRun([], ref_force_n, seed, normalized, asdict(settings))
    plant = setup.new_plant(ref_force_n, _stream(seed, _STREAM_PLANT))
    u_ff = setup.feedforward(ref_force_n)
    n_steps = setup.steps(settings.window_s)
    hp: gp.KernelHyperparams | None = None
    last_fit = -math.inf

    def warp(y):
        return np.log(np.maximum(y, _LOG_FLOOR)) if settings.log_objective else np.asarray(y, dtype=float)

    def propose(window: int, xs: np.ndarray, ys: np.ndarray, best: float):
        nonlocal hp, last_fit
        n = len(ys)
        ys, best = warp(ys), float(warp(best))
        if hp is None or n <= settings.refit_every_until or window - last_fit >= settings.refit_period:
            model = gp.fit(
                xs, ys, restarts=settings.restarts, rng=_stream(seed, _STREAM_FIT, window), initial=hp
            )
            hp, last_fit = model.hyperparams, window
        else:
            model = gp.build_model(xs, ys, hp)
        prop = maximize_acquisition(
            model, space, best, settings.xi, _stream(seed, _STREAM_ACQ, window), tail_arr, settings
        )
        if prop.fallback:
            run.flags.append(f"window {window}: exploration fallback")
        return prop.point

    if initial_gains is not None:
        if not space.contains(np.asarray(initial_gains, dtype=float)):
            raise ValueError("initial gains lie outside the search space")
        gains = space.snap(np.asarray(initial_gains, dtype=float))
    elif len(prior_y):
        gains = propose(0, prior_x, prior_y, float(prior_y.min()))
    else:
        u = _stream(seed, _STREAM_INIT).uniform(size=space.dim)
        gains = space.snap(space.from_unit(u))

    xs_target, ys_target = [], []
    for w in range(settings.n_windows):
        try:
            trace = deploy(plant, ControllerGains.from_array(gains), ref_force_n, n_steps, setup.controller, u_ff)
            rmse = window_objective(trace.force_n, ref_force_n, settings.settle_fraction)
        except (SimulationFault, ControllerFault) as exc:
            log.warning("window %d faulted (%s); recording capped objective", w, exc)
            run.flags.append(f"window {w}: fault, capped objective")
            rmse = _cap_objective(setup, ref_force_n)
            plant = _restart_plant(setup, ref_force_n, plant)
        objective = quantize(rmse / scale)
        run.observations.append(Observation(w, gains, objective, ref_force_n))
        log.debug("window %d gains=%s objective=%.6g", w, gains, objective)

        xs_target.append(np.concatenate([space.to_unit(gains), tail_arr]))
        ys_target.append(objective)
        if w == settings.n_windows - 1:
            break
        xs = np.vstack([prior_x, np.array(xs_target)])
        ys = np.concatenate([prior_y, ys_target])
        gains = propose(w + 1, xs, ys, min(ys_target))
    return run


def run_continuous_bo(
    setup: ProcessSetup,
    ref_force_n: float,
    space: SearchSpace = SearchSpace(),
    seed: int = 0,
    settings: BOSettings = BOSettings(),
    initial_gains=None,
    prior_data: list[Observation] | None = None,
    normalize_objective: bool = False,
) -> TuningRun:
    """Tune the controller during one simulated print.

    Window 0 deploys ``initial_gains`` (a manual controller) if given,
    otherwise a random controller.  ``prior_data`` are earlier observations of
    the same task, in the same objective units, used to warm-start the GP.
    """
    prior_x = prior_y = None
    if prior_data:
        prior_x = np.array([space.to_unit(o.gains) for o in prior_data])
        prior_y = np.array([o.objective for o in prior_data])
    return _tuning_loop(
        setup,
        ref_force_n,
        space,
        seed,
        settings,
        initial_gains,
        prior_x,
        prior_y,
        normalized=normalize_objective,
    )


def iterations_to_convergence(run: TuningRun, tolerance_fraction: float = 0.05) -> int:
    """First iteration (1-based) whose best-so-far is within tolerance of the final best."""
    bsf = run.best_so_far()
    if not bsf:
        raise ValueError("run has no observations")
    target = (1 + tolerance_fraction) * bsf[-1]
    return next(i + 1 for i, b in enumerate(bsf) if b <= target)
