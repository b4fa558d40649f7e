"""Gaussian-process regression with an ARD Matern-5/2 kernel.

Inputs live on the unit cube.  Targets are standardized (empirical mean and
standard deviation) before entering a zero-mean GP, and predictions are mapped
back.  Hyperparameters are chosen by maximizing the log marginal likelihood
in log-parameter space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotri
from scipy.optimize import minimize

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2 * math.pi)


class GPFitError(RuntimeError):
    """Gram matrix could not be factorized."""


class NumericalFault(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelHyperparams:
    signal_variance: float
    lengthscales: tuple[float, ...]
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        if self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("variances must be strictly positive")
        if any(v <= 0 for v in self.lengthscales):
            raise ValueError("lengthscales must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        """``[log sf2, log l_1, ..., log l_d, log noise]``"""
        return np.log([self.signal_variance, *self.lengthscales, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> KernelHyperparams:
        v = np.exp(np.asarray(theta, dtype=float))
        return cls(float(v[0]), tuple(v[1:-1]), float(v[-1]))

    @classmethod
    def default(cls, dim: int) -> KernelHyperparams:
        return cls(1.0, (0.3,) * dim, 1e-2)


@dataclass(frozen=True)
class HyperparamBounds:
    lengthscale: tuple[float, float] = (1e-2, 1e2)
    signal_variance: tuple[float, float] = (1e-4, 1e2)
    noise_variance: tuple[float, float] = (1e-6, 1.0)

    def clip(self, hp: KernelHyperparams) -> KernelHyperparams:
        return KernelHyperparams(
            float(np.clip(hp.signal_variance, *self.signal_variance)),
            tuple(np.clip(hp.lengthscales, *self.lengthscale)),
            float(np.clip(hp.noise_variance, *self.noise_variance)),
        )

    def log_bounds(self, dim: int) -> list[tuple[float, float]]:
        b = [self.signal_variance] + [self.lengthscale] * dim + [self.noise_variance]
        return [(math.log(lo), math.log(hi)) for lo, hi in b]


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


def _matern_profile(r):
    return (1 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def kernel(x1, x2, hp: KernelHyperparams) -> float:
    """Matern-5/2 covariance between two points."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or x1.shape != (hp.dim,):
        raise ValueError("point dimensions do not match the kernel")
    r = math.sqrt(float(np.sum(((x1 - x2) / np.asarray(hp.lengthscales)) ** 2)))
    return hp.signal_variance * float(_matern_profile(r))


def kernel_matrix(x1: np.ndarray, x2: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    ls = np.asarray(hp.lengthscales)
    a = np.asarray(x1, dtype=float) / ls
    b = np.asarray(x2, dtype=float) / ls
    r2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    r = np.sqrt(np.maximum(r2, 0.0))
    return hp.signal_variance * _matern_profile(r)


def _gram(x: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    # exact pairwise differences keep the diagonal at exactly sf2
    diff = (x[:, None, :] - x[None, :, :]) / np.asarray(hp.lengthscales)
    r = np.sqrt((diff * diff).sum(-1))
    return hp.signal_variance * _matern_profile(r)


def cholesky_with_jitter(a: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``, adding diagonal jitter only if needed.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to ``1e-4 * scale``.
    """
    try:
        return cholesky(a, lower=True, check_finite=True), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * scale
    eye = np.eye(len(a))
    while jitter <= 1e-4 * scale * (1 + 1e-12):
        try:
            return cholesky(a + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10
    raise GPFitError("Gram matrix is not positive definite after jitter escalation")


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def _lml_terms(sq_diffs: np.ndarray, y: np.ndarray, theta: np.ndarray, with_grad: bool):
    """LML (and gradient in log space) from precomputed squared differences.

    ``sq_diffs`` has shape ``(d, n, n)``.
    """
    d, n, _ = sq_diffs.shape
    sf2 = math.exp(theta[0])
    inv_l2 = np.exp(-2.0 * theta[1 : d + 1])
    noise = math.exp(theta[-1])

    r = np.sqrt(np.tensordot(inv_l2, sq_diffs, 1))
    e = np.exp(-SQRT5 * r)
    m = (1 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    k = sf2 * m
    k[np.diag_indices(n)] += noise
    chol = cholesky(k, lower=True, check_finite=False)
    alpha = cho_solve((chol, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * LOG_2PI
    if not with_grad:
        return lml, None

    k_inv, info = dpotri(chol, lower=1)
    if info:
        raise np.linalg.LinAlgError("inverse of the Gram matrix failed")
    k_inv = np.tril(k_inv) + np.tril(k_inv, -1).T
    w = np.outer(alpha, alpha) - k_inv
    grad = np.empty(d + 2)
    grad[0] = 0.5 * np.sum(w * (sf2 * m))
    common = sf2 * (5.0 / 3.0) * (1 + SQRT5 * r) * e
    grad[1 : d + 1] = 0.5 * inv_l2 * (sq_diffs.reshape(d, -1) @ (w * common).ravel())
    grad[-1] = 0.5 * noise * np.trace(w)
    return lml, grad


def _sq_diffs(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.ascontiguousarray(np.moveaxis(diff * diff, -1, 0))


def log_marginal_likelihood(
    inputs, targets, hp: KernelHyperparams
) -> tuple[float, np.ndarray]:
    """Gaussian LML of ``targets`` (used as given) and its log-space gradient.

    Gradient order follows :meth:`KernelHyperparams.to_log`.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(y) < 1:
        raise ValueError("need at least one observation")
    try:
        lml, grad = _lml_terms(_sq_diffs(x), y, hp.to_log(), True)
    except np.linalg.LinAlgError as exc:
        raise GPFitError(str(exc)) from exc
    return float(lml), grad


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPModel:
    hyperparams: KernelHyperparams
    train_inputs: np.ndarray
    train_targets: np.ndarray
    y_mean: float
    y_scale: float
    factor: np.ndarray  # lower Cholesky factor of K + noise*I (+ jitter)
    alpha: np.ndarray   # (K + noise*I)^-1 y on the standardized targets
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.train_targets)

    @property
    def dim(self) -> int:
        return self.hyperparams.dim

    @property
    def standardized_targets(self) -> np.ndarray:
        return (self.train_targets - self.y_mean) / self.y_scale

    def predict(self, query) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance at each row of ``query``."""
        q = np.atleast_2d(np.asarray(query, dtype=float))
        if q.shape[1] != self.dim:
            raise ValueError(f"query dimension {q.shape[1]} != model dimension {self.dim}")
        sf2 = self.hyperparams.signal_variance
        if self.n == 0:
            return np.full(len(q), self.y_mean), np.full(len(q), sf2 * self.y_scale**2)
        ks = kernel_matrix(self.train_inputs, q, self.hyperparams)
        mean = ks.T @ self.alpha
        v = solve_triangular(self.factor, ks, lower=True, check_finite=False)
        var = sf2 - np.einsum("ij,ij->j", v, v)
        if np.any(var < -1e-10 * sf2):
            raise NumericalFault(f"negative posterior variance {var.min():.3e}")
        var = np.maximum(var, 0.0)
        return self.y_mean + self.y_scale * mean, var * self.y_scale**2

    def posterior(self, query) -> tuple[float, float]:
        mean, var = self.predict(np.asarray(query, dtype=float)[None, :])
        return float(mean[0]), float(var[0])

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            raise ValueError("LML undefined without data")
        y = self.standardized_targets
        return float(-0.5 * y @ self.alpha - np.log(np.diag(self.factor)).sum() - 0.5 * self.n * LOG_2PI)


def _standardize(y: np.ndarray) -> tuple[float, float]:
    if len(y) == 0:
        return 0.0, 1.0
    mean = float(np.mean(y))
    std = float(np.std(y))
    return mean, (std if std > 1e-12 * max(1.0, abs(mean)) else 1.0)


def build_model(
    inputs, targets, hp: KernelHyperparams, standardize: bool = True
) -> GPModel:
    """Condition a GP with fixed hyperparameters on the data."""
    y = np.asarray(targets, dtype=float).ravel()
    x = np.asarray(inputs, dtype=float).reshape(len(y), hp.dim)
    y_mean, y_scale = _standardize(y) if standardize else (0.0, 1.0)
    if len(y) == 0:
        return GPModel(hp, x, y, y_mean, y_scale, np.zeros((0, 0)), np.zeros(0))
    k = _gram(x, hp)
    k[np.diag_indices(len(y))] += hp.noise_variance
    chol, jitter = cholesky_with_jitter(k, hp.signal_variance)
    if jitter:
        log.debug("added jitter %.1e to the Gram matrix", jitter)
    alpha = cho_solve((chol, True), (y - y_mean) / y_scale)
    return GPModel(hp, x, y, y_mean, y_scale, chol, alpha, jitter)


def fit(
    inputs,
    targets,
    bounds: HyperparamBounds = HyperparamBounds(),
    restarts: int = 8,
    rng=None,
    initial: KernelHyperparams | None = None,
    max_iter: int = 200,
) -> GPModel:
    """Fit hyperparameters by multi-start LML maximization and condition on the data.

    Restart 0 starts from ``initial`` (or a fixed default); the others start
    log-uniformly at random within ``bounds``.  Each restart runs a bounded
    quasi-Newton ascent in log space.  Ties keep the lowest restart index.
    """
    y = np.asarray(targets, dtype=float).ravel()
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(y) < 1:
        raise ValueError("fit needs at least one observation")
    if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
        raise ValueError("inputs must be normalized to the unit cube")
    n, d = x.shape
    rng = np.random.default_rng(rng)
    lb = np.array(bounds.log_bounds(d))
    y_mean, y_scale = _standardize(y)
    ys = (y - y_mean) / y_scale
    sq = _sq_diffs(x)

    def objective(theta):
        try:
            lml, grad = _lml_terms(sq, ys, theta, True)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    start0 = (initial or KernelHyperparams.default(d)).to_log()
    starts = [np.clip(start0, lb[:, 0], lb[:, 1])]
    for _ in range(1, restarts):
        starts.append(rng.uniform(lb[:, 0], lb[:, 1]))

    best_theta, best_lml = None, -np.inf
    for theta0 in starts:
        res = minimize(
            objective,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=lb,
            options={"maxiter": max_iter},
        )
        theta = np.clip(res.x, lb[:, 0], lb[:, 1])
        lml = -objective(theta)[0]
        if lml > best_lml:
            best_theta, best_lml = theta, lml
    if best_theta is None:
        raise GPFitError("no restart produced a finite likelihood")
    return build_model(x, y, bounds.clip(KernelHyperparams.from_log(best_theta)))
