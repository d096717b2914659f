"""Exact simulator for a two-layer linear network with a random first layer.

The model: inputs ``x ~ N(0, I_d/d)``, targets ``y = x^T theta`` with
``theta ~ N(0, I_d)``, a frozen random first layer ``W`` (p x d, entries
``N(0, 1/d)``) and a ridge-fitted readout ``beta`` minimizing
``||(W X)^T beta - y||^2 + lam * ||beta||^2``.  The fitted predictor is
``f(x) = x^T W^T beta = x^T M theta`` where

    M = W^T (W X X^T W^T + lam I)^-1 W X X^T,

so expected squared bias, variance and risk over fresh draws of (W, X)
reduce to Frobenius-norm statistics of M:

    bias_sq  = ||E M - I||^2 / d
    variance = E ||M - E M||^2 / d
    risk     = E ||M - I||^2 / d.

Monte Carlo here samples (W, X) jointly and accumulates those statistics;
the inner expectations over (x, theta) are already integrated out, which
cuts both cost and estimator noise.  The data-free limit matrix
``Mtilde = W^T (W W^T + lambda0 I)^-1 W`` is also provided, together with a
Monte Carlo estimate of its risk for comparison against the closed-form
spectral average.

Linear systems are solved through a Cholesky factorization of the
regularized Gram matrix; nothing is explicitly inverted.  Trials own
disjoint RNG streams derived from the master seed and are reduced in fixed
trial-index order, so results are bit-reproducible for a fixed NumPy build
regardless of how trials are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg as sla

from .seeding import spawn_rng

__all__ = [
    "ModelDims",
    "LinearNetSample",
    "SingularSystemError",
    "BiasVarianceRisk",
    "sample_instance",
    "ridge_fit",
    "m_matrix",
    "m_tilde",
    "mc_bias_variance",
    "mc_risk_mtilde",
]

# lam = 0 is accepted only when the Gram matrix clears this conditioning bar.
CONDITION_LIMIT = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    """The unregularized Gram system is singular or too ill-conditioned."""


@dataclass(frozen=True)
class ModelDims:
    """Problem dimensions (input d, samples n, width p) plus ridge strength.

    ``lam`` is the ridge actually applied to the fit, ``(n/d) * lambda0``;
    ``gamma = p/d`` and ``eta = d/p`` are the width ratios used by the
    closed-form limits.
    """

    d: int
    n: int
    p: int
    lambda0: float

    def __post_init__(self) -> None:
        for name in ("d", "n", "p"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not math.isfinite(self.lambda0) or self.lambda0 < 0.0:
            raise ValueError(f"lambda0 must be finite and >= 0, got {self.lambda0}")

    @property
    def gamma(self) -> float:
        return self.p / self.d

    @property
    def eta(self) -> float:
        return self.d / self.p

    @property
    def lam(self) -> float:
        return (self.n / self.d) * self.lambda0


@dataclass
class LinearNetSample:
    """One draw of (W, X, theta) with the implied targets ``y = X^T theta``."""

    W: np.ndarray
    X: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    beta: Optional[np.ndarray] = None


class BiasVarianceRisk(NamedTuple):
    bias_sq: float
    variance: float
    risk: float


def sample_instance(dims: ModelDims, seed: int) -> LinearNetSample:
    """Draw one (W, X, theta) instance; deterministic in ``seed``.

    W and X entries are N(0, 1/d) (so input columns have covariance I/d),
    theta is standard normal, and ``y = X^T theta`` holds exactly.
    """
    rng = spawn_rng(seed)
    scale = 1.0 / math.sqrt(dims.d)
    W = rng.standard_normal((dims.p, dims.d)) * scale
    X = rng.standard_normal((dims.d, dims.n)) * scale
    theta = rng.standard_normal(dims.d)
    return LinearNetSample(W=W, X=X, theta=theta, y=X.T @ theta)


def _solve_regularized_gram(gram: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """Solve (gram + lam I) Z = rhs via Cholesky; gram must be symmetric PSD."""
    if lam < 0.0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    a = 0.5 * (gram + gram.T)
    if lam == 0.0:
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond >= CONDITION_LIMIT:
            raise SingularSystemError(
                f"Gram matrix is singular at lam=0 (condition number {cond:.3e} "
                f">= {CONDITION_LIMIT:.0e}); use lam > 0"
            )
    else:
        a[np.diag_indices_from(a)] += lam
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"Gram matrix not positive definite at lam={lam}"
        ) from exc
    return sla.cho_solve(factor, rhs, check_finite=False)


def ridge_fit(W: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Readout weights minimizing ||(W X)^T beta - y||^2 + lam ||beta||^2.

    Solves the normal equations (W X X^T W^T + lam I) beta = W X y.  With
    ``lam = 0`` the Gram matrix must pass the conditioning check, otherwise
    :class:`SingularSystemError` is raised.
    """
    features = W @ X
    gram = features @ features.T
    return _solve_regularized_gram(gram, features @ y, lam)


def _m_from_gram(W: np.ndarray, second_moment: np.ndarray, lam: float) -> np.ndarray:
    ws = W @ second_moment
    return W.T @ _solve_regularized_gram(ws @ W.T, ws, lam)


def m_matrix(W: np.ndarray, X: np.ndarray, lam: float) -> np.ndarray:
    """The d x d map M with ``x^T M theta`` equal to the fitted prediction.

    M = W^T (W X X^T W^T + lam I)^-1 W X X^T.  For any (x, theta) and
    ``y = X^T theta``, ``x^T M theta == x^T W^T ridge_fit(W, X, y, lam)``.
    """
    return _m_from_gram(W, X @ X.T, lam)


def m_tilde(W: np.ndarray, lambda0: float) -> np.ndarray:
    """Data-free limit map ``W^T (W W^T + lambda0 I)^-1 W``.

    Equals ``I - (I + W^T W / lambda0)^-1``; its eigenvalues are
    ``s^2 / (s^2 + lambda0)`` over the singular values ``s`` of W and lie in
    [0, 1).  Requires ``lambda0 > 0``.
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    return W.T @ _solve_regularized_gram(W @ W.T, W, lambda0)


def mc_bias_variance(dims: ModelDims, trials: int, master_seed: int) -> BiasVarianceRisk:
    """Monte Carlo bias/variance/risk over fresh (W, X) draws.

    Accumulates the running mean of M, of ``tr(M)`` and of ``||M||_F^2`` in
    trial-index order (trial ``t`` uses the RNG stream derived from
    ``(master_seed, t)``), then forms

        bias_sq  = ||mean M - I||^2 / d
        variance = (mean ||M||^2 - ||mean M||^2) / d
        risk     = (mean ||M||^2 - 2 mean tr(M) + d) / d

    so that ``risk == bias_sq + variance`` holds as the exact algebraic
    identity of the empirical decomposition.

    Raises:
        ValueError: if ``trials < 2`` (the variance is undefined).
    """
    if trials < 2:
        raise ValueError(f"trials must be >= 2, got {trials}")
    d = dims.d
    lam = dims.lam
    scale = 1.0 / math.sqrt(d)
    m_sum = np.zeros((d, d))
    sq_sum = 0.0
    trace_sum = 0.0
    for t in range(trials):
        rng = spawn_rng(master_seed, t)
        W = rng.standard_normal((dims.p, d)) * scale
        X = rng.standard_normal((d, dims.n)) * scale
        M = _m_from_gram(W, X @ X.T, lam)
        m_sum += M
        sq_sum += float(np.vdot(M, M))
        trace_sum += float(np.trace(M))
    m_mean = m_sum / trials
    sq_mean = sq_sum / trials
    trace_mean = trace_sum / trials
    centered = m_mean - np.eye(d)
    bias_sq = float(np.vdot(centered, centered)) / d
    # Guard the subtraction form against a -1 ulp result when all trials agree.
    variance = max((sq_mean - float(np.vdot(m_mean, m_mean))) / d, 0.0)
    risk = (sq_mean - 2.0 * trace_mean + d) / d
    return BiasVarianceRisk(bias_sq=bias_sq, variance=variance, risk=risk)


def mc_risk_mtilde(d: int, p: int, lambda0: float, trials: int, master_seed: int) -> float:
    """Monte Carlo estimate of ``E ||Mtilde - I||_F^2 / d`` over W draws.

    Uses the spectral identity ``||Mtilde - I||_F^2 = sum_i 1/(1 + mu_i /
    lambda0)^2`` with ``mu_i`` the eigenvalues of ``W^T W`` (equal to the
    direct Frobenius norm of ``m_tilde(W, lambda0) - I``); converges to
    ``mp_risk(lambda0, d/p)`` as d grows.
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if d < 1 or p < 1:
        raise ValueError(f"d and p must be positive, got d={d}, p={p}")
    scale = 1.0 / math.sqrt(d)
    total = 0.0
    for t in range(trials):
        rng = spawn_rng(master_seed, t)
        W = rng.standard_normal((p, d)) * scale
        mu = np.clip(np.linalg.eigvalsh(W.T @ W), 0.0, None)
        total += float(np.sum(1.0 / (1.0 + mu / lambda0) ** 2)) / d
    return total / trials
