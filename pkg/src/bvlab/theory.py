"""Closed-form asymptotics for the two-layer linear network.

For a network with random frozen first layer (width ``p``, input dimension
``d``) fitted by ridge regression on ``n`` samples, the expected squared
bias, variance and risk converge, as ``d -> infinity`` with ``p/d -> gamma``
and ``n/d -> infinity`` under the scaling ``lambda = (n/d) * lambda0``, to
functions of ``(lambda0, gamma)`` alone.  This module evaluates those limits
plus several independent routes to the same quantities: the spectral-average
(Marchenko-Pastur) form of the risk, the combinatorial (Narayana-number)
series for the bias, the derivative of the bias, and the location of the
variance peak.

All functions are pure; concurrent use is unrestricted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "TheoryPoint",
    "PeakSearchError",
    "theory_point",
    "bias_derivative",
    "small_lambda_expansion",
    "variance_peak",
    "narayana",
    "NarayanaSeriesSum",
    "narayana_series",
    "narayana_series_closed",
    "mp_risk",
]


class PeakSearchError(RuntimeError):
    """The variance curve did not present a single interior maximum."""


@dataclass(frozen=True)
class TheoryPoint:
    """Limiting bias/variance/risk at one (regularization, width-ratio) point.

    ``phi1``, ``phi2``, ``phi3`` are the three auxiliary functions evaluated
    at ``(lambda0, gamma)``; ``risk == bias_sq + variance`` exactly.
    """

    lambda0: float
    gamma: float
    bias_sq: float
    variance: float
    risk: float
    phi1: float
    phi2: float
    phi3: float


def _phi1(lambda0: float, g: float) -> float:
    return lambda0 * (g + 1.0) + (g - 1.0) ** 2


def _phi2(lambda0: float, g: float) -> float:
    # Fused form sqrt((g + lambda0 - 1)^2 + 4*lambda0): both terms are
    # nonnegative, so no cancellation for any g, lambda0 >= 0.
    u = g + lambda0 - 1.0
    return math.sqrt(u * u + 4.0 * lambda0)

def _phi3(lambda0: float, g: float) -> float:
    # phi2 - (g + lambda0 - 1), rationalized when the subtraction would
    # cancel (large g).
    u = g + lambda0 - 1.0
    s = _phi2(lambda0, g)
    if u > 0.0:
        return 4.0 * lambda0 / (s + u)
    return s - u


def theory_point(lambda0: float, gamma: float) -> TheoryPoint:
    """Evaluate the limiting decomposition at ``(lambda0, gamma)``.

    The squared bias is ``phi3(lambda0, gamma)^2 / 4`` and the risk is
    ``phi1 / (2 * phi2) + (1 - gamma) / 2``, a single expression valid on
    both sides of ``gamma = 1``; the variance is their difference.

    Args:
        lambda0: ridge strength before the ``n/d`` rescaling; must be > 0.
        gamma: width-to-dimension ratio ``p/d``; must be > 0.  The limits
            as ``gamma -> 0+`` are bias 1, variance 0.

    Raises:
        ValueError: if ``lambda0 <= 0`` or ``gamma <= 0``.
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    p1 = _phi1(lambda0, gamma)
    p2 = _phi2(lambda0, gamma)
    p3 = _phi3(lambda0, gamma)
    bias_sq = 0.25 * p3 * p3
    risk = p1 / (2.0 * p2) + 0.5 * (1.0 - gamma)
    variance = risk - bias_sq
    return TheoryPoint(
        lambda0=lambda0,
        gamma=gamma,
        bias_sq=bias_sq,
        variance=variance,
        risk=bias_sq + variance,
        phi1=p1,
        phi2=p2,
        phi3=p3,
    )


def bias_derivative(lambda0: float, gamma: float) -> float:
    """d(bias_sq)/d(gamma); nonpositive for every ``lambda0 >= 0``.

    Equals ``-phi3(lambda0, gamma)^2 / (2 * phi2(lambda0, gamma))``, which is
    also the closed form of the derivative of ``theory_point(...).bias_sq``.
    ``lambda0 = 0`` is allowed here (the expression stays finite).
    """
    if lambda0 < 0.0:
        raise ValueError(f"lambda0 must be nonnegative, got {lambda0}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    p3 = _phi3(lambda0, gamma)
    return -(p3 * p3) / (2.0 * _phi2(lambda0, gamma))


def small_lambda_expansion(lambda0: float, gamma: float) -> tuple[float, float]:
    """First-order-in-``lambda0`` variance and risk.

    For ``gamma <= 1`` the variance is ``gamma*(1-gamma) - 2*gamma*lambda0``
    up to O(lambda0^2) and the risk is ``1 - gamma``; for ``gamma > 1`` both
    are O(lambda0^2), returned as 0.  The quadratic error constant degrades
    near ``gamma = 1`` (see tests for the calibrated region).
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gamma > 1.0:
        return 0.0, 0.0
    return gamma * (1.0 - gamma) - 2.0 * gamma * lambda0, 1.0 - gamma


_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0     # 0.618...
_SCAN_POINTS = 1000
_DIFF_NOISE = 1e-13


def variance_peak(lambda0: float, tol: float = 1e-6) -> float:
    """Width ratio at which the limiting variance attains its maximum.

    A coarse scan over ``(0, 2]`` brackets the maximum (and verifies that the
    scanned curve rises and falls exactly once), then golden-section search
    refines the bracket to ``tol``.

    Raises:
        PeakSearchError: if the scan does not show a single interior
            maximum, which would contradict the unimodal variance shape.
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    grid = [2.0 * (i + 1) / _SCAN_POINTS for i in range(_SCAN_POINTS)]
    values = [theory_point(lambda0, g).variance for g in grid]
    diffs = [b - a for a, b in zip(values, values[1:])]
    signs = [1.0 if v > 0 else -1.0 for v in diffs if abs(v) > _DIFF_NOISE]
    changes = sum(1 for a, b in zip(signs, signs[1:]) if a != b)
    if changes != 1 or not signs or signs[0] != 1.0 or signs[-1] != -1.0:
        raise PeakSearchError(
            f"variance scan at lambda0={lambda0} is not unimodal "
            f"({changes} sign changes)"
        )
    top = max(range(len(values)), key=values.__getitem__)
    lo = grid[top - 1] if top > 0 else grid[0] / 2.0
    hi = grid[top + 1] if top + 1 < len(grid) else grid[-1]
    while hi - lo > tol:
        m1 = hi - (hi - lo) * _INV_GOLDEN
        m2 = lo + (hi - lo) * _INV_GOLDEN
        if theory_point(lambda0, m1).variance < theory_point(lambda0, m2).variance:
            lo = m1
        else:
            hi = m2
    return 0.5 * (lo + hi)


def narayana(m: int, k: int) -> int:
    """Narayana number N(m, k) = C(m-1, k-1) * C(m, k-1) / k, exactly.

    Counts non-crossing partitions of an m-set with k blocks; each row sums
    to the m-th Catalan number.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}], got {k}")
    return math.comb(m - 1, k - 1) * math.comb(m, k - 1) // k


class NarayanaSeriesSum(NamedTuple):
    """Truncated series value plus whether the truncation bound applies."""

    partial_sum: float
    converged: bool


def _series_converges(lambda0: float, eta: float) -> bool:
    return (1.0 / lambda0) * (1.0 + 1.0 / math.sqrt(eta)) ** 2 < 1.0


def narayana_series(lambda0: float, eta: float, m_max: int) -> NarayanaSeriesSum:
    """Partial sum of sum_{m>=1} sum_{k=1..m} N(m,k) (-1/lambda0)^m eta^-k.

    The series converges geometrically when
    ``(1/lambda0) * (1 + 1/sqrt(eta))^2 < 1``; outside that region the
    partial sum is still returned but flagged ``converged=False``.

    Args:
        m_max: truncation order; must be >= 1.
    """
    if lambda0 <= 0.0 or eta <= 0.0:
        raise ValueError("lambda0 and eta must be positive")
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    z = -1.0 / lambda0
    t = 1.0 / eta
    total = 0.0
    z_pow = 1.0
    for m in range(1, m_max + 1):
        z_pow *= z
        inner = 0.0
        t_pow = 1.0
        for k in range(1, m + 1):
            t_pow *= t
            inner += narayana(m, k) * t_pow
        total += z_pow * inner
    return NarayanaSeriesSum(total, _series_converges(lambda0, eta))


def narayana_series_closed(lambda0: float, eta: float) -> float:
    """Closed form of the full Narayana series.

    Algebraically ``-(lambda0*eta + 1 + eta - sqrt(D)) / (2*eta)`` with
    ``D = (lambda0*eta)^2 + 2*lambda0*eta*(1+eta) + (1-eta)^2``; evaluated in
    the rationalized form ``-2 / (lambda0*eta + 1 + eta + sqrt(D))`` to avoid
    the cancellation of the direct form for large ``lambda0*eta``.  Satisfies
    ``(1 + S)^2 == theory_point(lambda0, 1/eta).bias_sq``.
    """
    if lambda0 <= 0.0 or eta <= 0.0:
        raise ValueError("lambda0 and eta must be positive")
    le = lambda0 * eta
    disc = le * le + 2.0 * le * (1.0 + eta) + (1.0 - eta) ** 2
    return -2.0 / (le + 1.0 + eta + math.sqrt(disc))


def _spectral_mean_inverse_square(alpha: float, eta: float) -> float:
    """E[1 / (1 + (alpha/eta)x)^2] under the Marchenko-Pastur law of ratio eta <= 1."""
    num = alpha + eta * (1.0 + eta - 2.0 * alpha + eta * alpha)
    den = 2.0 * eta * math.sqrt(
        eta * eta + 2.0 * eta * alpha * (1.0 + eta) + alpha * alpha * (1.0 - eta) ** 2
    )
    return num / den - (1.0 - eta) / (2.0 * eta)


def mp_risk(lambda0: float, eta: float) -> float:
    """Limiting risk as a spectral average, parametrized by ``eta = d/p``.

    For ``eta <= 1`` this is the mean of ``1/(1 + x/lambda0)^2`` over the
    Marchenko-Pastur bulk of the rescaled Gram spectrum.  For ``eta > 1`` the
    spectrum carries an atom at zero of mass ``1 - 1/eta`` (contributing 1
    each) while the bulk, weighted ``1/eta``, follows the transposed-Gram law
    of ratio ``1/eta``; the eigenvalue rescaling turns ``alpha`` into
    ``alpha/eta`` inside the bulk average.  Both branches agree at
    ``eta = 1`` and satisfy
    ``mp_risk(lambda0, eta) == theory_point(lambda0, 1/eta).risk``.
    """
    if lambda0 <= 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    alpha = 1.0 / lambda0
    if eta <= 1.0:
        return _spectral_mean_inverse_square(alpha, eta)
    inv = 1.0 / eta
    return (1.0 - inv) + inv * _spectral_mean_inverse_square(alpha * inv, inv)
