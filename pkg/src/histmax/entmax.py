"""Alpha-entmax normalization: centering, the threshold objective, and reference solvers.

All solver arithmetic runs in float64. Masked entries are carried as ``-inf``
so they sort below every score and never enter a sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRowError, InvalidDistributionError, ParameterError, UnsupportedAlphaError

# base clamp for terms raised to a negative power (f' for alpha > 2, f'' for alpha > 1.5)
BASE_FLOOR = 1e-12
EXACT_ALPHAS = (1.5, 2.0)


def check_alpha(alpha):
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha <= 1.0:
        raise ParameterError(f"alpha must be > 1, got {alpha}")
    return alpha


@dataclass(frozen=True)
class CenteredScores:
    """Scores shifted and scaled so the largest unmasked entry is exactly 1."""

    values: np.ndarray
    alpha: float

    @property
    def active(self):
        return np.isfinite(self.values)

    @property
    def n(self):
        return int(np.count_nonzero(self.active))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class EntmaxParams:
    alpha: float
    tol: float = 1e-10
    max_iters: int = 100

    def __post_init__(self):
        check_alpha(self.alpha)
        if not self.tol > 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")
        if int(self.max_iters) < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class ThresholdSolution:
    tau: float
    residual: float
    bracket_lo: float
    bracket_hi: float
    iterations: int = 0
    history: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class Probabilities:
    values: np.ndarray

    @property
    def support(self):
        return np.flatnonzero(self.values > 0)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def center_rows(S, alpha, mask=None):
    """Vectorized centering over the last axis.

    ``mask`` marks excluded entries with True. Every row must keep at least
    one entry. The row maximum maps to exactly 1.0, independent of rounding.
    """
    alpha = check_alpha(alpha)
    S = np.asarray(S, dtype=np.float64)
    if mask is not None:
        S = np.where(mask, -np.inf, S)
    if not np.all(np.isfinite(S) | np.isneginf(S)):
        raise ParameterError("scores must be finite")
    m = S.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise EmptyRowError("a score row has every entry masked")
    Z = (alpha - 1.0) * S - ((alpha - 1.0) * m - 1.0)
    Z = np.where(S == m, 1.0, Z)
    return Z


def center_scores(s, alpha, mask=None):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ParameterError("score vector must be one-dimensional and non-empty")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != s.shape:
            raise ParameterError("mask shape does not match scores")
    return CenteredScores(center_rows(s, alpha, mask), check_alpha(alpha))


def bracket_upper(n, alpha):
    """Upper end of the threshold bracket for ``n`` centered entries."""
    return 1.0 - float(n) ** (1.0 - alpha)


def f_sums(Z, tau, alpha):
    """Per-row partial sums of the objective and its first two derivatives.

    Returns ``(g0, g1, g2)`` with ``f = g0 - 1``, ``f' = g1``, ``f'' = g2``.
    Only the active set ``Z > tau`` contributes, so sums over disjoint column
    blocks may be added together.
    """
    Z = np.asarray(Z, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if Z.ndim == 2 and tau.ndim == 1:
        tau = tau[:, None]
    e = 1.0 / (alpha - 1.0)
    d = Z - tau
    act = d > 0
    d = np.where(act, d, 0.0)
    g0 = np.sum(np.where(act, d**e, 0.0), axis=-1)
    base1 = np.maximum(d, BASE_FLOOR) if e < 1.0 else d
    g1 = -e * np.sum(np.where(act, base1 ** (e - 1.0), 0.0), axis=-1)
    base2 = np.maximum(d, BASE_FLOOR) if e < 2.0 else d
    g2 = e * (e - 1.0) * np.sum(np.where(act, base2 ** (e - 2.0), 0.0), axis=-1)
    return g0, g1, g2


def f_eval(z, tau):
    """Objective ``f(tau) = -1 + sum [z - tau]_+^(1/(alpha-1))`` with ``f'`` and ``f''``."""
    g0, g1, g2 = f_sums(z.values, float(tau), z.alpha)
    return float(g0) - 1.0, float(g1), float(g2)


def f_value(z, tau):
    return f_eval(z, tau)[0]


def exact_tau_rows(Z, alpha):
    """Sort-based threshold for each row of ``Z`` (alpha in {1.5, 2})."""
    alpha = float(alpha)
    if alpha not in EXACT_ALPHAS:
        raise UnsupportedAlphaError(f"exact solver supports alpha in {EXACT_ALPHAS}, got {alpha}")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    zs = -np.sort(-Z, axis=-1, kind="stable")
    valid = np.isfinite(zs)
    zs0 = np.where(valid, zs, 0.0)
    k = np.arange(1, Z.shape[-1] + 1, dtype=np.float64)
    c1 = np.cumsum(zs0, axis=-1)
    if alpha == 2.0:
        taus = (c1 - 1.0) / k
    else:
        mean = c1 / k
        mean_sq = np.cumsum(zs0 * zs0, axis=-1) / k
        ss = k * (mean_sq - mean * mean)
        delta = np.maximum((1.0 - ss) / k, 0.0)
        taus = mean - np.sqrt(delta)
    ok = valid & (zs > taus)
    support = np.maximum(ok.sum(axis=-1), 1)
    tau = np.take_along_axis(taus, (support - 1)[:, None], axis=-1)[:, 0]
    n = valid.sum(axis=-1)
    return np.clip(tau, 0.0, 1.0 - n.astype(np.float64) ** (1.0 - alpha))


def solve_exact(z):
    tau = float(exact_tau_rows(z.values[None, :], z.alpha)[0])
    return ThresholdSolution(
        tau=tau,
        residual=f_value(z, tau),
        bracket_lo=0.0,
        bracket_hi=bracket_upper(z.n, z.alpha),
    )


def solve_bisection(z, params=None, *, lo=None, hi=None):
    """Bisection on the centered bracket, stopping at ``|f| <= tol``.

    ``history`` holds every evaluated midpoint, in order.
    """
    if params is None:
        params = EntmaxParams(z.alpha)
    if float(params.alpha) != z.alpha:
        raise ParameterError("params.alpha does not match the centered scores")
    lo = 0.0 if lo is None else float(lo)
    hi = bracket_upper(z.n, z.alpha) if hi is None else float(hi)

    f_lo = f_value(z, lo)
    if abs(f_lo) <= params.tol:
        return ThresholdSolution(lo, f_lo, lo, hi, 0, (lo,))
    f_hi = f_value(z, hi)
    if abs(f_hi) <= params.tol:
        return ThresholdSolution(hi, f_hi, lo, hi, 0, (hi,))

    history = []
    tau, f = lo, f_lo
    for it in range(1, int(params.max_iters) + 1):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        tau, f = mid, f_value(z, mid)
        history.append(tau)
        if abs(f) <= params.tol:
            return ThresholdSolution(tau, f, lo, hi, it, tuple(history))
        if f > 0:
            lo = mid
        else:
            hi = mid
    return ThresholdSolution(tau, f, lo, hi, len(history), tuple(history))


def entmax_apply(z, tau):
    """``p = [z - tau]_+^(1/(alpha-1))``; no renormalization."""
    e = 1.0 / (z.alpha - 1.0)
    d = np.maximum(z.values - float(tau), 0.0)
    return Probabilities(np.where(d > 0, d**e, 0.0))


def entmax(s, alpha, mask=None, method="exact", tol=1e-12):
    """Convenience wrapper: center, solve, apply."""
    z = center_scores(s, alpha, mask)
    if method == "exact":
        sol = solve_exact(z)
    elif method == "bisection":
        sol = solve_bisection(z, EntmaxParams(alpha, tol=tol, max_iters=200))
    else:
        raise ParameterError(f"unknown method {method!r}")
    return entmax_apply(z, sol.tau)


def entmax_vjp(p, dP, alpha):
    """Jacobian-transpose product of entmax with respect to the raw scores.

    Returns ``(dS, delta)`` where ``u = p^(2-alpha)`` on the support,
    ``delta = <u, dP> / <u, 1>`` and ``dS = u * (dP - delta)``.
    """
    alpha = check_alpha(alpha)
    p = np.asarray(getattr(p, "values", p), dtype=np.float64)
    dP = np.asarray(dP, dtype=np.float64)
    if p.shape != dP.shape:
        raise ParameterError("p and dP must have the same shape")
    on = p > 0
    if not on.any():
        raise InvalidDistributionError("p has no positive entry")
    u = np.where(on, np.where(on, p, 1.0) ** (2.0 - alpha), 0.0)
    delta = float(np.dot(u, dP) / u.sum())
    return u * (dP - delta), delta
