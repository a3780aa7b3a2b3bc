"""B-bin histogram of centered scores and the discretized threshold problem.

Scores in [0, 1] go to bin ``min(floor(B z), B - 1)``; negative scores can
never be active and are dropped. Each bin is then represented by one value,
its left edge ``k / B`` by default, which makes the discretized root a lower
bound on the exact one, within one bin width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entmax import check_alpha
from .errors import EmptyRowError, ParameterError

VARIANT_OFFSETS = {"left": 0.0, "right": 1.0, "centered": 0.5}
GENERAL_TOL = 1e-10


def _check_bins(B):
    B = int(B)
    if B < 2:
        raise ParameterError(f"need at least 2 bins, got {B}")
    return B


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    bins: int
    variant: str = "left"

    @property
    def width(self):
        return 1.0 / self.bins

    @property
    def edges(self):
        """Representative value of each bin."""
        return (np.arange(self.bins) + VARIANT_OFFSETS[self.variant]) / self.bins

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class HistogramSolution:
    tau_h: float
    active_bin_floor: int
    prefix_sums: tuple
    bins: int
    bracket: tuple

    @property
    def width(self):
        return 1.0 / self.bins


def bin_index(z, B):
    """Bin of each score; -1 for scores below zero or masked."""
    z = np.asarray(z, dtype=np.float64)
    idx = np.minimum(np.floor(B * np.where(z >= 0, z, 0.0)), B - 1).astype(np.int64)
    return np.where(z >= 0, idx, -1)


def histogram_rows(Z, B):
    """Counts for every row of a 2-D array of centered scores, shape (rows, B)."""
    B = _check_bins(B)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    idx = bin_index(Z, B)
    flat = idx + B * np.arange(Z.shape[0])[:, None]
    flat = flat[idx >= 0]
    return np.bincount(flat, minlength=Z.shape[0] * B).reshape(Z.shape[0], B).astype(np.int64)


def build_histogram(z, B, variant="left"):
    if variant not in VARIANT_OFFSETS:
        raise ParameterError(f"unknown binning variant {variant!r}")
    values = getattr(z, "values", z)
    return Histogram(histogram_rows(values, B)[0], _check_bins(B), variant)


def f_h_eval(H, tau, alpha):
    """``f_h(tau) = -1 + sum_k H_k [edge_k - tau]_+^(1/(alpha-1))``."""
    alpha = check_alpha(alpha)
    d = np.maximum(H.edges - float(tau), 0.0)
    return float(np.sum(H.counts * np.where(d > 0, d ** (1.0 / (alpha - 1.0)), 0.0)) - 1.0)


def _f_h_rows(counts, edges, tau, e):
    d = np.maximum(edges[None, :] - tau[:, None], 0.0)
    return np.sum(counts * np.where(d > 0, d**e, 0.0), axis=-1) - 1.0


def _edge_values(counts, edges, alpha):
    """f_h at every bin edge via suffix sums, O(B) per row (alpha in {1.5, 2})."""
    H = counts.astype(np.float64)
    # suffix over bins strictly above k
    def above(x):
        c = np.cumsum(x[:, ::-1], axis=-1)[:, ::-1]
        return np.concatenate([c[:, 1:], np.zeros((x.shape[0], 1))], axis=-1)

    S0 = above(H)
    S1 = above(H * edges)
    if alpha == 2.0:
        return S1 - edges * S0 - 1.0
    S2 = above(H * edges**2)
    return S2 - 2.0 * edges * S1 + edges**2 * S0 - 1.0


def _largest_nonneg_edge(counts, edges, alpha):
    """Index of the largest edge with f_h >= 0, or -1 if none."""
    R, B = counts.shape
    if alpha in (1.5, 2.0):
        F = _edge_values(counts, edges, alpha)
        nonneg = F >= 0
        last = B - 1 - np.argmax(nonneg[:, ::-1], axis=-1)
        return np.where(nonneg.any(axis=-1), last, -1)
    # f_h is non-increasing in tau, so binary search over edge indices
    e = 1.0 / (alpha - 1.0)
    lo = np.full(R, -1)
    hi = np.full(R, B - 1)  # f_h(edge[B-1]) == -1 always
    while np.any(hi - lo > 1):
        mid = (lo + hi) // 2
        mid_c = np.maximum(mid, 0)
        ok = _f_h_rows(counts, edges, edges[mid_c], e) >= 0
        move = hi - lo > 1
        lo = np.where(move & ok, mid, lo)
        hi = np.where(move & ~ok, mid, hi)
    return lo


def solve_histogram_rows(counts, alpha, variant="left"):
    """Histogram threshold for each row of a (rows, B) count array.

    Returns ``(tau_h, floor, lo, hi, S0, S1, S2)`` as arrays. The bracket is
    the interval between the largest edge with ``f_h >= 0`` and the next
    edge; bins at the floor contribute nothing inside it. When no edge is
    non-negative the root lies below the first edge and is clipped at zero.
    """
    alpha = check_alpha(alpha)
    counts = np.atleast_2d(np.asarray(counts, dtype=np.int64))
    R, B = counts.shape
    B = _check_bins(B)
    if np.any(counts.sum(axis=-1) < 1):
        raise EmptyRowError("histogram has no counts")
    edges = (np.arange(B) + VARIANT_OFFSETS[variant]) / B
    k = _largest_nonneg_edge(counts, edges, alpha)
    found = k >= 0
    kc = np.maximum(k, 0)
    lo = np.where(found, edges[kc], 0.0)
    hi_edge = np.where(found, np.minimum(kc + 1, B - 1), 0)
    hi = edges[hi_edge]
    hi = np.where(hi > lo, hi, lo + 1.0 / B)
    active = edges[None, :] > lo[:, None]
    H = np.where(active, counts, 0).astype(np.float64)
    S0 = H.sum(axis=-1)
    S1 = (H * edges).sum(axis=-1)
    S2 = (H * edges**2).sum(axis=-1)

    S0_safe = np.where(S0 > 0, S0, 1.0)
    if alpha == 2.0:
        tau = np.where(S0 > 0, (S1 - 1.0) / S0_safe, lo)
    elif alpha == 1.5:
        disc = np.maximum(S1 * S1 - S0 * (S2 - 1.0), 0.0)
        tau = np.where(S0 > 0, (S1 - np.sqrt(disc)) / S0_safe, lo)
    else:
        tau = _bisect_rows(counts, edges, lo.copy(), hi.copy(), 1.0 / (alpha - 1.0))
    tau = np.clip(tau, lo, hi)
    return tau, np.where(found, k, 0), lo, hi, S0, S1, S2


def _bisect_rows(counts, edges, lo, hi, e, max_iters=200):
    tau = 0.5 * (lo + hi)
    done = np.zeros(len(lo), dtype=bool)
    for _ in range(max_iters):
        f = _f_h_rows(counts, edges, tau, e)
        done |= np.abs(f) <= GENERAL_TOL
        if done.all():
            break
        lo = np.where(~done & (f > 0), tau, lo)
        hi = np.where(~done & (f <= 0), tau, hi)
        tau = np.where(done, tau, 0.5 * (lo + hi))
    # no sign change inside means the root is at or below the floor
    return np.where(_f_h_rows(counts, edges, lo, e) < 0, lo, tau)


def solve_histogram(H, alpha):
    tau, k, lo, hi, S0, S1, S2 = solve_histogram_rows(H.counts[None, :], alpha, H.variant)
    return HistogramSolution(
        tau_h=float(tau[0]),
        active_bin_floor=int(k[0]),
        prefix_sums=(float(S0[0]), float(S1[0]), float(S2[0])),
        bins=H.bins,
        bracket=(float(lo[0]), float(hi[0])),
    )


def refine_bracket(sol):
    """Interval ``[tau_h, tau_h + h]`` guaranteed to hold the exact threshold."""
    return sol.tau_h, sol.tau_h + sol.width
