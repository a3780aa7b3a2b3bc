"""Tiled alpha-entmax attention on CPU.

The forward pass streams (B_r x B_c) score tiles and never holds more than
one tile of scores per query tile:

1. row maxima,
2. packed per-row histograms of the centered scores, flushed into wide
   counters before any bin field can overflow, then the histogram threshold,
3. refinement passes that accumulate ``(f, f', f'')`` at the current
   threshold; the block mask is recorded on each row's final pass,
4. ``O += P V`` over mask-active tiles only.

Backward recomputes scores from the stored row maxima and thresholds and
touches only mask-active tiles: a key-major sweep for dK and dV over the
transposed mask, and a query-major sweep for dQ.

Thresholds live on the centered scale ``z = (alpha - 1) s - ((alpha - 1) m - 1)``
so that ``p = [z - tau]_+^(1/(alpha-1))`` in every phase.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bitpack import (
    FlushAccumulator,
    PackedBlockMask,
    PackedHistogramAcc,
    mask_iter,
    packed_increments,
)
from .entmax import center_rows, check_alpha, f_sums
from .errors import ParameterError, SizeError
from .histogram import bin_index, solve_histogram_rows
from .hybrid import _iterate, reference_tau_rows

DENSE_CAP = 4096
WORD_BITS = 64
MAX_EXTRA_PASSES = 50


@dataclass
class AttentionProblem:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    alpha: float = 1.5
    scale: float | None = None
    causal: bool = False
    tiles: tuple = (16, 16)
    bins: int = 8
    refine_iters: int = 2
    tol: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        self.alpha = check_alpha(self.alpha)
        Q, K, V = (np.asarray(x) for x in (self.Q, self.K, self.V))
        if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
            raise ParameterError("Q, K, V must be matrices")
        if Q.shape[0] < 1 or Q.shape[1] < 1:
            raise ParameterError("need n >= 1 and d >= 1")
        if K.shape != Q.shape or V.shape[0] != Q.shape[0]:
            raise ParameterError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
        for name, x in (("Q", Q), ("K", K), ("V", V)):
            if not np.all(np.isfinite(x)):
                raise ParameterError(f"{name} has non-finite entries")
        self.Q, self.K, self.V = Q, K, V
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(Q.shape[1])
        if not np.isfinite(self.scale):
            raise ParameterError("scale must be finite")
        B_r, B_c = (int(t) for t in self.tiles)
        if B_r < 1 or B_c < 1:
            raise ParameterError("tile sizes must be >= 1")
        self.tiles = (B_r, B_c)
        # validates that the bins fit a packed word
        PackedHistogramAcc(0, int(self.bins), WORD_BITS)
        if int(self.refine_iters) < 0:
            raise ParameterError("refine_iters must be >= 0")
        if not self.tol > 0:
            raise ParameterError("tol must be positive")

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def d(self):
        return self.Q.shape[1]

    @property
    def grid(self):
        """``(T_r, T_c)``: tile counts, ragged tails included."""
        B_r, B_c = self.tiles
        return -(-self.n // B_r), -(-self.n // B_c)

    @property
    def out_dtype(self):
        dt = np.result_type(self.Q, self.K, self.V)
        return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


@dataclass
class AttentionStats:
    block_sparsity: float = 0.0
    blocks_visited_fwd: int = 0
    blocks_visited_bwd: int = 0
    blocks_visited_delta: int = 0
    flushes: int = 0
    refine_passes: int = 0
    times: dict = field(default_factory=dict)

    def as_dict(self):
        out = {k: getattr(self, k) for k in (
            "block_sparsity", "blocks_visited_fwd", "blocks_visited_bwd",
            "blocks_visited_delta", "flushes", "refine_passes")}
        out.update({f"time_{k}": v for k, v in self.times.items()})
        return out


@dataclass
class AttentionResult:
    O: np.ndarray
    tau: np.ndarray
    mask: PackedBlockMask
    stats: AttentionStats
    row_max: np.ndarray
    P: np.ndarray | None = None  # dense reference only


@dataclass
class AttentionGradients:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    delta: np.ndarray


# --- tile helpers -------------------------------------------------------------


class _Tiler:
    """Float64 views and per-tile score recomputation for one problem."""

    def __init__(self, p: AttentionProblem):
        self.p = p
        self.Q = np.asarray(p.Q, dtype=np.float64)
        self.K = np.asarray(p.K, dtype=np.float64)
        self.V = np.asarray(p.V, dtype=np.float64)
        self.B_r, self.B_c = p.tiles
        self.T_r, self.T_c = p.grid
        self.a1 = p.alpha - 1.0
        self.e = 1.0 / self.a1

    def rows(self, i):
        return slice(i * self.B_r, min((i + 1) * self.B_r, self.p.n))

    def cols(self, j):
        return slice(j * self.B_c, min((j + 1) * self.B_c, self.p.n))

    def key_tiles(self, i):
        """Addressable key tiles of query tile ``i``."""
        if not self.p.causal:
            return range(self.T_c)
        last_row = self.rows(i).stop - 1
        return range(min(last_row // self.B_c + 1, self.T_c))

    def scores(self, i, j):
        r, c = self.rows(i), self.cols(j)
        S = self.p.scale * (self.Q[r] @ self.K[c].T)
        if self.p.causal and c.stop - 1 > r.start:
            ri = np.arange(r.start, r.stop)[:, None]
            ci = np.arange(c.start, c.stop)[None, :]
            S = np.where(ci > ri, -np.inf, S)
        return S

    def centered(self, i, j, m):
        """Centered tile; the row maximum maps to exactly 1."""
        S = self.scores(i, j)
        Z = self.a1 * S - (self.a1 * m[:, None] - 1.0)
        return np.where(S == m[:, None], 1.0, Z)

    def probs(self, Z, tau):
        d = Z - tau[:, None]
        on = d > 0
        return np.where(on, np.where(on, d, 0.0) ** self.e, 0.0), on

    def visible(self, i):
        r = self.rows(i)
        if self.p.causal:
            return np.arange(r.start, r.stop) + 1.0
        return np.full(r.stop - r.start, float(self.p.n))


def _run(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("ATN_THREADS", "1") or 1)
    return max(int(threads), 1)


# --- forward phases -------------------------------------------------------------


def _row_max(t: _Tiler, i):
    rows = t.rows(i)
    m = np.full(rows.stop - rows.start, -np.inf)
    for j in t.key_tiles(i):
        m = np.maximum(m, t.scores(i, j).max(axis=1))
    return m


def _histograms(t: _Tiler, i, m):
    """Packed per-position histograms drained into wide per-row counts."""
    B = int(t.p.bins)
    b = WORD_BITS // B
    period = (1 << b) - 1
    R = t.rows(i).stop - t.rows(i).start
    words = np.zeros((R, t.B_c), dtype=np.uint64)
    acc = FlushAccumulator(R, B)
    pending = 0
    for j in t.key_tiles(i):
        idx = bin_index(t.centered(i, j, m), B)
        if idx.shape[1] < t.B_c:
            idx = np.pad(idx, ((0, 0), (0, t.B_c - idx.shape[1])), constant_values=-1)
        words += packed_increments(idx, b, WORD_BITS)
        pending += 1
        if pending == period:
            acc.flush(words, b)
            words[:] = 0
            pending = 0
    if pending:
        acc.flush(words, b)
    return acc.counts, acc.flushes


def row_histograms(p: AttentionProblem, i):
    """Phases 1-2 for one query tile: ``(counts, flushes)``."""
    t = _Tiler(p)
    if not 0 <= i < t.T_r:
        raise ParameterError(f"query tile {i} out of range")
    return _histograms(t, i, _row_max(t, i))


def _query_tile(t: _Tiler, i):
    p = t.p
    rows = t.rows(i)
    R = rows.stop - rows.start
    clock = [time.perf_counter()]
    times = {}

    def lap(name):
        now = time.perf_counter()
        times[name] = now - clock[0]
        clock[0] = now

    m = _row_max(t, i)
    lap("max")
    counts, flushes = _histograms(t, i, m)

    tau_h = solve_histogram_rows(counts, p.alpha)[0]
    upper = 1.0 - t.visible(i) ** (1.0 - p.alpha)
    hi = np.maximum(np.minimum(tau_h + 1.0 / p.bins, upper), tau_h)
    lap("histogram")

    tiles = list(t.key_tiles(i))
    active = np.zeros((R, t.T_c), dtype=bool)
    passes = [0]

    def evaluate(tau, live):
        passes[0] += 1
        g = np.zeros((3, int(live.sum())))
        tl = tau[live]
        for j in tiles:
            Z = t.centered(i, j, m)[live]
            g += f_sums(Z, tl, p.alpha)
            active[live, j] = (Z > tl[:, None]).any(axis=1)
        return g[0], g[1], g[2]

    max_iters = int(p.refine_iters) + MAX_EXTRA_PASSES
    taus, res, codes, _, _, count, done = _iterate(
        evaluate, R, p.alpha, tau_h, tau_h, hi, float(p.tol), max_iters
    )
    tau = taus[count - 1, np.arange(R)]
    lap("refine")

    O = np.zeros((R, t.V.shape[1]))
    bits = active.any(axis=0)
    visits = 0
    for j in np.flatnonzero(bits):
        P, _ = t.probs(t.centered(i, j, m), tau)
        O += P @ t.V[t.cols(j)]
        visits += 1
    lap("output")
    return O, tau, m, bits, flushes, passes[0], visits, times


def forward(p: AttentionProblem) -> AttentionResult:
    t = _Tiler(p)
    outs = _run(lambda i: _query_tile(t, i), range(t.T_r), resolve_threads(p.threads))

    O = np.empty((p.n, p.V.shape[1]))
    tau = np.empty(p.n)
    m = np.empty(p.n)
    mask = PackedBlockMask(t.T_r, t.T_c)
    stats = AttentionStats()
    for i, (Oi, ti, mi, bits, flushes, passes, visits, times) in enumerate(outs):
        for k, v in times.items():
            stats.times[k] = stats.times.get(k, 0.0) + v
        r = t.rows(i)
        O[r], tau[r], m[r] = Oi, ti, mi
        for j in np.flatnonzero(bits):
            mask.set(i, int(j))
        stats.flushes += flushes
        stats.refine_passes = max(stats.refine_passes, passes)
        stats.blocks_visited_fwd += visits
    stats.block_sparsity = block_sparsity(mask, p.causal, tiles=p.tiles, n=p.n)
    return AttentionResult(O.astype(p.out_dtype), tau, mask, stats, m)


def addressable_blocks(t_r, t_c, causal=False, tiles=None, n=None):
    """Tiles that can hold a nonzero probability: all, or on/below the diagonal."""
    if not causal:
        return t_r * t_c
    if tiles is None or n is None:
        return sum(min(i + 1, t_c) for i in range(t_r))
    B_r, B_c = tiles
    return sum(min((min((i + 1) * B_r, n) - 1) // B_c + 1, t_c) for i in range(t_r))


def block_sparsity(mask: PackedBlockMask, causal=False, tiles=None, n=None):
    """Fraction of addressable tiles whose probabilities are all zero.

    Under ``causal`` only tiles on or below the block diagonal are
    addressable; pass ``tiles`` and ``n`` when ``B_r != B_c``.
    """
    total = addressable_blocks(mask.t_r, mask.t_c, causal, tiles, n)
    if total == 0:
        return 0.0
    return 1.0 - mask.popcount() / total


# --- dense oracle -------------------------------------------------------------


def dense_reference(p: AttentionProblem) -> AttentionResult:
    if p.n > DENSE_CAP:
        raise SizeError(f"dense reference is capped at n={DENSE_CAP}, got {p.n}")
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (p.Q, p.K, p.V))
    S = p.scale * (Q @ K.T)
    cmask = np.triu(np.ones((p.n, p.n), dtype=bool), k=1) if p.causal else None
    Z = center_rows(S, p.alpha, cmask)
    tau = reference_tau_rows(Z, p.alpha)
    d = Z - tau[:, None]
    on = d > 0
    P = np.where(on, np.where(on, d, 0.0) ** (1.0 / (p.alpha - 1.0)), 0.0)
    O = P @ V

    B_r, B_c = p.tiles
    T_r, T_c = p.grid
    pad = np.zeros((T_r * B_r, T_c * B_c), dtype=bool)
    pad[: p.n, : p.n] = on
    blocks = pad.reshape(T_r, B_r, T_c, B_c).any(axis=(1, 3))
    mask = PackedBlockMask.from_dense(blocks)
    m = np.where(cmask, -np.inf, S).max(axis=1) if p.causal else S.max(axis=1)
    stats = AttentionStats(block_sparsity=block_sparsity(mask, p.causal, tiles=p.tiles, n=p.n))
    return AttentionResult(O.astype(p.out_dtype), tau, mask, stats, m, P)


# --- backward -----------------------------------------------------------------


def _check_dO(p, dO):
    dO = np.asarray(dO, dtype=np.float64)
    if dO.shape != (p.n, p.V.shape[1]):
        raise ParameterError(f"dO must have shape {(p.n, p.V.shape[1])}, got {dO.shape}")
    return dO


def _block(t, res, i, j, dO):
    """Recompute P, U and dP for one active tile."""
    r = t.rows(i)
    P, on = t.probs(t.centered(i, j, res.row_max[r]), res.tau[r])
    U = np.where(on, np.where(on, P, 1.0) ** (2.0 - t.p.alpha), 0.0)
    dP = dO[r] @ t.V[t.cols(j)].T
    return P, U, dP


def compute_delta(p: AttentionProblem, res: AttentionResult, dO) -> np.ndarray:
    """``delta_i = <u_i, dP_i> / <u_i, 1>`` streamed over mask-active tiles."""
    dO = _check_dO(p, dO)
    t = _Tiler(p)
    num = np.zeros(p.n)
    den = np.zeros(p.n)
    visits = 0
    for i in range(t.T_r):
        r = t.rows(i)
        for j in mask_iter(res.mask, i):
            _, U, dP = _block(t, res, i, j, dO)
            num[r] += (U * dP).sum(axis=1)
            den[r] += U.sum(axis=1)
            visits += 1
    res.stats.blocks_visited_delta = visits
    return num / np.where(den > 0, den, 1.0)


def backward(p: AttentionProblem, res: AttentionResult, dO) -> AttentionGradients:
    """Gradients of ``O`` for an upstream ``dO``.

    ``res`` must come from ``forward`` (or ``dense_reference``) on the same
    problem; a stale result is not detected.
    """
    dO = _check_dO(p, dO)
    t = _Tiler(p)
    delta = compute_delta(p, res, dO)
    dQ = np.zeros((p.n, p.d))
    dK = np.zeros((p.n, p.d))
    dV = np.zeros((p.n, p.V.shape[1]))
    threads = resolve_threads(p.threads)
    mT = res.mask.transpose()

    def key_sweep(j):
        c = t.cols(j)
        visits = 0
        for i in mask_iter(mT, j):
            r = t.rows(i)
            P, U, dP = _block(t, res, i, j, dO)
            dS = U * (dP - delta[r][:, None])
            dK[c] += p.scale * (dS.T @ t.Q[r])
            dV[c] += P.T @ dO[r]
            visits += 1
        return visits

    def query_sweep(i):
        r = t.rows(i)
        visits = 0
        for j in mask_iter(res.mask, i):
            _, U, dP = _block(t, res, i, j, dO)
            dS = U * (dP - delta[r][:, None])
            dQ[r] += p.scale * (dS @ t.K[t.cols(j)])
            visits += 1
        return visits

    v_kv = sum(_run(key_sweep, range(t.T_c), threads))
    v_q = sum(_run(query_sweep, range(t.T_r), threads))
    res.stats.blocks_visited_bwd = v_kv + v_q
    dt = p.out_dtype
    return AttentionGradients(dQ.astype(dt), dK.astype(dt), dV.astype(dt), delta)
