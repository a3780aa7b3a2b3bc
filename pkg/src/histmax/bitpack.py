"""Bit-level structures: packed bin counters and the packed block mask.

A packed accumulator splits one ``w``-bit word into ``B`` counters of
``b = w / B`` bits, bin 0 in the least significant bits. The block mask
stores one bit per (query tile, key tile) pair, 32 key tiles per uint32 word.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AccumulatorOverflowError, ParameterError, TensorFormatError

WORD_BITS = (32, 64, 128)
NUMPY_WORDS = {32: np.uint32, 64: np.uint64}


@dataclass(frozen=True)
class PackedHistogramAcc:
    word: int = 0
    bins: int = 8
    width: int = 64

    def __post_init__(self):
        if self.width not in WORD_BITS:
            raise ParameterError(f"word width must be one of {WORD_BITS}, got {self.width}")
        if self.bins < 1 or self.width % self.bins:
            raise ParameterError(f"{self.bins} bins do not divide a {self.width}-bit word")
        if self.bits_per_bin < 4:
            raise ParameterError("need at least 4 bits per bin")
        if not 0 <= self.word < (1 << self.width):
            raise ParameterError("word does not fit the declared width")

    @property
    def bits_per_bin(self):
        return self.width // self.bins

    @property
    def bin_max(self):
        return (1 << self.bits_per_bin) - 1

    def limbs(self):
        """Little-endian 64-bit limbs (two for a 128-bit accumulator)."""
        n = max(self.width // 64, 1)
        return tuple((self.word >> (64 * i)) & ((1 << 64) - 1) for i in range(n))


def acc_extract(acc):
    b = acc.bits_per_bin
    return np.array([(acc.word >> (k * b)) & acc.bin_max for k in range(acc.bins)], dtype=np.int64)


def acc_increment(acc, bin):
    if not 0 <= bin < acc.bins:
        raise ParameterError(f"bin {bin} out of range for {acc.bins} bins")
    shift = acc.bits_per_bin * bin
    if (acc.word >> shift) & acc.bin_max == acc.bin_max:
        raise AccumulatorOverflowError(f"bin {bin} is saturated at {acc.bin_max}")
    return PackedHistogramAcc(acc.word + (1 << shift), acc.bins, acc.width)


def capacity(w, B, B_c):
    """Keys one query tile can count before a flush: ``B_c * (2^(w/B) - 1)``."""
    if w % B:
        raise ParameterError(f"{B} bins do not divide a {w}-bit word")
    return B_c * ((1 << (w // B)) - 1)


def flush_schedule(T_c, b):
    """Flushes needed for ``T_c`` key tiles when a counter holds ``2^b - 1``."""
    if T_c < 1 or b < 1:
        raise ParameterError("T_c and b must be positive")
    return math.ceil(T_c / ((1 << b) - 1))


def packed_increments(bin_idx, b, width=64):
    """``1 << (b * k)`` per entry, zero where ``bin_idx`` is negative."""
    dt = NUMPY_WORDS[width]
    k = np.asarray(bin_idx)
    shift = (np.maximum(k, 0) * b).astype(dt)
    return np.where(k >= 0, dt(1) << shift, dt(0)).astype(dt)


def extract_words(words, B, b):
    """Sum shift-and-mask counts over the last axis: (..., C) words -> (..., B) counts."""
    words = np.asarray(words)
    dt = words.dtype.type
    mask = dt((1 << b) - 1)
    out = [((words >> dt(k * b)) & mask).astype(np.int64).sum(axis=-1) for k in range(B)]
    return np.stack(out, axis=-1)


class FlushAccumulator:
    """Wide per-row counts that packed words drain into."""

    def __init__(self, rows, bins):
        self.counts = np.zeros((rows, bins), dtype=np.int64)
        self.flushes = 0

    def flush(self, words, b):
        self.counts += extract_words(words, self.counts.shape[1], b)
        self.flushes += 1


# --- population count and n-th set bit -------------------------------------

_POPC8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)
_NTH8 = [[p for p in range(8) if (i >> p) & 1] for i in range(256)]


def popcount(x):
    return int(x).bit_count()


def popcount_portable(x):
    x = int(x)
    total = 0
    while x:
        total += int(_POPC8[x & 0xFF])
        x >>= 8
    return total


def find_nth_set(x, n):
    """Position of the ``n``-th (0-based) set bit of ``x``, or -1."""
    x = int(x)
    for _ in range(n):
        x &= x - 1
    if x == 0:
        return -1
    return (x & -x).bit_length() - 1


def find_nth_set_portable(x, n):
    x = int(x)
    base = 0
    while x:
        byte = x & 0xFF
        c = int(_POPC8[byte])
        if n < c:
            return base + _NTH8[byte][n]
        n -= c
        x >>= 8
        base += 8
    return -1


# --- block mask -------------------------------------------------------------


@dataclass
class TraversalStats:
    words: int = 0
    visits: int = 0


class PackedBlockMask:
    """One bit per (query tile, key tile), 32 key tiles per uint32."""

    def __init__(self, t_r, t_c, words=None):
        self.t_r = int(t_r)
        self.t_c = int(t_c)
        shape = (self.t_r, -(-self.t_c // 32))
        if words is None:
            words = np.zeros(shape, dtype=np.uint32)
        words = np.asarray(words, dtype=np.uint32)
        if words.shape != shape:
            raise ParameterError(f"mask words must have shape {shape}, got {words.shape}")
        self.words = words

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=bool)
        t_r, t_c = dense.shape
        mask = cls(t_r, t_c)
        padded = np.zeros((t_r, mask.words.shape[1] * 32), dtype=np.uint64)
        padded[:, :t_c] = dense
        weights = np.uint64(1) << np.arange(32, dtype=np.uint64)
        mask.words[:] = (padded.reshape(t_r, -1, 32) * weights).sum(axis=-1).astype(np.uint32)
        return mask

    def _check(self, i, j):
        if not (0 <= i < self.t_r and 0 <= j < self.t_c):
            raise ParameterError(f"block ({i}, {j}) outside a {self.t_r} x {self.t_c} grid")

    def set(self, i, j):
        self._check(i, j)
        self.words[i, j >> 5] |= np.uint32(1 << (j & 31))
        return self

    def test(self, i, j):
        self._check(i, j)
        return bool((int(self.words[i, j >> 5]) >> (j & 31)) & 1)

    def to_dense(self):
        bits = (self.words[:, :, None] >> np.arange(32, dtype=np.uint32)) & np.uint32(1)
        return bits.reshape(self.t_r, -1)[:, : self.t_c].astype(bool)

    def popcount(self, row=None):
        words = self.words if row is None else self.words[row]
        return int(np.bitwise_count(words).sum())

    def transpose(self):
        return PackedBlockMask.from_dense(self.to_dense().T)

    @property
    def nbytes(self):
        return int(self.words.nbytes)

    def to_bytes(self):
        return struct.pack("<II", self.t_r, self.t_c) + self.words.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 8:
            raise TensorFormatError("mask header truncated", offset=len(data))
        t_r, t_c = struct.unpack_from("<II", data, 0)
        n_words = -(-t_c // 32)
        need = 8 + 4 * t_r * n_words
        if len(data) != need:
            raise TensorFormatError(f"mask payload is {len(data) - 8} bytes, expected {need - 8}", offset=8)
        words = np.frombuffer(data, dtype="<u4", offset=8).reshape(t_r, n_words)
        mask = cls(t_r, t_c, words.astype(np.uint32))
        if t_c % 32 and np.any(mask.words[:, -1] >> np.uint32(t_c % 32)):
            raise TensorFormatError("bits set beyond the last key tile", offset=8)
        return mask

    def __eq__(self, other):
        return (
            isinstance(other, PackedBlockMask)
            and (self.t_r, self.t_c) == (other.t_r, other.t_c)
            and np.array_equal(self.words, other.words)
        )

    def __repr__(self):
        return f"PackedBlockMask({self.t_r}x{self.t_c}, active={self.popcount()})"


def mask_set(mask, i, j):
    return mask.set(i, j)


def mask_iter(mask, row, stats=None):
    """Active key-tile indices of one row, ascending; work scales with set bits."""
    if not 0 <= row < mask.t_r:
        raise ParameterError(f"row {row} outside mask with {mask.t_r} rows")
    for m, word in enumerate(mask.words[row].tolist()):
        if stats is not None:
            stats.words += 1
        for t in range(popcount(word)):
            if stats is not None:
                stats.visits += 1
            yield 32 * m + find_nth_set(word, t)
