import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histmax.bitpack import (
    FlushAccumulator,
    PackedBlockMask,
    PackedHistogramAcc,
    TraversalStats,
    acc_extract,
    acc_increment,
    capacity,
    extract_words,
    find_nth_set,
    find_nth_set_portable,
    flush_schedule,
    mask_iter,
    mask_set,
    packed_increments,
    popcount,
    popcount_portable,
)
from histmax.errors import AccumulatorOverflowError, ParameterError, TensorFormatError
from oracles import nth_set_bitwise, popcount_bitwise

REFERENCE_WORD = 0x0001000002010400


def test_increment_examples():
    assert acc_increment(PackedHistogramAcc(), 0).word == 1
    assert acc_increment(PackedHistogramAcc(), 7).word == 1 << 56
    acc = PackedHistogramAcc()
    for k, c in enumerate([0, 4, 1, 2, 0, 0, 1, 0]):
        for _ in range(c):
            acc = acc_increment(acc, k)
    assert acc.word == REFERENCE_WORD


def test_extract_examples():
    np.testing.assert_array_equal(acc_extract(PackedHistogramAcc(REFERENCE_WORD)), [0, 4, 1, 2, 0, 0, 1, 0])
    np.testing.assert_array_equal(acc_extract(PackedHistogramAcc(0)), np.zeros(8))


@settings(max_examples=300)
@given(st.sampled_from([(32, 4), (32, 8), (64, 4), (64, 8), (64, 16), (128, 8), (128, 16)]), st.data())
def test_packed_matches_naive(shape, data):
    w, B = shape
    b = w // B
    limit = min((1 << b) - 1, 40)
    bins = data.draw(st.lists(st.integers(0, B - 1), max_size=200))
    naive = np.zeros(B, dtype=np.int64)
    acc = PackedHistogramAcc(0, B, w)
    for k in bins:
        if naive[k] == limit:
            continue
        acc = acc_increment(acc, k)
        naive[k] += 1
    np.testing.assert_array_equal(acc_extract(acc), naive)
    assert acc_extract(acc).sum() <= capacity(w, B, 1) * B


def test_validation_and_overflow():
    for kwargs in ({"width": 48}, {"bins": 3}, {"bins": 32}, {"word": 1 << 64}):
        with pytest.raises(ParameterError):
            PackedHistogramAcc(**kwargs)
    with pytest.raises(ParameterError):
        acc_increment(PackedHistogramAcc(), 8)
    full = PackedHistogramAcc(0xFF, 8, 64)
    with pytest.raises(AccumulatorOverflowError):
        acc_increment(full, 0)
    # neighbouring field is untouched by a saturated one
    assert acc_extract(acc_increment(full, 1))[:2].tolist() == [255, 1]


def test_wide_accumulator_limbs():
    acc = PackedHistogramAcc(0, 8, 128)
    acc = acc_increment(acc, 5)
    lo, hi = acc.limbs()
    assert lo == 0 and hi == 1 << 16
    assert acc.bits_per_bin == 16


def test_capacity_values():
    assert capacity(64, 8, 64) == 16_320
    assert capacity(64, 4, 64) == 4_194_240
    assert capacity(64, 16, 64) == 960
    with pytest.raises(ParameterError):
        capacity(64, 5, 64)


def test_flush_schedule():
    assert flush_schedule(512, 8) == 3
    assert flush_schedule(255, 8) == 1
    assert flush_schedule(256, 8) == 2
    for b in (1, 4, 8, 16):
        assert flush_schedule(1, b) == 1
    with pytest.raises(ParameterError):
        flush_schedule(0, 8)


def test_vectorized_words_and_flushing(rng):
    B, b = 8, 8
    rows, cols, tiles = 5, 16, 700
    words = np.zeros((rows, cols), dtype=np.uint64)
    acc = FlushAccumulator(rows, B)
    naive = np.zeros((rows, B), dtype=np.int64)
    pending = 0
    for _ in range(tiles):
        idx = rng.integers(-1, B, size=(rows, cols))
        words += packed_increments(idx, b)
        for r in range(rows):
            naive[r] += np.bincount(idx[r][idx[r] >= 0], minlength=B)
        pending += 1
        if pending == 255:
            acc.flush(words, b)
            words[:] = 0
            pending = 0
    acc.flush(words, b)
    np.testing.assert_array_equal(acc.counts, naive)
    assert acc.flushes == flush_schedule(tiles, b)


def test_extract_words_32_bit():
    w = packed_increments(np.array([[0, 3, 3, -1]]), 8, width=32)
    assert w.dtype == np.uint32
    np.testing.assert_array_equal(extract_words(w, 4, 8), [[1, 0, 0, 2]])


# --- bit tricks -----------------------------------------------------------------


def test_find_nth_set_exhaustive_16_bit():
    words = np.arange(1 << 16, dtype=np.int64)
    pops = np.bitwise_count(words.astype(np.uint16))
    for x in range(1 << 16):
        ref_bits = [p for p in range(16) if (x >> p) & 1]
        assert popcount(x) == pops[x] == popcount_portable(x)
        for n, pos in enumerate(ref_bits):
            assert find_nth_set(x, n) == pos
            assert find_nth_set_portable(x, n) == pos
        assert find_nth_set(x, len(ref_bits)) == -1
        assert find_nth_set_portable(x, len(ref_bits)) == -1


@given(st.integers(0, 2**64 - 1), st.integers(0, 63))
def test_bit_paths_agree_on_64_bit_words(x, n):
    assert popcount(x) == popcount_portable(x) == popcount_bitwise(x)
    assert find_nth_set(x, n) == find_nth_set_portable(x, n) == nth_set_bitwise(x, n)


# --- block mask -----------------------------------------------------------------


def test_mask_examples():
    m = PackedBlockMask(1, 64)
    mask_set(m, 0, 33)
    assert m.words[0].tolist() == [0, 2]
    assert m.test(0, 33) and not m.test(0, 32)
    assert list(mask_iter(m, 0)) == [33]
    m = PackedBlockMask(1, 32)
    for j in range(32):
        m.set(0, j)
    assert int(m.words[0, 0]) == 0xFFFFFFFF
    m = PackedBlockMask(1, 4, np.array([[0b1010]], dtype=np.uint32))
    assert m.popcount() == 2
    assert list(mask_iter(m, 0)) == [1, 3]


def test_mask_bounds():
    m = PackedBlockMask(2, 40)
    for i, j in ((2, 0), (0, 40), (-1, 0)):
        with pytest.raises(ParameterError):
            m.set(i, j)
    with pytest.raises(ParameterError):
        list(mask_iter(m, 2))


def test_mask_iter_fuzz(rng):
    for _ in range(1000):
        t_r, t_c = int(rng.integers(1, 5)), int(rng.integers(1, 130))
        dense = rng.random((t_r, t_c)) < rng.random()
        m = PackedBlockMask.from_dense(dense)
        np.testing.assert_array_equal(m.to_dense(), dense)
        for i in range(t_r):
            stats = TraversalStats()
            got = list(mask_iter(m, i, stats))
            assert got == np.flatnonzero(dense[i]).tolist()
            assert stats.visits == m.popcount(i) == dense[i].sum()
            assert stats.words == m.words.shape[1]
        # unused high bits of the last word stay clear
        if t_c % 32:
            assert not np.any(m.words[:, -1] >> np.uint32(t_c % 32))


def test_mask_memory_bound():
    for t_r, t_c in ((1, 1), (7, 33), (64, 512), (512, 512)):
        m = PackedBlockMask(t_r, t_c)
        assert m.nbytes == t_r * -(-t_c // 32) * 4
        assert m.nbytes <= t_r * t_c / 8 + 4 * t_r


def test_transpose(rng):
    dense = rng.random((9, 45)) < 0.3
    m = PackedBlockMask.from_dense(dense)
    np.testing.assert_array_equal(m.transpose().to_dense(), dense.T)
    assert m.transpose().transpose() == m


def test_serialization_roundtrip_and_layout(rng):
    dense = rng.random((3, 40)) < 0.5
    m = PackedBlockMask.from_dense(dense)
    blob = m.to_bytes()
    assert blob[:8] == (3).to_bytes(4, "little") + (40).to_bytes(4, "little")
    assert len(blob) == 8 + 3 * 2 * 4
    assert int.from_bytes(blob[8:12], "little") == int(m.words[0, 0])
    assert PackedBlockMask.from_bytes(blob) == m


def test_serialization_errors():
    with pytest.raises(TensorFormatError):
        PackedBlockMask.from_bytes(b"\x01\x00")
    blob = PackedBlockMask(2, 8).to_bytes()
    with pytest.raises(TensorFormatError) as err:
        PackedBlockMask.from_bytes(blob[:-1])
    assert err.value.offset == 8
    bad = bytearray(blob)
    bad[8] = 0xFF  # bits beyond t_c = 8
    bad[9] = 0x01
    with pytest.raises(TensorFormatError):
        PackedBlockMask.from_bytes(bytes(bad))
