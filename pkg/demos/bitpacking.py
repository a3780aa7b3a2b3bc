"""Packed histogram counters and bitset tile traversal.

Run with ``python3 demos/bitpacking.py``.
"""

import numpy as np

from histmax.bitpack import (
    PackedBlockMask,
    PackedHistogramAcc,
    TraversalStats,
    acc_extract,
    acc_increment,
    capacity,
    flush_schedule,
    mask_iter,
)

# Eight 8-bit counters in one 64-bit word; bin 0 lives in the low byte.
acc = PackedHistogramAcc()
for k in [1, 1, 2, 3, 1, 6, 3, 1]:
    acc = acc_increment(acc, k)
print(f"word   = {acc.word:#018x}")
print(f"counts = {acc_extract(acc).tolist()}")

# How many score tiles fit before some counter could overflow?
for w, B in ((64, 4), (64, 8), (64, 16), (128, 8)):
    b = w // B
    print(f"w={w:<3} B={B:<2} b={b:<2} capacity(B_c=64)={capacity(w, B, 64):>10,}  "
          f"flushes for 512 tiles={flush_schedule(512, b)}")

# A sparse mask row: only the set bits are visited.
rng = np.random.default_rng(3)
dense = rng.random((4, 200)) < 0.05
mask = PackedBlockMask.from_dense(dense)
for i in range(4):
    st = TraversalStats()
    cols = list(mask_iter(mask, i, st))
    print(f"row {i}: {st.words} words scanned, {st.visits} tiles visited -> {cols}")
print(f"{mask.nbytes} bytes for {dense.size} tiles")
