"""Block sparsity of tiled entmax attention as queries get sharper.

Run with ``python3 demos/sparsity_sweep.py``. Scaling the queries up makes
each row's score distribution peakier, so more score tiles end up with no
probability mass at all and are skipped in both passes.
"""

import numpy as np

from histmax import AttentionProblem, backward, forward
from histmax.rng import Xoshiro256

n, d = 1024, 64
gen = Xoshiro256(0)
Q0, K, V, dO = (gen.normals((n, d)) for _ in range(4))

print(f"{'qscale':>6} {'alpha':>5} {'sparsity':>9} {'fwd':>6} {'bwd':>6} {'passes':>6}")
for alpha in (1.5, 2.0):
    for qscale in (0.5, 1.0, 2.0, 4.0):
        p = AttentionProblem(qscale * Q0, K, V, alpha=alpha, causal=True, tiles=(16, 16))
        r = forward(p)
        backward(p, r, dO)
        st = r.stats
        print(f"{qscale:6.1f} {alpha:5.1f} {st.block_sparsity:9.4f} {st.blocks_visited_fwd:6d} "
              f"{st.blocks_visited_bwd:6d} {st.refine_passes:6d}")

# Mask for the sharpest setting, one character per tile; '.' tiles were never read.
p = AttentionProblem(4.0 * Q0[:256], K[:256], V[:256], alpha=2.0, causal=True, tiles=(16, 16))
dense = forward(p).mask.to_dense()
print()
for i, row in enumerate(dense):
    print("".join("#" if x else ("." if j <= i else " ") for j, x in enumerate(row)))
