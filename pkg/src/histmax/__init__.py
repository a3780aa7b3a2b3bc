"""Histogram-initialized alpha-entmax thresholds and block-sparse tiled attention."""

from .attention import (
    AttentionGradients,
    AttentionProblem,
    AttentionResult,
    backward,
    block_sparsity,
    compute_delta,
    dense_reference,
    forward,
)
from .bitpack import (
    FlushAccumulator,
    PackedBlockMask,
    PackedHistogramAcc,
    acc_extract,
    acc_increment,
    capacity,
    flush_schedule,
    mask_iter,
    mask_set,
)
from .entmax import (
    CenteredScores,
    EntmaxParams,
    Probabilities,
    ThresholdSolution,
    center_scores,
    entmax,
    entmax_apply,
    entmax_vjp,
    f_eval,
    solve_bisection,
    solve_exact,
)
from .errors import *  # noqa: F401,F403
from .histogram import Histogram, HistogramSolution, build_histogram, f_h_eval, refine_bracket, solve_histogram
from .hybrid import SolverTrace, hybrid_solve, solver_bench
from .rng import Xoshiro256
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"
