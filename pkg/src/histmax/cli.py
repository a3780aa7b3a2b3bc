"""``histmax`` command line: solve, bench-solver, attn, gen, dump.

Every command prints machine-readable output on stdout and exits 0; on
failure it prints one JSON object ``{"error": ..., "message": ...}`` on
stderr and exits 2. Files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import attention as attn
from .bitpack import PackedBlockMask
from .entmax import (
    EntmaxParams,
    bracket_upper,
    center_scores,
    entmax_apply,
    solve_bisection,
    solve_exact,
)
from .errors import EntmaxError, ParameterError, SizeError
from .histogram import build_histogram, solve_histogram
from .hybrid import hybrid_solve, solver_bench
from .rng import Xoshiro256
from .tensorio import atomic_write, decode_header, read_tensor, write_tensor

METHODS = ("exact", "bisection", "hybrid", "histogram+hybrid")

# Frozen per experiment; new metrics are appended, never reordered.
CSV_COLUMNS = {
    "bench-solver": ["experiment", "seed", "n", "alpha", "runs", "method", "iteration", "mae"],
    "attn": [
        "experiment", "seed", "n", "d", "alpha", "block_r", "block_c", "bins", "causal", "qscale",
        "block_sparsity", "blocks_visited_fwd", "blocks_visited_bwd", "addressable_blocks",
        "flushes", "refine_passes", "time_max", "time_histogram", "time_refine", "time_output",
        "time_backward", "max_err_O", "max_err_tau", "mask_match", "fd_max_rel_err",
    ],
}
FD_CAP = 256


def record(experiment, params, metrics, seed):
    return {"experiment": experiment, "params": params, "metrics": metrics, "seed": int(seed)}


def emit(records, fmt, out=None):
    out = out or sys.stdout
    if fmt == "json":
        for r in records:
            out.write(json.dumps(r) + "\n")
        return
    cols = CSV_COLUMNS[records[0]["experiment"]]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        flat = {"experiment": r["experiment"], "seed": r["seed"], **r["params"], **r["metrics"]}
        w.writerow(["" if flat.get(c) is None else _cell(flat[c]) for c in cols])


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    # repr of a float is the shortest round-trip form, same digits as JSON
    return repr(v) if isinstance(v, float) else str(v)


# --- solve ----------------------------------------------------------------------


def cmd_solve(args):
    s = read_tensor(args.input)
    if s.ndim != 1:
        raise ParameterError(f"solve expects a rank-1 tensor, got rank {s.ndim}")
    z = center_scores(s.astype(np.float64), args.alpha)
    params = EntmaxParams(args.alpha, tol=args.tol, max_iters=args.max_iters)
    trace = []
    if args.method == "exact":
        sol = solve_exact(z)
        tau, residual, iterations = sol.tau, sol.residual, 0
    elif args.method == "bisection":
        sol = solve_bisection(z, params)
        tau, residual, iterations = sol.tau, sol.residual, sol.iterations
    else:
        upper = bracket_upper(z.n, z.alpha)
        if args.method == "hybrid":
            init, bracket = 0.5 * upper, (0.0, upper)
        else:
            hs = solve_histogram(build_histogram(z, args.bins), z.alpha)
            init = hs.tau_h
            bracket = (hs.tau_h, max(min(hs.tau_h + hs.width, upper), hs.tau_h))
        tr = hybrid_solve(z, init, bracket, params)
        tau, residual, iterations = tr.final_tau, tr.iterations[-1].residual, tr.steps
        trace = [
            {"tau": it.tau, "residual": it.residual, "step": it.step_kind, "bracket": list(it.bracket)}
            for it in tr.iterations
        ]
    p = entmax_apply(z, tau).values
    out = {
        "method": args.method,
        "alpha": z.alpha,
        "tau": tau,
        "residual": residual,
        "iterations": iterations,
        "probabilities": p.tolist(),
        "trace": trace,
    }
    print(json.dumps(out))


# --- bench-solver -----------------------------------------------------------------


def cmd_bench_solver(args):
    bins = [int(b) for b in args.bins_list.split(",") if b]
    rows = solver_bench(args.n, args.alpha, bins, args.runs, args.seed, args.max_iters)
    params = {"n": args.n, "alpha": args.alpha, "runs": args.runs}
    records = [
        record("bench-solver", {**params, "method": r["method"], "iteration": r["iteration"]},
               {"mae": r["mae"]}, args.seed)
        for r in rows
    ]
    emit(records, args.out)


# --- attn -------------------------------------------------------------------------


def attention_inputs(n, d, seed, qscale=1.0):
    """Gaussian Q, K, V and upstream gradient; Q is the base draw times ``qscale``."""
    gen = Xoshiro256(seed)
    Qb = gen.normals((n, d))
    K = gen.normals((n, d))
    V = gen.normals((n, d))
    dO = gen.normals((n, d))
    return qscale * Qb, K, V, dO


def _fd_spot_check(problem, grads, dO, seed, h=1e-4, probes=3):
    """Central differences of <O, dO> at a few random coordinates of Q, K, V."""
    tight = dict(alpha=problem.alpha, scale=problem.scale, causal=problem.causal,
                 tiles=problem.tiles, bins=problem.bins, tol=1e-13)
    base = {"Q": problem.Q, "K": problem.K, "V": problem.V}
    analytic = {"Q": grads.dQ, "K": grads.dK, "V": grads.dV}
    gen = Xoshiro256(seed ^ 0xF00D)
    worst = 0.0
    for name in ("Q", "K", "V"):
        X = base[name]
        for _ in range(probes):
            idx = (gen.next_u64() % X.shape[0], gen.next_u64() % X.shape[1])
            vals = []
            for sign in (1.0, -1.0):
                Y = X.astype(np.float64).copy()
                Y[idx] += sign * h
                mats = {**base, name: Y}
                O = attn.forward(attn.AttentionProblem(mats["Q"], mats["K"], mats["V"], **tight)).O
                vals.append(float((O * dO).sum()))
            fd = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[name][idx])
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-8))
    return worst


def cmd_attn(args):
    if args.verify and args.n > attn.DENSE_CAP:
        raise SizeError(f"--verify needs n <= {attn.DENSE_CAP}, got {args.n}")
    Q, K, V, dO = attention_inputs(args.n, args.d, args.seed, args.qscale)
    problem = attn.AttentionProblem(
        Q, K, V, alpha=args.alpha, causal=args.causal, tiles=(args.block_r, args.block_c),
        bins=args.bins, threads=attn.resolve_threads(args.threads),
    )
    res = attn.forward(problem)
    t0 = time.perf_counter()
    grads = attn.backward(problem, res, dO)
    t_bwd = time.perf_counter() - t0
    st = res.stats
    T_r, T_c = problem.grid
    addressable = attn.addressable_blocks(T_r, T_c, problem.causal, problem.tiles, problem.n)
    metrics = {
        "block_sparsity": st.block_sparsity,
        "blocks_visited_fwd": st.blocks_visited_fwd,
        "blocks_visited_bwd": st.blocks_visited_bwd,
        "addressable_blocks": int(addressable),
        "flushes": st.flushes,
        "refine_passes": st.refine_passes,
        **{f"time_{k}": v for k, v in st.times.items()},
        "time_backward": t_bwd,
        "max_err_O": None,
        "max_err_tau": None,
        "mask_match": None,
        "fd_max_rel_err": None,
    }
    if args.verify:
        ref = attn.dense_reference(problem)
        metrics["max_err_O"] = float(np.abs(res.O - ref.O).max())
        metrics["max_err_tau"] = float(np.abs(res.tau - ref.tau).max())
        metrics["mask_match"] = bool(res.mask == ref.mask)
        if args.n <= FD_CAP:
            metrics["fd_max_rel_err"] = _fd_spot_check(problem, grads, dO, args.seed)
    if args.mask_out:
        atomic_write(args.mask_out, res.mask.to_bytes())
    params = {
        "n": args.n, "d": args.d, "alpha": args.alpha, "block_r": args.block_r,
        "block_c": args.block_c, "bins": args.bins, "causal": bool(args.causal), "qscale": args.qscale,
    }
    emit([record("attn", params, metrics, args.seed)], args.out)


# --- gen / dump -----------------------------------------------------------------


def cmd_gen(args):
    if args.dist != "gaussian":
        raise ParameterError(f"unknown distribution {args.dist!r}")
    shape = tuple(x for x in (args.heads, args.n, args.d) if x is not None)
    if any(x < 1 for x in shape):
        raise ParameterError("dimensions must be >= 1")
    data = Xoshiro256(args.seed).normals(shape)
    write_tensor(args.out, data.astype(np.float32 if args.dtype == "f32" else np.float64))
    print(json.dumps({"path": args.out, "dims": list(shape), "dtype": args.dtype, "seed": args.seed}))


def cmd_dump(args):
    if args.mask:
        with open(args.path, "rb") as fh:
            m = PackedBlockMask.from_bytes(fh.read())
        print(json.dumps({"path": args.path, "t_r": m.t_r, "t_c": m.t_c, "active": m.popcount(),
                          "rows": [[int(j) for j in np.flatnonzero(r)] for r in m.to_dense()]}))
        return
    a = read_tensor(args.path)
    with open(args.path, "rb") as fh:
        h = decode_header(fh.read(64), args.path)
    x = a.astype(np.float64)
    print(json.dumps({
        "path": args.path, "dtype": "f32" if h.dtype.itemsize == 4 else "f64", "dims": list(h.dims),
        "bytes": h.nbytes + h.payload_bytes, "min": float(x.min()), "max": float(x.max()),
        "mean": float(x.mean()), "std": float(x.std()),
    }))


# --- entry point ----------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="histmax", description="alpha-entmax threshold solvers and tiled attention")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve one score vector")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--method", choices=METHODS, default="exact")
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--tol", type=float, default=1e-6, help="residual tolerance on |f(tau)|")
    s.add_argument("--max-iters", type=int, default=100)
    s.set_defaults(fn=cmd_solve)

    b = sub.add_parser("bench-solver", help="threshold error per iteration")
    b.add_argument("--n", type=int, default=4096)
    b.add_argument("--alpha", type=float, default=1.5)
    b.add_argument("--bins-list", default="4,8,16")
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--max-iters", type=int, default=10)
    b.add_argument("--out", choices=("json", "csv"), default="json")
    b.set_defaults(fn=cmd_bench_solver)

    a = sub.add_parser("attn", help="tiled attention run with block accounting")
    a.add_argument("--n", type=int, default=1024)
    a.add_argument("--d", type=int, default=64)
    a.add_argument("--alpha", type=float, default=1.5)
    a.add_argument("--block-r", type=int, default=64)
    a.add_argument("--block-c", type=int, default=64)
    a.add_argument("--bins", type=int, default=8)
    a.add_argument("--causal", action="store_true")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--qscale", type=float, default=1.0)
    a.add_argument("--verify", action="store_true")
    a.add_argument("--threads", type=int, default=None, help="defaults to $ATN_THREADS, else 1")
    a.add_argument("--mask-out", default=None, help="write the packed block mask here")
    a.add_argument("--out", choices=("json", "csv"), default="json")
    a.set_defaults(fn=cmd_attn)

    g = sub.add_parser("gen", help="write a seeded Gaussian tensor")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, default=None)
    g.add_argument("--heads", type=int, default=None)
    g.add_argument("--dist", default="gaussian")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    d = sub.add_parser("dump", help="print a tensor (or mask) header and summary")
    d.add_argument("path")
    d.add_argument("--mask", action="store_true", help="read a packed block mask file")
    d.set_defaults(fn=cmd_dump)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (EntmaxError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for k in ("offset", "path"):
            if getattr(exc, k, None) is not None:
                err[k] = getattr(exc, k)
        if isinstance(exc, OSError) and exc.filename:
            err["path"] = exc.filename
        sys.stderr.write(json.dumps(err) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
