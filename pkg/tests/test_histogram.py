import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from histmax.entmax import CenteredScores, center_rows, center_scores, exact_tau_rows, f_eval, solve_exact
from histmax.errors import EmptyRowError, ParameterError
from histmax.histogram import (
    Histogram,
    build_histogram,
    f_h_eval,
    histogram_rows,
    refine_bracket,
    solve_histogram,
    solve_histogram_rows,
)
from oracles import naive_bins, tau_brent


def H(counts, variant="left"):
    counts = np.asarray(counts, dtype=np.int64)
    return Histogram(counts, len(counts), variant)


def test_build_examples():
    z = CenteredScores(np.array([1.0, 0.6, 0.2, -0.3]), 2.0)
    np.testing.assert_array_equal(build_histogram(z, 4).counts, [1, 0, 1, 1])
    np.testing.assert_array_equal(build_histogram(CenteredScores(np.array([1.0]), 2.0), 4).counts, [0, 0, 0, 1])
    z = CenteredScores(np.array([1.0, -0.1, -5]), 2.0)
    np.testing.assert_array_equal(build_histogram(z, 8).counts, [0] * 7 + [1])


def test_build_rejects_few_bins():
    with pytest.raises(ParameterError):
        build_histogram(CenteredScores(np.array([1.0]), 2.0), 1)
    with pytest.raises(ParameterError):
        build_histogram(CenteredScores(np.array([1.0]), 2.0), 4, variant="median")


@given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-2, 1)), st.integers(2, 40))
def test_histogram_rows_matches_naive(z, B):
    np.testing.assert_array_equal(histogram_rows(z[None, :], B)[0], naive_bins(z, B))


def test_f_h_examples():
    h = H([1, 0, 1, 1])
    assert f_h_eval(h, 0.0, 2) == pytest.approx(0.25)
    assert f_h_eval(h, 0.75, 2) == -1.0
    for tau in (0.75, 0.8, 1.0):
        assert f_h_eval(H([3, 1, 4, 1, 5, 9, 2, 6]), max(tau, 7 / 8), 1.5) == -1.0


def test_solve_examples():
    sol = solve_histogram(H([1, 0, 1, 1]), 2)
    assert sol.tau_h == pytest.approx(0.125)
    assert sol.active_bin_floor == 0
    assert sol.prefix_sums[:2] == pytest.approx((2.0, 1.25))
    assert sol.bracket == (0.0, 0.25)
    tau_star = solve_exact(CenteredScores(np.array([1.0, 0.6, 0.2]), 2.0)).tau
    assert tau_star == pytest.approx(0.3)
    assert 0 <= tau_star - sol.tau_h < 0.25

    sol = solve_histogram(H([0, 0, 0, 1]), 2)
    assert sol.tau_h == 0.0 and sol.bracket == (0.0, 0.25)

    sol = solve_histogram(H([0] * 7 + [2]), 2)
    assert sol.active_bin_floor == 3
    assert sol.bracket == (0.375, 0.5)
    assert sol.tau_h == pytest.approx(0.375)
    assert 0.5 - sol.tau_h <= 1 / 8  # exactly h here


def test_refine_bracket_examples():
    sol = solve_histogram(H([1, 0, 1, 1]), 2)
    assert refine_bracket(sol) == (0.125, 0.375)
    lo, hi = refine_bracket(solve_histogram(H([0] * 7 + [1]), 2))
    assert (lo, hi) == (0.0, 0.125)
    assert lo <= 0.3 <= refine_bracket(sol)[1]


def test_empty_histogram_rejected():
    with pytest.raises(EmptyRowError):
        solve_histogram(H([0, 0, 0, 0]), 2)


@pytest.mark.parametrize("alpha", [1.5, 2.0])
@pytest.mark.parametrize("B", [4, 8, 16])
def test_bound_on_gaussian_rows(alpha, B, rng):
    for n in (1, 2, 17, 300, 4096):
        Z = center_rows(rng.standard_normal((40, n)) * rng.uniform(0.2, 5), alpha)
        tau_h = solve_histogram_rows(histogram_rows(Z, B), alpha)[0]
        gap = exact_tau_rows(Z, alpha) - tau_h
        assert np.all(gap >= -1e-12)
        assert np.all(gap <= 1.0 / B + 1e-12)
        # never prunes a true-support entry
        tau_star = exact_tau_rows(Z, alpha)
        assert np.all((Z > tau_h[:, None]) >= (Z > tau_star[:, None]))


@pytest.mark.parametrize("alpha", [1.25, 3.0])
def test_bound_general_alpha(alpha, rng):
    B = 8
    Z = center_rows(rng.standard_normal((30, 500)), alpha)
    tau_h = solve_histogram_rows(histogram_rows(Z, B), alpha)[0]
    tau_star = np.array([tau_brent(z, alpha) for z in Z])
    gap = tau_star - tau_h
    assert np.all(gap >= -1e-9) and np.all(gap <= 1 / B + 1e-9)


@settings(max_examples=60)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(-3, 3)), st.sampled_from([1.5, 2.0]))
def test_sandwich(s, alpha):
    z = center_scores(s, alpha)
    h = build_histogram(z, 8)
    for tau in np.linspace(0, 1, 101):
        assert f_h_eval(h, tau, alpha) <= f_eval(z, tau)[0] + 1e-12


def test_many_bins_converge(rng):
    for alpha in (1.5, 2.0):
        Z = center_rows(rng.standard_normal((5, 2000)), alpha)
        B = 2**16
        tau_h = solve_histogram_rows(histogram_rows(Z, B), alpha)[0]
        assert np.all(np.abs(exact_tau_rows(Z, alpha) - tau_h) <= 2 / B)


def _bisect_f_h(counts, alpha):
    h = H(counts)
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f_h_eval(h, mid, alpha) > 0 else (lo, mid)
    return lo


@settings(max_examples=80)
@given(arrays(np.int64, st.sampled_from([4, 8, 16]), elements=st.integers(0, 50)), st.sampled_from([1.5, 2.0]))
def test_doubling_counts_raises_threshold(counts, alpha):
    counts[-1] += 1
    one = solve_histogram(H(counts), alpha)
    two = solve_histogram(H(2 * counts), alpha)
    assert two.tau_h >= one.tau_h - 1e-12
    # more mass moves the root right, so the floor cannot move left
    assert two.active_bin_floor >= one.active_bin_floor
    for sol, c in ((one, counts), (two, 2 * counts)):
        ref = _bisect_f_h(c, alpha)
        if ref > 0:
            assert sol.tau_h == pytest.approx(ref, abs=1e-9)


def test_variants_shift_edges(rng):
    z = center_scores(rng.standard_normal(500), 2.0)
    taus = {v: solve_histogram(build_histogram(z, 8, v), 2.0).tau_h for v in ("left", "centered", "right")}
    assert taus["left"] <= taus["centered"] <= taus["right"]
    right = taus["right"]
    assert right >= solve_exact(z).tau - 1e-12  # right edges over-estimate
