import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.stats
from hypothesis import assume, given, settings, strategies as st

from tmlp import stats
from tmlp.stats import (
    BimodalityError, DegenerateError, ExceptionRegime, FiringMatrix, TOKEN_META_DTYPE, bimodal_threshold,
    bootstrap_ci, bootstrap_statistic, conditional_fire_rates, consensus_level, fisher_from_vectors,
    fisher_one_sided, histogram_threshold, hypergeom_log_sf, jaccard, max_offdiagonal, min_offdiagonal,
    paired_t_test, pairwise_jaccard, resample_counts, student_t_sf2, wilcoxon_signed_rank,
)


# ---------------------------------------------------------------------------
# Fisher: exact rational enumeration as oracle

def fisher_oracle(a, b, c, d):
    r1, c1, n = a + b, a + c, a + b + c + d
    num = sum(math.comb(c1, x) * math.comb(n - c1, r1 - x) for x in range(a, min(r1, c1) + 1))
    return Fraction(num, math.comb(n, r1))


@settings(max_examples=300, deadline=None)
@given(*(st.integers(0, 12),) * 4)
def test_fisher_matches_exact_enumeration(a, b, c, d):
    assume(a + b + c + d > 0)
    got = 10.0 ** fisher_one_sided([[a, b], [c, d]])
    assert got == pytest.approx(float(fisher_oracle(a, b, c, d)), abs=1e-12, rel=1e-12)


def test_fisher_tiny_p_stays_in_log_space():
    # 1e6-token table with a strong enrichment: p far below double precision
    lp = fisher_one_sided([[5000, 5000], [5000, 985000]])
    assert lp < -1000 and math.isfinite(lp)
    assert hypergeom_log_sf(0, 10, 10, 100) == 0.0
    assert hypergeom_log_sf(11, 10, 10, 100) == -math.inf


def test_fisher_from_vectors():
    fire = np.array([1, 1, 1, 0, 0, 0, 0, 1], bool)
    mask = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    r = fisher_from_vectors(fire, mask, alpha=0.05)
    assert r.base_rate == 0.5 and r.regime_rate == 0.75 and r.enrichment == 1.5
    assert r.p == pytest.approx(float(fisher_oracle(3, 1, 1, 3)), rel=1e-12)
    assert not r.significant
    none = fisher_from_vectors(np.zeros(8, bool), mask)
    assert math.isnan(none.enrichment)


# ---------------------------------------------------------------------------
# Wilcoxon

def wilcoxon_oracle(diffs):
    """Two-sided p by brute force over all 2^n sign assignments."""
    d = np.asarray([x for x in diffs if x != 0], float)
    ranks = scipy.stats.rankdata(np.abs(d))
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    total = ranks.sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        wp = float(np.dot(signs, ranks))
        hits += min(wp, total - wp) <= w + 1e-9
    return w, hits / 2 ** len(d)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=5, max_size=12))
def test_wilcoxon_exact_matches_enumeration(diffs):
    assume(sum(1 for x in diffs if x != 0) >= 5)
    w, p = wilcoxon_signed_rank(np.array(diffs, float))
    w_ref, p_ref = wilcoxon_oracle(diffs)
    assert w == w_ref
    # the sign-flip null is symmetric, so doubling the lower tail equals the two-sided count
    assert p == pytest.approx(min(1.0, p_ref), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_normal_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.3, 1, 40).round(1)
    y = rng.normal(0, 1, 40).round(1)
    w, p = wilcoxon_signed_rank(np.c_[x, y])
    ref = scipy.stats.wilcoxon(x, y, zero_method="wilcox", correction=False, method="approx")
    assert w == ref.statistic
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=15), rng.normal(size=15)
    w, p = wilcoxon_signed_rank(np.c_[x, y])
    ref = scipy.stats.wilcoxon(x, y, method="exact")
    assert w == ref.statistic and p == pytest.approx(ref.pvalue, rel=1e-12)


def test_wilcoxon_degenerate():
    with pytest.raises(DegenerateError):
        wilcoxon_signed_rank(np.zeros((8, 2)))
    with pytest.raises(DegenerateError):
        wilcoxon_signed_rank(np.array([1.0, -2.0, 3.0, 0, 0]))


def test_wilcoxon_all_one_sign():
    w, p = wilcoxon_signed_rank(np.arange(1, 11, dtype=float))
    assert w == 0 and p == pytest.approx(2 / 2 ** 10)


# ---------------------------------------------------------------------------
# t-test

@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30))
def test_paired_t_matches_scipy(pairs):
    arr = np.array(pairs)
    d = arr[:, 0] - arr[:, 1]
    assume(d.std(ddof=1) > 1e-6 * (1 + np.abs(d).max()))
    t, df, p = paired_t_test(arr)
    ref = scipy.stats.ttest_rel(arr[:, 0], arr[:, 1])
    assert df == len(pairs) - 1
    assert t == pytest.approx(ref.statistic, rel=1e-9)
    assert p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("t,df", [(0.0, 5), (2.0, 10), (-3.5, 14), (40.0, 3), (1e-3, 200)])
def test_t_tail_accuracy(t, df):
    assert student_t_sf2(t, df) == pytest.approx(2 * scipy.stats.t.sf(abs(t), df), rel=1e-12, abs=1e-300)


def test_t_test_errors():
    with pytest.raises(ValueError):
        paired_t_test([[1.0, 2.0]])
    with pytest.raises(DegenerateError):
        paired_t_test([[1.0, 0.0], [2.0, 1.0], [5.0, 4.0]])


# ---------------------------------------------------------------------------
# bootstrap

def test_bootstrap_constant_statistic_has_zero_width():
    ci = bootstrap_ci([[10, 0.3]] * 20, resamples=500)
    assert ci.point == ci.lo == ci.hi == pytest.approx(0.3)


def test_bootstrap_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(0)
    data = np.c_[rng.integers(1, 50, 30), rng.normal(size=30)]
    a = bootstrap_ci(data, resamples=2000, seed=9)
    b = bootstrap_ci(data, resamples=2000, seed=9)
    c = bootstrap_ci(data, resamples=2000, seed=10)
    assert a == b and a != c
    assert a.lo < a.point < a.hi


def test_bootstrap_pools_tokens():
    ci = bootstrap_ci([[1, 0.0], [3, 1.0]], resamples=100)
    assert ci.point == 0.75


def test_bootstrap_statistic_agrees_with_weighted_mean():
    rng = np.random.default_rng(2)
    w = rng.integers(1, 20, 25).astype(float)
    s = rng.normal(size=25)
    a = bootstrap_ci(np.c_[w, s], resamples=1000, seed=3)
    b = bootstrap_statistic(np.c_[w * s, w], lambda v: v[0] / v[1], resamples=1000, seed=3)
    assert a.point == pytest.approx(b.point)
    assert a.lo == pytest.approx(b.lo) and a.hi == pytest.approx(b.hi)


def test_resample_counts_rows_sum_to_n():
    counts = resample_counts(7, 100, 0)
    assert counts.shape == (100, 7) and np.all(counts.sum(1) == 7)


def test_bootstrap_needs_two_sequences():
    with pytest.raises(ValueError):
        bootstrap_ci([[1, 1.0]])
    with pytest.raises(ValueError):
        bootstrap_statistic(np.ones((1, 2)), np.sum)


# ---------------------------------------------------------------------------
# bimodality

def test_bimodal_mixture():
    rng = np.random.default_rng(0)
    values = np.r_[rng.normal(0.0, 0.1, 20000), rng.normal(3.0, 0.3, 4000)]
    t = bimodal_threshold(values)
    assert 0.5 < t < 2.2


def test_unimodal_raises():
    values = np.random.default_rng(1).normal(size=50000)
    with pytest.raises(BimodalityError):
        bimodal_threshold(values)


def test_too_few_samples():
    with pytest.raises(BimodalityError, match="1000"):
        bimodal_threshold(np.zeros(10))


def test_histogram_threshold_picks_the_middle_of_tied_minima():
    counts = np.array([0, 50, 100, 50, 0, 0, 0, 50, 100, 50, 0])
    edges = np.arange(12, dtype=float)
    assert histogram_threshold(counts, edges) == 5.5


def test_histogram_threshold_agrees_with_raw_values():
    rng = np.random.default_rng(4)
    values = np.r_[rng.normal(0.0, 0.1, 5000), rng.normal(2.0, 0.1, 2000)]
    lo = values.min()
    n_bins = int(math.ceil((values.max() - lo) / 0.05 - 1e-9))
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, lo + n_bins * 0.05))
    assert histogram_threshold(counts, edges) == bimodal_threshold(values)


# ---------------------------------------------------------------------------
# firing matrices and co-firing

def _matrix(bits, theta=0.1):
    bits = np.asarray(bits, bool)
    meta = np.zeros(len(bits), TOKEN_META_DTYPE)
    meta["position"] = np.arange(len(bits))
    return FiringMatrix(bits, theta, meta)


def test_jaccard_small_cases():
    m = _matrix([[1, 1, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    assert jaccard(m, 0, 1) == 0.5
    assert jaccard(m, 0, 2) == 0.0 and jaccard(m, 2, 2) == 0.0
    sim = pairwise_jaccard(m, [0, 1, 2])
    assert sim[0, 1] == sim[1, 0] == 0.5
    assert max_offdiagonal(sim) == 0.5 and min_offdiagonal(sim) == 0.0
    assert math.isnan(max_offdiagonal(sim[:1, :1]))


def test_independent_neurons_have_product_jaccard():
    rng = np.random.default_rng(0)
    bits = rng.random((200_000, 2)) < [0.3, 0.4]
    expect = 0.3 * 0.4 / (0.3 + 0.4 - 0.3 * 0.4)
    assert pairwise_jaccard(bits, [0, 1])[0, 1] == pytest.approx(expect, abs=0.005)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
def test_firing_matrix_round_trip(tmp_path_factory, n, m, seed):
    rng = np.random.default_rng(seed)
    bits = rng.random((n, m)) < 0.5
    meta = np.zeros(n, TOKEN_META_DTYPE)
    meta["sequence"] = rng.integers(0, 9, n)
    meta["token"] = rng.integers(0, 50257, n)
    mat = FiringMatrix(bits, 0.25, meta)
    path = tmp_path_factory.mktemp("fm") / "f.bin"
    mat.save(path)
    back = FiringMatrix.load(path)
    assert back.theta == 0.25
    np.testing.assert_array_equal(back.bits, bits)
    np.testing.assert_array_equal(back.token_meta, meta)


def test_firing_matrix_validation(tmp_path):
    with pytest.raises(ValueError):
        FiringMatrix(np.zeros((3, 2)), 0.1, np.zeros(3, TOKEN_META_DTYPE))
    with pytest.raises(ValueError):
        FiringMatrix(np.zeros((3, 2), bool), 0.1, np.zeros(2, TOKEN_META_DTYPE))
    (tmp_path / "x").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        FiringMatrix.load(tmp_path / "x")


def test_regime_is_signed():
    h = np.array([-2.0, 0.5, 1.0, 1.5])
    regime = ExceptionRegime.from_activation(h)
    assert regime.mask.tolist() == [False, False, False, True]
    assert regime.rate == 0.25


def test_conditional_rates_and_consensus_level():
    bits = np.zeros((4, 3072), bool)
    bits[0, [2, 2361, 2460]] = True
    bits[3, 2] = True
    m = _matrix(bits)
    assert consensus_level(m).tolist() == [3, 0, 0, 1]
    assert consensus_level(m, rows=[0, 3]).tolist() == [3, 1]
    regime = ExceptionRegime(np.array([True, False, False, True]))
    assert conditional_fire_rates(m, regime, [2, 2361]).tolist() == [1.0, 0.5]
    with pytest.raises(stats.DegenerateError):
        conditional_fire_rates(m, ExceptionRegime(np.zeros(4, bool)), [2])
    with pytest.raises(ValueError):
        conditional_fire_rates(m, ExceptionRegime(np.zeros(3, bool)), [2])


def test_build_firing_matrix_uses_gelu_magnitude(tiny_weights, tiny_sequences):
    from tmlp.model import TraceRequest, forward

    traces = [forward(s[:10], tiny_weights, request=TraceRequest(mlp=frozenset({11})))[1]
              for s in tiny_sequences[:2]]
    m = stats.build_firing_matrix(traces, 11, 0.1, tokens=[s[:10] for s in tiny_sequences[:2]])
    assert m.bits.shape == (20, 3072)
    np.testing.assert_array_equal(m.bits[:10], np.abs(traces[0].mlp_post[11]) > 0.1)
    assert m.token_meta["sequence"].tolist() == [0] * 10 + [1] * 10
    assert m.token_meta["token"][12] == tiny_sequences[1][2]
    with pytest.raises(KeyError):
        stats.build_firing_matrix(traces, 3, 0.1)
