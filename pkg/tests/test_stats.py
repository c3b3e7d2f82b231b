import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal
from scipy import stats as scipy_stats

from fmri_semipar.errors import InputFormatError
from fmri_semipar.stats import PValueSet, bh_fdr, chi2_cdf, chi2_quantile, chi2_sf, noncentral_chi2_sf


@pytest.mark.parametrize("x", [0.0, 0.5, 2.0, 7.5])
def test_chi2_two_degrees_has_closed_form(x):
    assert chi2_cdf(x, 2) == pytest.approx(1 - np.exp(-x / 2), abs=1e-12)
    assert chi2_sf(x, 2) == pytest.approx(np.exp(-x / 2), abs=1e-12)


def test_chi2_quantile_known_values():
    assert chi2_quantile(0.95, 1) == pytest.approx(3.841459, abs=1e-5)
    assert chi2_quantile(0.95, 18) == pytest.approx(scipy_stats.chi2.ppf(0.95, 18), abs=1e-8)


@pytest.mark.parametrize("k", [1, 3, 18, 36])
def test_quantile_inverts_cdf(k):
    for p in (0.01, 0.5, 0.99):
        assert chi2_cdf(chi2_quantile(p, k), k) == pytest.approx(p, abs=1e-10)


def test_chi2_argument_errors():
    with pytest.raises(InputFormatError):
        chi2_cdf(-1.0, 3)
    with pytest.raises(InputFormatError):
        chi2_sf(1.0, 0)
    with pytest.raises(InputFormatError):
        chi2_quantile(1.0, 3)


def test_noncentral_tail_reduces_to_central():
    assert noncentral_chi2_sf(4.0, 3, 0.0) == pytest.approx(chi2_sf(4.0, 3))
    assert noncentral_chi2_sf(0.0, 3, 5.0) == 1.0


@pytest.mark.parametrize("k,tau2", [(1, 2.0), (5, 10.0), (18, 40.0)])
def test_noncentral_tail_agrees_with_scipy(k, tau2):
    x = chi2_quantile(0.95, k)

    assert noncentral_chi2_sf(x, k, tau2) == pytest.approx(scipy_stats.ncx2.sf(x, k, tau2), abs=1e-8)


def test_bh_rejects_the_two_small_p_values():
    result = bh_fdr([0.01, 0.02, 0.9], 0.05)

    assert_array_equal(result.reject, [True, True, False])
    assert result.n_rejected == 2
    assert result.threshold == pytest.approx(0.02)


def test_bh_with_no_signal():
    result = bh_fdr(np.ones(50), 0.05)

    assert result.n_rejected == 0
    assert result.threshold == 0.0


def test_bh_with_empty_input():
    result = bh_fdr([], 0.05)

    assert result.reject.size == 0
    assert result.n_rejected == 0


def test_bh_rejects_invalid_input():
    with pytest.raises(InputFormatError):
        bh_fdr([0.1, 1.2], 0.05)
    with pytest.raises(InputFormatError):
        bh_fdr([0.1], 0.0)
    with pytest.raises(InputFormatError):
        PValueSet(values=np.array([0.1, 0.2]), labels=np.array([1]))


def test_bh_q_values_are_monotone_in_p():
    p = np.array([0.04, 0.001, 0.03, 0.2, 0.011])

    result = bh_fdr(p, 0.05)
    order = np.argsort(p)

    assert np.all(np.diff(result.q_values[order]) >= 0)
    assert_array_equal(result.reject, result.q_values <= 0.05)


def _brute_force_bh(p, q):
    m = len(p)
    best = 0
    for size in range(1, m + 1):
        for subset in itertools.combinations(range(m), size):
            largest = max(p[i] for i in subset)
            if largest <= size * q / m:
                best = max(best, size)
    if best == 0:
        return np.zeros(m, dtype=bool)
    cutoff = sorted(p)[best - 1]
    return np.array([value <= cutoff for value in p])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.sampled_from([0.01, 0.05, 0.2]))
def test_bh_matches_brute_force(p, q):
    assert_array_equal(bh_fdr(p, q).reject, _brute_force_bh(p, q))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.001, 0.3), st.floats(0.0, 0.2))
def test_bh_is_monotone_in_level(p, q, extra):
    tighter = bh_fdr(p, q).reject
    looser = bh_fdr(p, min(q + extra, 0.99)).reject

    assert np.all(looser[tighter])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=30),
    st.integers(0, 29),
    st.floats(0.0, 1.0),
    st.sampled_from([0.01, 0.05, 0.2]),
)
def test_bh_is_monotone_in_p(p, index, factor, q):
    index %= len(p)
    lowered = list(p)
    lowered[index] = p[index] * factor

    before = bh_fdr(p, q).reject
    after = bh_fdr(lowered, q).reject

    assert np.all(after[before])


def _false_discovery_proportions(n_signal, q, draws=200, m=500, seed=0):
    rng = np.random.default_rng(seed)
    proportions = []
    for _ in range(draws):
        p = np.concatenate([rng.uniform(size=m - n_signal), rng.beta(0.1, 1.0, size=n_signal)])
        reject = bh_fdr(p, q).reject
        false = reject[: m - n_signal].sum()
        proportions.append(false / max(reject.sum(), 1))
    return np.asarray(proportions)


def test_bh_controls_fdr_with_uniform_nulls():
    q = 0.05

    mixed = _false_discovery_proportions(n_signal=100, q=q)
    null = _false_discovery_proportions(n_signal=0, q=q, seed=1)

    # 400 of 500 hypotheses are null, so the expected proportion is 0.8 q.
    assert mixed.mean() <= q
    # With every hypothesis null the FDR equals the chance of any rejection, q.
    assert null.mean() <= 2 * q


def test_bh_keeps_labels_and_input_order():
    pvals = PValueSet(values=np.array([0.5, 0.001, 0.001]), labels=np.array([10, 12, 11]))

    result = bh_fdr(pvals, 0.05)

    assert_array_equal(result.labels, [10, 12, 11])
    assert_array_equal(result.reject, [False, True, True])
