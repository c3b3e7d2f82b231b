import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import sparse
from scipy.linalg import toeplitz

from fmri_semipar import inference
from fmri_semipar.design import StimulusGrid, assemble_design
from fmri_semipar.errors import (
    DimensionMismatchError,
    IllPosedDesignError,
    InputFormatError,
    InsufficientDataError,
    InvalidHypothesisError,
)
from fmri_semipar.noise import build_correlation, white_noise
from fmri_semipar.smoother import Smoother, build_smoother
from fmri_semipar.stats import chi2_quantile, chi2_sf, noncentral_chi2_sf


def _problem(n=200, m=4, r=1, seed=0):
    rng = np.random.default_rng(seed)
    trains = [rng.binomial(1, 0.5, size=n) for _ in range(r)]
    design = assemble_design(StimulusGrid.from_trains(trains), m)
    smoother = build_smoother(n, 0.2)
    noise = build_correlation([1.0, 0.3, 0.1], n=n)
    return design, smoother, noise, rng


def test_noiseless_series_recovers_hrf_exactly():
    design, smoother, noise, _ = _problem()
    h = np.array([0.0, 1.0, 0.5, -0.2])
    t = np.arange(1, design.n + 1) / design.n

    fit = inference.fit_gls(design.entries @ h + 2.0 - 3.0 * t, design, smoother, noise)

    assert_allclose(fit.h_hat, h, atol=1e-8)
    assert_allclose(fit.h_hat_bc, h, atol=1e-8)
    assert fit.sigma2_hat < 1e-12


def test_fit_matches_dense_generalized_least_squares():
    design, smoother, noise, rng = _problem(seed=3)
    t = np.arange(1, design.n + 1) / design.n
    y = design.entries @ np.array([1.0, 2.0, 1.0, 0.0]) + 5 * np.sin(np.pi * t) + rng.normal(size=design.n)

    fit = inference.fit_gls(y, design, smoother, noise)

    P = np.eye(design.n) - smoother.dense()
    S_tilde = P @ design.entries
    R_inv = np.linalg.inv(noise.dense())
    gram = S_tilde.T @ R_inv @ S_tilde
    h_hat = np.linalg.solve(gram, S_tilde.T @ R_inv @ (P @ y))
    drift_tilde = P @ (smoother.dense() @ (y - design.entries @ h_hat))
    h_hat_bc = h_hat - np.linalg.solve(gram, S_tilde.T @ R_inv @ drift_tilde)
    residual = P @ y - S_tilde @ h_hat
    sigma2 = residual @ R_inv @ residual / (design.n - design.n_params)

    assert_allclose(fit.gram, gram, rtol=1e-8, atol=1e-8)
    assert_allclose(fit.h_hat, h_hat, atol=1e-8)
    assert_allclose(fit.h_hat_bc, h_hat_bc, atol=1e-8)
    assert fit.sigma2_hat == pytest.approx(sigma2, rel=1e-8)
    assert fit.dof == design.n - 4


def test_fit_rejects_mismatched_inputs():
    design, smoother, noise, _ = _problem()

    with pytest.raises(DimensionMismatchError):
        inference.fit_gls(np.ones(design.n - 1), design, smoother, noise)
    with pytest.raises(DimensionMismatchError):
        inference.fit_gls(np.ones(design.n), design, build_smoother(150, 0.2), noise)


def test_fit_needs_more_samples_than_parameters():
    design = assemble_design(StimulusGrid.from_trains([[1, 0, 1, 1, 0, 1], [0, 1, 1, 0, 1, 0]]), 3)

    with pytest.raises(InsufficientDataError):
        inference.fit_gls(np.ones(6), design, build_smoother(6, 0.9), white_noise((6,)))


def test_silent_stimulus_is_ill_posed():
    design = assemble_design(StimulusGrid.from_trains([np.zeros(100)]), 3)

    with pytest.raises(IllPosedDesignError):
        inference.fit_gls(np.random.default_rng(1).normal(size=100), design, build_smoother(100, 0.2), white_noise((100,)))


def test_hypothesis_matrices():
    all_zero = inference.make_hypothesis("all-zero", 2, 3)
    contrast = inference.make_hypothesis("contrast", 2, 3, contrast=(1, 2))

    assert_allclose(all_zero.A, np.eye(6))
    assert all_zero.k == 6
    assert_allclose(contrast.A, np.hstack([np.eye(3), -np.eye(3)]))
    assert contrast.kind == "contrast"


def test_hypothesis_errors():
    with pytest.raises(InputFormatError):
        inference.make_hypothesis("contrast", 2, 3, contrast=(1, 1))
    with pytest.raises(InputFormatError):
        inference.make_hypothesis("contrast", 2, 3, contrast=(1, 3))
    with pytest.raises(InvalidHypothesisError):
        inference.make_hypothesis("custom", 1, 2, rows=[[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(DimensionMismatchError):
        inference.make_hypothesis("custom", 1, 2, rows=[[1.0, 1.0, 0.0]])
    with pytest.raises(InputFormatError):
        inference.make_hypothesis("bogus", 1, 2)


def test_statistics_match_quadratic_form():
    design, smoother, noise, rng = _problem(seed=7)
    y = design.entries @ np.array([0.0, 0.4, 0.2, 0.0]) + rng.normal(size=design.n)
    fit = inference.fit_gls(y, design, smoother, noise)
    hypothesis = inference.make_hypothesis("all-zero", 1, 4)

    plain = inference.test_K(fit, hypothesis)
    corrected = inference.test_K_bc(fit, hypothesis)

    assert plain.statistic == pytest.approx(fit.h_hat @ fit.gram @ fit.h_hat / fit.sigma2_hat, rel=1e-8)
    assert corrected.statistic == pytest.approx(
        fit.h_hat_bc @ fit.gram @ fit.h_hat_bc / fit.sigma2_hat_bc, rel=1e-8
    )
    assert plain.df == corrected.df == 4
    assert plain.p_value == pytest.approx(chi2_sf(plain.statistic, 4))
    assert (plain.variant, corrected.variant) == ("plain", "bias-corrected")


def test_statistics_are_scale_invariant():
    design, smoother, noise, rng = _problem(seed=9)
    y = design.entries @ np.array([0.3, 0.6, 0.2, 0.0]) + rng.normal(size=design.n)
    hypothesis = inference.make_hypothesis("all-zero", 1, 4)

    base = inference.fit_gls(y, design, smoother, noise)
    scaled = inference.fit_gls(3 * y, design, smoother, noise)

    assert inference.test_K(scaled, hypothesis).statistic == pytest.approx(
        inference.test_K(base, hypothesis).statistic, rel=1e-8
    )
    assert inference.test_K_bc(scaled, hypothesis).statistic == pytest.approx(
        inference.test_K_bc(base, hypothesis).statistic, rel=1e-8
    )


def test_contrast_statistic_vanishes_for_equal_estimates():
    design, smoother, noise, _ = _problem(r=2, seed=4)
    fit = inference.fit_gls(np.random.default_rng(2).normal(size=design.n), design, smoother, noise)
    fit.h_hat = np.tile([0.5, 0.1, 0.0, 0.0], 2)

    result = inference.test_K(fit, inference.make_hypothesis("contrast", 2, 4, contrast=(1, 2)))

    assert result.statistic == 0.0
    assert result.p_value == 1.0


def test_hypothesis_columns_must_match_fit():
    design, smoother, noise, rng = _problem()
    fit = inference.fit_gls(rng.normal(size=design.n), design, smoother, noise)

    with pytest.raises(DimensionMismatchError):
        inference.test_K(fit, inference.make_hypothesis("all-zero", 1, 5))


def test_noncentrality_and_limits():
    c = np.array([1.0, -2.0, 0.5])
    M = np.diag([2.0, 1.0, 4.0])

    assert inference.noncentrality(c, np.eye(3), np.eye(3), 1.0) == pytest.approx(c @ c)
    assert inference.noncentrality(c, np.eye(3), M, 2.0) == pytest.approx(c @ M @ c / 2.0)

    h = np.array([0.2, 0.1, -0.3])
    single = inference.fixed_alternative_limit(h, np.eye(3), M, 1.0)
    assert inference.fixed_alternative_limit(2 * h, np.eye(3), M, 1.0) == pytest.approx(4 * single)
    with pytest.raises(InputFormatError):
        inference.noncentrality(c, np.eye(3), M, 0.0)


def test_local_alternative_solves_constraint():
    A = np.array([[1.0, 0.0, -1.0, 0.0]])

    h = inference.local_alternative([3.0], A, 400)

    assert_allclose(A @ h, [3.0 / 20.0])
    assert_allclose(h, np.linalg.pinv(A) @ np.array([0.15]))


def test_empirical_m_is_scaled_gram():
    design, smoother, noise, rng = _problem()
    fit = inference.fit_gls(rng.normal(size=design.n), design, smoother, noise)

    assert_allclose(inference.empirical_m(fit), fit.gram / design.n)


@pytest.mark.parametrize("k", [1, 5, 18])
def test_power_without_signal_is_the_level(k):
    assert inference.asymptotic_power(k, 0.0, 0.05) == pytest.approx(0.05, abs=1e-10)


def test_power_with_strong_signal():
    assert inference.asymptotic_power(1, 100.0, 0.05) > 0.999


@pytest.mark.parametrize("k", [1, 6, 18])
@pytest.mark.parametrize("tau2", [0.0, 1.0, 5.0, 20.0])
@pytest.mark.parametrize("alpha", [0.05, 0.001])
def test_power_agrees_with_noncentral_tail(k, tau2, alpha):
    critical = chi2_quantile(1 - alpha, k)

    assert inference.asymptotic_power(k, tau2, alpha) == pytest.approx(noncentral_chi2_sf(critical, k, tau2), abs=1e-8)


def test_power_increases_with_noncentrality():
    powers = [inference.asymptotic_power(3, tau2, 0.05) for tau2 in (0.0, 1.0, 4.0, 9.0, 16.0)]

    assert all(later > earlier for earlier, later in zip(powers, powers[1:]))


def test_power_argument_errors():
    with pytest.raises(InputFormatError):
        inference.asymptotic_power(0, 1.0, 0.05)
    with pytest.raises(InputFormatError):
        inference.asymptotic_power(1, -1.0, 0.05)
    with pytest.raises(InputFormatError):
        inference.asymptotic_power(1, 1.0, 1.0)


def test_wider_drift_smoother_matches_dense_oracle():
    design, smoother, noise, rng = _problem(seed=5)
    wide = build_smoother(design.n, 0.4)
    t = np.arange(1, design.n + 1) / design.n
    y = design.entries @ np.array([0.5, 1.0, 0.2, 0.0]) + 3 * np.sin(np.pi * t) + rng.normal(size=design.n)

    fit = inference.fit_gls(y, design, smoother, noise, drift_smoother=wide)
    shared = inference.fit_gls(y, design, smoother, noise)

    P = np.eye(design.n) - smoother.dense()
    S_tilde = P @ design.entries
    R_inv = np.linalg.inv(noise.dense())
    gram = S_tilde.T @ R_inv @ S_tilde
    drift_hat = wide.dense() @ (y - design.entries @ fit.h_hat)
    drift_tilde = P @ drift_hat
    h_hat_bc = fit.h_hat - np.linalg.solve(gram, S_tilde.T @ R_inv @ drift_tilde)
    residual_bc = fit.residual - drift_tilde

    assert_allclose(fit.h_hat, shared.h_hat, atol=1e-12)
    assert fit.sigma2_hat == shared.sigma2_hat
    assert_allclose(fit.drift_hat, drift_hat, atol=1e-8)
    assert_allclose(fit.h_hat_bc, h_hat_bc, atol=1e-8)
    assert fit.sigma2_hat_bc == pytest.approx(
        residual_bc @ R_inv @ residual_bc / (design.n - design.n_params), rel=1e-8
    )


def _expected_residual_energy(design, smoother, noise, covariance, drift_smoother=None):
    """``E[r' R^-1 r]`` of the bias-corrected residual, which is linear in ``y``."""
    columns = [
        inference.fit_gls(e, design, smoother, noise, drift_smoother=drift_smoother).residual_bc
        for e in np.eye(design.n)
    ]
    Q = np.column_stack(columns)
    return float(np.trace(Q.T @ noise.solve(Q) @ covariance))


def test_wider_drift_smoother_absorbs_less_noise():
    n = 160
    design, _, _, _ = _problem(n=n, m=3, seed=11)
    smoother = build_smoother(n, 0.15)
    noise = white_noise((n,))
    covariance = toeplitz(0.638 ** np.arange(n))

    shared = _expected_residual_energy(design, smoother, noise, covariance)
    wide = _expected_residual_energy(design, smoother, noise, covariance, build_smoother(n, 0.3))

    assert shared < wide


def test_K_is_k_times_F_without_smoothing():
    n, m = 120, 3
    design, _, _, rng = _problem(n=n, m=m, r=2, seed=12)
    no_smoothing = Smoother(matrix=sparse.csr_matrix((n, n)), bandwidth=0.1)
    noise = white_noise((n,))
    y = design.entries @ np.array([0.4, 0.2, 0.0, 0.1, 0.3, 0.0]) + rng.normal(size=n)

    fit = inference.fit_gls(y, design, no_smoothing, noise)

    def rss(X):
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return float(np.sum((y - X @ coef) ** 2))

    full = rss(design.entries)
    dof = n - design.n_params
    S1, S2 = design.entries[:, :m], design.entries[:, m:]
    restricted = {"all-zero": float(y @ y), "contrast": rss(S1 + S2)}
    for kind, rss0 in restricted.items():
        hypothesis = inference.make_hypothesis(kind, 2, m, contrast=(1, 2) if kind == "contrast" else None)
        F = ((rss0 - full) / hypothesis.k) / (full / dof)
        assert inference.test_K(fit, hypothesis).statistic == pytest.approx(hypothesis.k * F, rel=1e-8)
        assert inference.test_K_bc(fit, hypothesis).statistic == pytest.approx(hypothesis.k * F, rel=1e-8)


def test_K_ignores_the_order_of_stimulus_types():
    design, smoother, noise, rng = _problem(r=2, seed=13)
    y = design.entries @ np.array([0.5, 0.8, 0.2, 0.0, 0.1, 0.4, 0.3, 0.0]) + rng.normal(size=design.n)
    swapped = design.permute_types([1, 0])

    fit = inference.fit_gls(y, design, smoother, noise)
    fit_swapped = inference.fit_gls(y, swapped, smoother, noise)
    hypothesis = inference.make_hypothesis("all-zero", 2, 4)

    assert_allclose(fit_swapped.h_hat, np.concatenate([fit.h_hat[4:], fit.h_hat[:4]]), atol=1e-10)
    assert inference.test_K(fit_swapped, hypothesis).statistic == pytest.approx(
        inference.test_K(fit, hypothesis).statistic, rel=1e-10
    )
    assert inference.test_K_bc(fit_swapped, hypothesis).statistic == pytest.approx(
        inference.test_K_bc(fit, hypothesis).statistic, rel=1e-10
    )


def test_bias_correction_matters_less_as_n_grows():
    gaps = []
    for n in (200, 400, 800):
        t = np.arange(1, n + 1) / n
        smoother = build_smoother(n, 0.2)
        noise = white_noise((n,))
        hypothesis = inference.make_hypothesis("all-zero", 1, 4)
        rng = np.random.default_rng(n)
        gap = []
        for _ in range(100):
            design = assemble_design(StimulusGrid.from_trains([rng.binomial(1, 0.5, size=n)]), 4)
            y = 2 * np.sin(np.pi * (t - 0.21)) + rng.normal(size=n)
            fit = inference.fit_gls(y, design, smoother, noise)
            gap.append(abs(inference.test_K_bc(fit, hypothesis).statistic - inference.test_K(fit, hypothesis).statistic))
        gaps.append(np.mean(gap))

    assert gaps[2] < 0.75 * gaps[0]


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 51))
    r = int(rng.integers(1, 3))
    m = int(rng.integers(1, 8 // r + 1))
    smoother = build_smoother(n, 0.4)
    P = np.eye(n) - smoother.dense()
    while True:
        design = assemble_design(StimulusGrid.from_trains([rng.binomial(1, 0.5, size=n) for _ in range(r)]), m)
        if np.linalg.cond(P @ design.entries) < 1e4:
            break
    noise = build_correlation([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1)], n=n)
    y = design.entries @ rng.normal(size=r * m) + rng.normal(size=n)
    return y, design, smoother, noise


@pytest.mark.parametrize("seed", range(100))
def test_small_instances_match_dense_oracle(seed):
    y, design, smoother, noise = _random_instance(seed)
    fit = inference.fit_gls(y, design, smoother, noise)

    P = np.eye(design.n) - smoother.dense()
    S_tilde = P @ design.entries
    R_inv = np.linalg.inv(noise.dense())
    gram = S_tilde.T @ R_inv @ S_tilde
    h_hat = np.linalg.solve(gram, S_tilde.T @ R_inv @ (P @ y))
    residual = P @ y - S_tilde @ h_hat
    sigma2 = residual @ R_inv @ residual / (design.n - design.n_params)
    K = h_hat @ gram @ h_hat / sigma2

    assert_allclose(fit.h_hat, h_hat, rtol=1e-8, atol=1e-8)
    statistic = inference.test_K(fit, inference.make_hypothesis("all-zero", design.r, design.m)).statistic
    assert statistic == pytest.approx(K, rel=1e-8)
