import numpy as np
import pytest

from fmri_semipar.design import StimulusGrid, assemble_design
from fmri_semipar.errors import DimensionMismatchError, InputFormatError
from fmri_semipar.inference import fit_gls
from fmri_semipar.noise import build_correlation, estimate_noise, white_noise
from fmri_semipar.pipeline import (
    STATUS_DEGENERATE,
    STATUS_FAILED,
    STATUS_OK,
    ActivationPipeline,
    PipelineConfig,
)
from fmri_semipar.sim import VoxelSimConfig, canonical_hrf, gen_drift, gen_noise, gen_voxel
from fmri_semipar.smoother import gcv_score


@pytest.fixture
def design():
    train = np.random.default_rng(21).binomial(1, 0.5, size=300)
    return assemble_design(StimulusGrid.from_trains([train]), 8)


def _series(design, scale, seed):
    h = scale * canonical_hrf(8, dt=2.0)
    return design.entries @ h + gen_drift(design.n) + gen_noise(design.n, 0.1, seed=seed)


def test_config_validation():
    with pytest.raises(InputFormatError):
        PipelineConfig(m=0)
    with pytest.raises(InputFormatError):
        PipelineConfig(bandwidth=1.5)
    with pytest.raises(InputFormatError):
        PipelineConfig(bandwidth_grid=())
    with pytest.raises(InputFormatError):
        PipelineConfig(kernel="gaussian")


def test_pipeline_checks_config_against_design(design):
    with pytest.raises(InputFormatError):
        ActivationPipeline(design, PipelineConfig(m=4))
    with pytest.raises(DimensionMismatchError):
        ActivationPipeline(design, PipelineConfig(m=8, known_noise=build_correlation([1.0, 0.2], n=100)))


def test_constant_series_is_degenerate(design):
    result = ActivationPipeline(design).analyze_voxel(0, np.full(design.n, 7.0))

    assert result.status == STATUS_DEGENERATE
    assert np.isnan(result.p_K)


def test_non_finite_series_fails(design):
    y = _series(design, 1.0, seed=1)
    y[10] = np.nan

    result = ActivationPipeline(design).analyze_voxel(3, y)

    assert result.status == STATUS_FAILED
    assert result.voxel == 3


def test_wrong_length_series_is_rejected(design):
    with pytest.raises(DimensionMismatchError):
        ActivationPipeline(design).analyze_series(np.ones(design.n + 1))


def test_strong_signal_is_detected(design):
    result = ActivationPipeline(design).analyze_voxel(0, _series(design, 2.0, seed=2))

    assert result.status == STATUS_OK
    assert result.p_Kbc < 0.01
    assert result.p_K < 0.01
    assert 0 < result.bandwidth < 1
    assert result.sigma2_hat > 0


def test_analysis_reports_gcv_scores_and_noise(design):
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth_grid=(0.1, 0.2, 0.4)))

    analysis = pipeline.analyze_series(_series(design, 1.0, seed=4))

    assert set(analysis.gcv_scores) == {0.1, 0.2, 0.4}
    assert analysis.bandwidth in analysis.gcv_scores
    assert analysis.noise.n == design.n
    assert analysis.K.df == analysis.K_bc.df == 8


def test_fixed_bandwidth_skips_selection(design):
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.25))

    analysis = pipeline.analyze_series(_series(design, 1.0, seed=5))

    assert analysis.bandwidth == 0.25
    assert analysis.gcv_scores == {}


def test_known_noise_model_is_used_as_is(design):
    known = build_correlation([1.0, 0.3, 0.05], n=design.n)
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.2, known_noise=known))

    analysis = pipeline.analyze_series(_series(design, 1.0, seed=6))

    assert analysis.noise is known


@pytest.mark.parametrize("seed", range(20))
def test_results_are_scale_invariant(design, seed):
    pipeline = ActivationPipeline(design)
    y = _series(design, 0.5, seed=100 + seed)

    base = pipeline.analyze_voxel(0, y)
    scaled = pipeline.analyze_voxel(0, 3 * y)

    assert scaled.bandwidth == base.bandwidth
    assert scaled.K == pytest.approx(base.K, rel=1e-8)
    assert scaled.K_bc == pytest.approx(base.K_bc, rel=1e-8)
    assert scaled.sigma2_hat == pytest.approx(9 * base.sigma2_hat, rel=1e-8)


def test_drift_smoother_is_wider_than_the_fit_smoother(design):
    y = _series(design, 1.0, seed=8)

    wide = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.2)).analyze_series(y)
    capped = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.4)).analyze_series(y)
    shared = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.2, drift_factor=1.0)).analyze_series(y)

    assert wide.drift_bandwidth == pytest.approx(0.4)
    assert capped.drift_bandwidth == pytest.approx(0.5)
    assert shared.drift_bandwidth == 0.2
    assert wide.K.statistic == pytest.approx(shared.K.statistic, rel=1e-12)
    assert wide.K_bc.statistic != shared.K_bc.statistic


def test_drift_factor_below_one_is_rejected():
    with pytest.raises(InputFormatError):
        PipelineConfig(drift_factor=0.5)


def test_gcv_scores_use_the_estimated_noise_metric(design):
    y = _series(design, 1.0, seed=9)
    grid = (0.1, 0.2, 0.4)
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth_grid=grid))

    analysis = pipeline.analyze_series(y)

    pilot = pipeline.smoother_for(0.2)
    pilot_fit = fit_gls(y, design, pilot, white_noise(design.run_lengths))
    partial = y - design.entries @ pilot_fit.h_hat
    metric = estimate_noise(partial, design.run_lengths)
    for b in grid:
        assert analysis.gcv_scores[b] == pytest.approx(gcv_score(pipeline.smoother_for(b), partial, metric), rel=1e-10)


def test_whitened_gcv_smooths_more_under_correlated_noise():
    white, whitened = [], []
    for seed in range(20):
        y, truth = gen_voxel(VoxelSimConfig(seed=seed))
        for noise_iters, picks in ((0, white), (1, whitened)):
            options = PipelineConfig(m=truth.design.m, noise_iters=noise_iters, noise_g=6)
            picks.append(ActivationPipeline(truth.design, options).analyze_series(y).bandwidth)

    assert np.mean(whitened) > np.mean(white)


def test_grid_results_are_ordered_and_thread_independent(design):
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.2))
    series = np.vstack([_series(design, scale, seed=10 + i) for i, scale in enumerate((0.0, 1.0, 0.5, 2.0))])
    series[1] = 0.0

    serial = pipeline.analyze_grid(series, threads=1)
    threaded = pipeline.analyze_grid(series, threads=3)

    assert [result.voxel for result in threaded] == [0, 1, 2, 3]
    assert [result.status for result in threaded] == [STATUS_OK, STATUS_DEGENERATE, STATUS_OK, STATUS_OK]
    for a, b in zip(serial, threaded):
        assert a.K_bc == pytest.approx(b.K_bc, nan_ok=True)


def test_grid_uses_given_voxel_labels(design):
    pipeline = ActivationPipeline(design, PipelineConfig(m=8, bandwidth=0.2))
    series = np.vstack([_series(design, 1.0, seed=30), _series(design, 1.0, seed=31)])

    results = pipeline.analyze_grid(series, voxels=[42, 7])

    assert [result.voxel for result in results] == [7, 42]
