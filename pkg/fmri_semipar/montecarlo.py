"""Monte Carlo drivers for calibration, power and detection studies."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional, Sequence, TypeVar

import numpy as np
from scipy import stats

from .config import SIMULATION_NOISE_G
from .design import DesignMatrix, StimulusGrid, assemble_design
from .errors import FmriSemiparError, InputFormatError, NumericalError, SingularWindowError
from .inference import (
    HypothesisMatrix,
    asymptotic_power,
    empirical_m,
    fit_gls,
    fixed_alternative_limit,
    local_alternative,
    make_hypothesis,
    test_K,
    test_K_bc,
)
from .noise import NoiseModel, band_limit, build_correlation
from .pipeline import ActivationPipeline, PipelineConfig
from .sim import (
    VoxelSimConfig,
    correlation_lag_cutoff,
    gen_drift,
    gen_ma2_noise,
    gen_stimulus,
    gen_voxel,
    ma2_autocovariance,
    noise_autocovariance,
)
from .smoother import build_smoother, default_bandwidth_grid

logger = logging.getLogger(__name__)

Statistic = Literal["K", "K_bc"]
QQMode = Literal["estimated", "oracle"]

PERCENTILES = np.arange(1, 100)
MIN_QQ_REPS = 100
MA2_THETA = (0.5, 0.25)

T = TypeVar("T")


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent per-replication seeds split from one master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def _fan_out(task: Callable[[int], T], seeds: Sequence[int], threads: int) -> list[T]:
    if threads <= 1:
        return [task(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(task, seeds))


def percentile_table(sample: Sequence[float], k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """1st..99th empirical percentiles of ``sample`` against chi2_k quantiles."""
    sample = np.asarray(sample, dtype=float)
    if sample.size == 0:
        raise InputFormatError("cannot tabulate percentiles of an empty sample")
    empirical = np.percentile(sample, PERCENTILES)
    theoretical = stats.chi2.ppf(PERCENTILES / 100.0, k)
    return PERCENTILES.copy(), empirical, theoretical


def qq_deviation(empirical: Sequence[float], theoretical: Sequence[float]) -> float:
    """Summed absolute distance of the QQ points from the diagonal."""
    return float(np.sum(np.abs(np.asarray(empirical) - np.asarray(theoretical))))


def kolmogorov_distance(sample: Sequence[float], k: int) -> float:
    return float(stats.kstest(np.asarray(sample, dtype=float), "chi2", args=(k,)).statistic)


@dataclass(slots=True)
class QQStudy:
    """Null-distribution samples of K and K_bc plus the selected percentile table."""

    statistic: Statistic
    mode: QQMode
    k: int
    samples: dict[str, np.ndarray]
    percentiles: np.ndarray
    empirical: np.ndarray
    theoretical: np.ndarray
    reps: int
    failures: int = 0

    def deviation(self, statistic: Optional[Statistic] = None) -> float:
        _, empirical, theoretical = percentile_table(self.samples[statistic or self.statistic], self.k)
        return qq_deviation(empirical, theoretical)

    def rejection_rate(self, alpha: float = 0.05, statistic: Optional[Statistic] = None) -> float:
        critical = stats.chi2.ppf(1.0 - alpha, self.k)
        return float(np.mean(self.samples[statistic or self.statistic] > critical))


def oracle_correlation(config: VoxelSimConfig, noise_variance: float) -> NoiseModel:
    """True white + AR(1) correlation truncated where it drops below 1e-10."""
    maxlag = min(correlation_lag_cutoff(config.rho), config.n - 1)
    gamma = noise_autocovariance(noise_variance, config.rho, maxlag)
    return build_correlation(gamma, run_lengths=(config.n,))


def oracle_bandwidth(
    config: VoxelSimConfig,
    grid: Optional[Sequence[float]] = None,
    reps: int = 20,
) -> float:
    """Grid bandwidth with the smallest Monte Carlo drift MSE under the true correlation."""
    candidates = list(grid) if grid is not None else list(default_bandwidth_grid(config.n, config.m))
    seeds = derive_seeds(config.seed, reps)
    smoothers = {}
    for b in candidates:
        try:
            smoothers[b] = build_smoother(config.n, b)
        except SingularWindowError:
            logger.debug("Skipping singular oracle candidate %.4g", b)
    if not smoothers:
        raise InputFormatError("no usable bandwidth in the oracle grid")

    errors = {b: 0.0 for b in smoothers}
    for seed in seeds:
        y, truth = gen_voxel(replace(config, seed=seed))
        noise = oracle_correlation(config, truth.noise_variance)
        for b, smoother in smoothers.items():
            fit = fit_gls(y, truth.design, smoother, noise)
            errors[b] += float(np.mean((fit.drift_hat - truth.drift) ** 2))
    best = min(errors, key=lambda b: (errors[b], -b))
    logger.info("Oracle bandwidth %.4g (drift MSE %.4g)", best, errors[best] / reps)
    return float(best)


def run_qq_study(
    config: VoxelSimConfig,
    reps: int = 500,
    statistic: Statistic = "K_bc",
    *,
    mode: QQMode = "estimated",
    bandwidth: Optional[float] = None,
    noise_g: int = SIMULATION_NOISE_G,
    threads: int = 1,
    enforce_min_reps: bool = True,
) -> QQStudy:
    """
    Simulate ``reps`` voxels from ``config`` and tabulate the null behaviour
    of K and K_bc against chi2_m.

    ``estimated`` runs the full two-stage pipeline with GCV bandwidth and a
    ``noise_g``-band correlation;
    ``oracle`` plugs in the true (truncated) correlation and a fixed
    bandwidth, the oracle one unless ``bandwidth`` is given. Replications
    that raise are counted in ``failures``.
    """
    if enforce_min_reps and reps < MIN_QQ_REPS:
        raise InputFormatError(f"a QQ study needs at least {MIN_QQ_REPS} replications, got {reps}")
    if statistic not in ("K", "K_bc"):
        raise InputFormatError(f"unknown statistic {statistic!r}")
    if mode not in ("estimated", "oracle"):
        raise InputFormatError(f"unknown mode {mode!r}")
    if mode == "oracle" and bandwidth is None:
        bandwidth = oracle_bandwidth(config)

    def replicate(seed: int) -> Optional[tuple[float, float]]:
        y, truth = gen_voxel(replace(config, seed=seed))
        options = PipelineConfig(m=config.m, bandwidth=bandwidth, noise_g=noise_g)
        if mode == "oracle":
            options = replace(options, known_noise=oracle_correlation(config, truth.noise_variance))
        try:
            analysis = ActivationPipeline(truth.design, options).analyze_series(y)
        except FmriSemiparError as exc:
            logger.warning("Replication with seed %d failed: %s", seed, exc)
            return None
        return analysis.K.statistic, analysis.K_bc.statistic

    outcomes = _fan_out(replicate, derive_seeds(config.seed, reps), threads)
    kept = [row for row in outcomes if row is not None]
    failures = reps - len(kept)
    if not kept:
        raise NumericalError(f"all {reps} replications failed")
    values = np.asarray(kept)
    samples = {"K": values[:, 0], "K_bc": values[:, 1]}
    k = config.n_types * config.m
    percentiles, empirical, theoretical = percentile_table(samples[statistic], k)
    logger.info("QQ study (%s, %s): %d replications, %d failed", statistic, mode, reps, failures)
    return QQStudy(
        statistic=statistic,
        mode=mode,
        k=k,
        samples=samples,
        percentiles=percentiles,
        empirical=empirical,
        theoretical=theoretical,
        reps=reps,
        failures=failures,
    )


@dataclass(slots=True)
class NoiseRecoveryStudy:
    """Estimated lag-1 autocorrelations against the simulated target.

    ``limit`` is the lag-1 value the ``g``-band estimator converges to; it
    falls short of ``target`` when the noise is not g-dependent.
    """

    values: np.ndarray
    target: float
    limit: float
    failures: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values.size else float("nan")


def run_noise_recovery_study(
    config: VoxelSimConfig,
    reps: int = 100,
    threads: int = 1,
    noise_g: int = SIMULATION_NOISE_G,
) -> NoiseRecoveryStudy:
    """Mean estimated ``gamma(1) / gamma(0)`` of the two-stage pipeline."""
    options = PipelineConfig(m=config.m, noise_g=noise_g)

    def replicate(seed: int) -> Optional[float]:
        y, truth = gen_voxel(replace(config, seed=seed))
        try:
            analysis = ActivationPipeline(truth.design, options).analyze_series(y)
        except FmriSemiparError as exc:
            logger.warning("Replication with seed %d failed: %s", seed, exc)
            return None
        gamma = analysis.noise.gamma
        return float(gamma[1] / gamma[0]) if gamma.size > 1 else 0.0

    outcomes = _fan_out(replicate, derive_seeds(config.seed, reps), threads)
    values = np.asarray([v for v in outcomes if v is not None])
    gamma = noise_autocovariance(1.0, config.rho, maxlag=noise_g + 2)
    banded = band_limit(gamma, noise_g)
    limit = float(banded[1] / banded[0]) if noise_g > 0 else 0.0
    return NoiseRecoveryStudy(
        values=values,
        target=float(gamma[1] / gamma[0]),
        limit=limit,
        failures=reps - values.size,
    )


def simulate_ma2_voxel(
    h: np.ndarray,
    n: int,
    m: int,
    seed: int,
    *,
    theta: tuple[float, float] = MA2_THETA,
    v: float = 1.0,
    stimulus_p: float = 0.5,
    drift_amplitude: float = 10.0,
) -> tuple[np.ndarray, DesignMatrix]:
    """Voxel with MA(2) noise and ``len(h) / m`` Bernoulli stimulus types."""
    h = np.asarray(h, dtype=float)
    r = h.size // m
    stim_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    stim_rng = np.random.default_rng(stim_seq)
    trains = [gen_stimulus(n, stimulus_p, stim_rng) for _ in range(r)]
    design = assemble_design(StimulusGrid.from_trains(trains), m)
    noise = gen_ma2_noise(n, theta, v, np.random.default_rng(noise_seq))
    y = design.entries @ h + gen_drift(n, drift_amplitude) + noise
    return y, design


@dataclass(slots=True)
class LocalPowerStudy:
    tau2: float
    predicted_power: float
    rejection_rate_K: float
    rejection_rate_K_bc: float
    alpha: float
    reps: int
    failures: int = 0


def run_local_power_study(
    n: int = 400,
    m: int = 6,
    tau2: float = 5.0,
    alpha: float = 0.05,
    reps: int = 500,
    seed: int = 0,
    *,
    bandwidth: float = 0.15,
    theta: tuple[float, float] = MA2_THETA,
    v: float = 1.0,
    threads: int = 1,
) -> LocalPowerStudy:
    """
    Empirical rejection rate under ``A h = n^-1/2 c`` against the asymptotic power.

    Two stimulus types, one-row hypothesis ``h_1(0) = h_2(0)`` and exactly
    2-dependent MA(2) noise. ``c`` is scaled so the noncentrality computed
    from a reference design and the true correlation equals ``tau2``.
    """
    r = 2
    A = np.zeros((1, r * m))
    A[0, 0], A[0, m] = 1.0, -1.0
    hypothesis = HypothesisMatrix(A=A, kind="custom")
    gamma = ma2_autocovariance(theta, v)
    sigma2 = float(gamma[0])

    _, reference = simulate_ma2_voxel(np.zeros(r * m), n, m, seed, theta=theta, v=v)
    true_noise = build_correlation(gamma, run_lengths=(n,))
    smoother = build_smoother(n, bandwidth)
    M = empirical_m(fit_gls(np.zeros(n), reference, smoother, true_noise))
    spread = float(A @ np.linalg.solve(M, A.T))
    c = np.array([np.sqrt(tau2 * sigma2 * spread)])
    h = local_alternative(c, A, n)
    critical = stats.chi2.ppf(1.0 - alpha, 1)

    def replicate(rep_seed: int) -> Optional[tuple[bool, bool]]:
        y, design = simulate_ma2_voxel(h, n, m, rep_seed, theta=theta, v=v)
        try:
            fit = ActivationPipeline(design, PipelineConfig(m=m, bandwidth=bandwidth)).analyze_series(y).fit
        except FmriSemiparError as exc:
            logger.warning("Replication with seed %d failed: %s", rep_seed, exc)
            return None
        return test_K(fit, hypothesis).statistic > critical, test_K_bc(fit, hypothesis).statistic > critical

    outcomes = [row for row in _fan_out(replicate, derive_seeds(seed, reps), threads) if row is not None]
    if not outcomes:
        raise NumericalError(f"all {reps} replications failed")
    decisions = np.asarray(outcomes, dtype=bool)
    return LocalPowerStudy(
        tau2=tau2,
        predicted_power=asymptotic_power(1, tau2, alpha),
        rejection_rate_K=float(decisions[:, 0].mean()),
        rejection_rate_K_bc=float(decisions[:, 1].mean()),
        alpha=alpha,
        reps=reps,
        failures=reps - len(outcomes),
    )


@dataclass(slots=True)
class ConsistencyPoint:
    n: int
    mean_statistic: float
    limit: float

    @property
    def relative_error(self) -> float:
        return abs(self.mean_statistic - self.limit) / abs(self.limit)


def run_consistency_study(
    h: Sequence[float],
    ns: Sequence[int] = (400, 800, 1600),
    reps: int = 50,
    seed: int = 0,
    *,
    theta: tuple[float, float] = MA2_THETA,
    v: float = 1.0,
    threads: int = 1,
) -> list[ConsistencyPoint]:
    """
    Monte Carlo mean of ``K / n`` under the fixed alternative ``h`` for each
    ``n``, beside the limit evaluated with each replication's empirical ``M``.
    """
    h = np.asarray(h, dtype=float)
    if not np.any(h):
        raise InputFormatError("a fixed alternative needs a nonzero HRF")
    m = h.size
    hypothesis = make_hypothesis("all-zero", 1, m)
    sigma2 = float(ma2_autocovariance(theta, v)[0])
    points = []
    for n in ns:

        def replicate(rep_seed: int, n: int = n) -> Optional[tuple[float, float]]:
            y, design = simulate_ma2_voxel(h, n, m, rep_seed, theta=theta, v=v)
            try:
                fit = ActivationPipeline(design, PipelineConfig(m=m)).analyze_series(y).fit
            except FmriSemiparError as exc:
                logger.warning("Replication with seed %d failed: %s", rep_seed, exc)
                return None
            limit = fixed_alternative_limit(h, hypothesis.A, empirical_m(fit), sigma2)
            return test_K(fit, hypothesis).statistic / n, limit

        rows = [row for row in _fan_out(replicate, derive_seeds(seed + n, reps), threads) if row is not None]
        if not rows:
            raise NumericalError(f"all replications failed at n={n}")
        values = np.asarray(rows)
        point = ConsistencyPoint(n=int(n), mean_statistic=float(values[:, 0].mean()), limit=float(values[:, 1].mean()))
        logger.info("n=%d: mean K/n %.4g, limit %.4g", n, point.mean_statistic, point.limit)
        points.append(point)
    return points


@dataclass(slots=True)
class DetectionScore:
    """Voxel recall and false-discovery proportion of a rejection mask."""

    true_positives: int
    n_rejected: int
    n_active: int

    @property
    def recall(self) -> float:
        return self.true_positives / self.n_active if self.n_active else float("nan")

    @property
    def false_discovery_proportion(self) -> float:
        if not self.n_rejected:
            return 0.0
        return (self.n_rejected - self.true_positives) / self.n_rejected


def score_detection(reject: np.ndarray, truth: np.ndarray) -> DetectionScore:
    reject = np.asarray(reject, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if reject.shape != truth.shape:
        raise InputFormatError(f"rejection mask has {reject.size} voxels, truth has {truth.size}")
    return DetectionScore(
        true_positives=int(np.sum(reject & truth)),
        n_rejected=int(reject.sum()),
        n_active=int(truth.sum()),
    )
