"""Synthetic single-voxel and whole-brain fMRI data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.signal import lfilter

from .config import DEFAULT_HRF_LENGTH
from .design import DesignMatrix, StimulusGrid, assemble_design
from .errors import InconsistentConfigError, InputFormatError, InvalidRegionError

logger = logging.getLogger(__name__)

DEFAULT_RHO = 0.638
DEFAULT_DRIFT_AMPLITUDE = 10.0
DEFAULT_DRIFT_PHASE = 0.21
# Innovation variance of each noise component, keyed by the nominal SNR it yields.
NOISE_LEVELS = {1: 0.5216**2, 2: 0.3689**2, 4: 0.2608**2, 8: 0.1844**2}

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, slots=True)
class VoxelSimConfig:
    """Parameters of one simulated voxel.

    ``noise_variance`` is the common variance of the white component and of
    the AR(1) innovations. When ``snr_target`` is set it is ignored and the
    variance is solved from the realised signal variance instead.
    """

    n: int = 400
    m: int = DEFAULT_HRF_LENGTH
    stimulus_p: float = 0.5
    drift_amplitude: float = DEFAULT_DRIFT_AMPLITUDE
    drift_phase: float = DEFAULT_DRIFT_PHASE
    noise_variance: float = NOISE_LEVELS[1]
    rho: float = DEFAULT_RHO
    snr_target: Optional[float] = None
    h_profile: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n <= self.m:
            raise InputFormatError(f"n={self.n} must exceed m={self.m}")
        if not 0.0 < self.stimulus_p < 1.0:
            raise InputFormatError(f"stimulus_p must lie in (0, 1), got {self.stimulus_p}")
        if self.snr_target is not None and self.snr_target < 0:
            raise InputFormatError(f"snr_target must be >= 0, got {self.snr_target}")
        if not abs(self.rho) < 1.0:
            raise InputFormatError(f"|rho| must be < 1, got {self.rho}")
        if self.noise_variance <= 0:
            raise InputFormatError(f"noise_variance must be positive, got {self.noise_variance}")
        if self.h_profile is not None and len(self.h_profile) % self.m:
            raise InputFormatError(f"h_profile length {len(self.h_profile)} is not a multiple of m={self.m}")

    @property
    def n_types(self) -> int:
        return 1 if self.h_profile is None else len(self.h_profile) // self.m

    def h(self) -> np.ndarray:
        if self.h_profile is None:
            return np.zeros(self.m)
        return np.asarray(self.h_profile, dtype=float)


@dataclass(slots=True)
class VoxelTruth:
    """Components used to synthesise ``y = S h + d + eps``."""

    stimulus: np.ndarray
    design: DesignMatrix
    h: np.ndarray
    drift: np.ndarray
    noise: np.ndarray
    noise_variance: float
    gamma: np.ndarray
    signal_variance: float
    snr: float

    def resynthesize(self) -> np.ndarray:
        return self.design.entries @ self.h + self.drift + self.noise


def gen_stimulus(n: int, p: float, seed: SeedLike = None) -> np.ndarray:
    """I.i.d. Bernoulli(p) train of length ``n``."""
    if not 0.0 < p < 1.0:
        raise InputFormatError(f"p must lie in (0, 1), got {p}")
    return _rng(seed).binomial(1, p, size=n).astype(float)


def gen_drift(n: int, amplitude: float = DEFAULT_DRIFT_AMPLITUDE, phase: float = DEFAULT_DRIFT_PHASE) -> np.ndarray:
    """``amplitude * sin{pi (t_i - phase)}`` at ``t_i = i / n``."""
    if n < 1:
        raise InputFormatError(f"n must be >= 1, got {n}")
    t = np.arange(1, n + 1) / n
    return amplitude * np.sin(np.pi * (t - phase))


def gen_noise(n: int, v: float, rho: float = DEFAULT_RHO, seed: SeedLike = None) -> np.ndarray:
    """
    White N(0, v) noise plus an independent stationary AR(1) with N(0, v)
    innovations; the AR component starts from N(0, v / (1 - rho^2)).
    """
    if v <= 0 or not abs(rho) < 1.0:
        raise InputFormatError(f"need v > 0 and |rho| < 1, got v={v}, rho={rho}")
    rng = _rng(seed)
    scale = np.sqrt(v)
    white = rng.normal(0.0, scale, size=n)
    innovations = rng.normal(0.0, scale, size=n)
    innovations[0] = rng.normal(0.0, scale / np.sqrt(1.0 - rho**2))
    autoregressive = lfilter([1.0], [1.0, -rho], innovations)
    return white + autoregressive


def noise_autocovariance(v: float, rho: float = DEFAULT_RHO, maxlag: int = 2) -> np.ndarray:
    """Autocovariances of the white + AR(1) mixture at lags ``0..maxlag``."""
    lags = np.arange(maxlag + 1)
    gamma = v * rho**lags / (1.0 - rho**2)
    gamma[0] += v
    return gamma


def noise_variance_for_total(total: float, rho: float = DEFAULT_RHO) -> float:
    """Component variance ``v`` giving total noise variance ``total``."""
    return total / (1.0 + 1.0 / (1.0 - rho**2))


def correlation_lag_cutoff(rho: float, tol: float = 1e-10) -> int:
    """Smallest lag beyond which the mixture autocorrelation is below ``tol``."""
    if rho == 0:
        return 0
    return int(np.ceil(np.log(tol) / np.log(abs(rho))))


def gen_ma2_noise(
    n: int,
    theta: tuple[float, float] = (0.5, 0.25),
    v: float = 1.0,
    seed: SeedLike = None,
) -> np.ndarray:
    """MA(2) noise ``z_i + theta1 z_{i-1} + theta2 z_{i-2}``, exactly 2-dependent."""
    z = _rng(seed).normal(0.0, np.sqrt(v), size=n + 2)
    return z[2:] + theta[0] * z[1:-1] + theta[1] * z[:-2]


def ma2_autocovariance(theta: tuple[float, float] = (0.5, 0.25), v: float = 1.0) -> np.ndarray:
    t1, t2 = theta
    return v * np.array([1.0 + t1**2 + t2**2, t1 + t1 * t2, t2])


def canonical_hrf(m: int = DEFAULT_HRF_LENGTH, dt: float = 1.0) -> np.ndarray:
    """Difference-of-gammas bump (peak ~5 s, undershoot ~15 s) scaled to unit peak."""
    t = np.arange(m) * dt
    profile = stats.gamma.pdf(t, 6.0) - stats.gamma.pdf(t, 16.0) / 6.0
    peak = np.max(np.abs(profile))
    return profile / peak if peak > 0 else profile


def gen_voxel(config: VoxelSimConfig) -> tuple[np.ndarray, VoxelTruth]:
    """
    Simulate ``y = S h + d + eps`` for one voxel.

    Raises:
        InconsistentConfigError: a positive ``snr_target`` with ``h = 0``.
    """
    streams = np.random.SeedSequence(config.seed).spawn(2)
    stim_rng, noise_rng = (np.random.default_rng(s) for s in streams)
    trains = [gen_stimulus(config.n, config.stimulus_p, stim_rng) for _ in range(config.n_types)]
    design = assemble_design(StimulusGrid.from_trains(trains), config.m)
    h = config.h()
    signal = design.entries @ h
    signal_variance = float(np.var(signal))

    v = config.noise_variance
    if config.snr_target is not None:
        if config.snr_target > 0 and not np.any(h):
            raise InconsistentConfigError("a positive SNR target needs a nonzero HRF")
        if config.snr_target > 0:
            v = noise_variance_for_total(signal_variance / config.snr_target, config.rho)

    drift = gen_drift(config.n, config.drift_amplitude, config.drift_phase)
    noise = gen_noise(config.n, v, config.rho, noise_rng)
    gamma = noise_autocovariance(v, config.rho, maxlag=2)
    truth = VoxelTruth(
        stimulus=np.column_stack(trains),
        design=design,
        h=h,
        drift=drift,
        noise=noise,
        noise_variance=v,
        gamma=gamma,
        signal_variance=signal_variance,
        snr=signal_variance / gamma[0],
    )
    return truth.resynthesize(), truth


@dataclass(frozen=True, slots=True)
class BrainRegion:
    """Boolean mask of active voxels and the HRF scale applied inside it."""

    mask: np.ndarray
    scale: float


@dataclass(slots=True)
class SyntheticBrain:
    """Simulated 4-D grid ``(nx, ny, nz, nt)`` with its ground truth."""

    data: np.ndarray
    truth_mask: np.ndarray
    stimulus: np.ndarray
    hrf: np.ndarray
    scale_map: np.ndarray
    variance_map: np.ndarray
    seed: int
    m: int = DEFAULT_HRF_LENGTH
    metadata: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])  # type: ignore[return-value]


def default_variance_map(dims: Sequence[int], base: float = 1.0, gradient: float = 0.5) -> np.ndarray:
    """Constant plus a linear gradient along x."""
    nx = dims[0]
    ramp = np.linspace(0.0, 1.0, nx) if nx > 1 else np.zeros(1)
    return np.broadcast_to((base + gradient * ramp)[:, None, None], tuple(dims)).copy()


def gen_drift_bank(n: int, size: int = 8, seed: SeedLike = None, amplitude: float = DEFAULT_DRIFT_AMPLITUDE) -> np.ndarray:
    """``size`` smooth drifts, each a random mix of low-order sines and cosines."""
    rng = _rng(seed)
    t = np.arange(1, n + 1) / n
    bank = np.zeros((size, n))
    for row in range(size):
        for order in (0.5, 1.0, 1.5):
            phase = rng.uniform(0.0, 1.0)
            weight = rng.normal(0.0, 1.0) / order
            bank[row] += weight * np.sin(np.pi * order * (t - phase))
        bank[row] *= amplitude / max(np.max(np.abs(bank[row])), 1e-12)
    return bank


def example_regions(dims: Sequence[int], scales: tuple[float, float] = (0.17, 0.12)) -> list[BrainRegion]:
    """Two disjoint boxes, one at each scale."""
    nx, ny, nz = dims
    first = np.zeros(tuple(dims), dtype=bool)
    second = np.zeros(tuple(dims), dtype=bool)
    first[nx // 8 : nx // 8 + max(nx // 4, 1), ny // 8 : ny // 8 + max(ny // 4, 1), :] = True
    second[nx // 2 : nx // 2 + max(nx // 4, 1), ny // 2 : ny // 2 + max(ny // 4, 1), :] = True
    second &= ~first
    return [BrainRegion(mask=first, scale=scales[0]), BrainRegion(mask=second, scale=scales[1])]


def gen_brain(
    dims: Sequence[int],
    nt: int,
    active_regions: Sequence[BrainRegion] = (),
    noise_map: Optional[np.ndarray] = None,
    drift_bank: Optional[np.ndarray] = None,
    seed: int = 0,
    *,
    m: int = DEFAULT_HRF_LENGTH,
    stimulus_p: float = 0.5,
    hrf_amplitude: float = 5.0,
    rho: float = DEFAULT_RHO,
) -> SyntheticBrain:
    """
    Whole-brain grid with planted active regions.

    Every voxel shares one stimulus train. Inside a region the response is
    ``scale * hrf_amplitude * canonical_hrf``; the drift is drawn from the
    bank; the noise is the white + AR(1) mixture with total variance one
    fifth of ``noise_map`` (equal component variances).

    Raises:
        InvalidRegionError: a mask has the wrong shape or overlapping regions
            disagree on the scale.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidRegionError(f"dims must be three positive sizes, got {dims}")
    if nt <= m:
        raise InputFormatError(f"nt={nt} must exceed m={m}")

    scale_map = np.zeros(dims)
    for index, region in enumerate(active_regions):
        mask = np.asarray(region.mask, dtype=bool)
        if mask.shape != dims:
            raise InvalidRegionError(f"region {index + 1} mask has shape {mask.shape}, expected {dims}")
        clash = mask & (scale_map != 0) & (scale_map != region.scale)
        if np.any(clash):
            raise InvalidRegionError(f"region {index + 1} overlaps another region with a different scale")
        scale_map[mask] = region.scale
    truth_mask = scale_map != 0

    variance_map = default_variance_map(dims) if noise_map is None else np.asarray(noise_map, dtype=float)
    if variance_map.shape != dims or np.any(variance_map <= 0):
        raise InvalidRegionError("noise map must be positive with the grid's spatial shape")

    master = np.random.SeedSequence(seed)
    stim_seq, drift_seq, pick_seq, voxel_seq = master.spawn(4)
    stimulus = gen_stimulus(nt, stimulus_p, np.random.default_rng(stim_seq))
    design = assemble_design(StimulusGrid.from_trains([stimulus]), m)
    hrf = hrf_amplitude * canonical_hrf(m)
    response = design.entries @ hrf
    bank = gen_drift_bank(nt, seed=np.random.default_rng(drift_seq)) if drift_bank is None else np.asarray(drift_bank)
    if bank.ndim != 2 or bank.shape[1] != nt:
        raise InputFormatError(f"drift bank must be (size, {nt}), got {bank.shape}")

    n_voxels = int(np.prod(dims))
    picks = np.random.default_rng(pick_seq).integers(0, bank.shape[0], size=n_voxels)
    voxel_streams = voxel_seq.spawn(n_voxels)
    data = np.empty(dims + (nt,), dtype=np.float32)
    # Voxel v maps to (x, y, z) with x fastest.
    for v, (stream, pick) in enumerate(zip(voxel_streams, picks)):
        x, y, z = v % dims[0], (v // dims[0]) % dims[1], v // (dims[0] * dims[1])
        component = noise_variance_for_total(variance_map[x, y, z] / 5.0, rho)
        series = bank[pick] + gen_noise(nt, component, rho, np.random.default_rng(stream))
        if scale_map[x, y, z]:
            series = series + scale_map[x, y, z] * response
        data[x, y, z] = series
    logger.info("Simulated brain %s x %d with %d active voxel(s)", dims, nt, int(truth_mask.sum()))
    return SyntheticBrain(
        data=data,
        truth_mask=truth_mask,
        stimulus=stimulus,
        hrf=hrf,
        scale_map=scale_map,
        variance_map=variance_map,
        seed=seed,
        m=m,
        metadata={"hrf_amplitude": hrf_amplitude, "rho": rho, "stimulus_p": stimulus_p},
    )
