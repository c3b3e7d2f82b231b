"""Per-voxel semiparametric activation pipeline."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import (
    BANDWIDTH_GRID_UPPER,
    DEFAULT_HRF_LENGTH,
    DEFAULT_KERNEL,
    DEFAULT_NOISE_G,
    DEFAULT_NOISE_ITERS,
    DRIFT_BANDWIDTH_FACTOR,
    MAX_GRAM_CONDITION,
)
from .design import DesignMatrix
from .errors import DimensionMismatchError, FmriSemiparError, InputFormatError
from .inference import (
    HrfFit,
    HypothesisKind,
    HypothesisMatrix,
    TestResult,
    fit_gls,
    make_hypothesis,
    test_K,
    test_K_bc,
)
from .noise import NoiseModel, estimate_noise, white_noise
from .smoother import KERNELS, Smoother, build_run_smoother, default_bandwidth_grid, select_bandwidth_gcv

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_DEGENERATE = "degenerate"
STATUS_FAILED = "failed"


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    """Options for one analysis run; validated before any voxel is touched."""

    m: int = DEFAULT_HRF_LENGTH
    bandwidth: Optional[float] = None
    bandwidth_grid: Optional[tuple[float, ...]] = None
    kernel: str = DEFAULT_KERNEL
    noise_g: int = DEFAULT_NOISE_G
    noise_iters: int = DEFAULT_NOISE_ITERS
    drift_factor: float = DRIFT_BANDWIDTH_FACTOR
    max_condition: float = MAX_GRAM_CONDITION
    hypothesis: HypothesisKind = "all-zero"
    contrast: Optional[tuple[int, int]] = None
    known_noise: Optional[NoiseModel] = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise InputFormatError(f"m must be >= 1, got {self.m}")
        if self.bandwidth is not None and not 0.0 < self.bandwidth < 1.0:
            raise InputFormatError(f"bandwidth must lie in (0, 1), got {self.bandwidth}")
        if self.bandwidth_grid is not None:
            if not self.bandwidth_grid or any(not 0.0 < b < 1.0 for b in self.bandwidth_grid):
                raise InputFormatError(f"bandwidth grid must be non-empty within (0, 1): {self.bandwidth_grid}")
        if self.kernel not in KERNELS:
            raise InputFormatError(f"unknown kernel {self.kernel!r}")
        if self.noise_g < 0 or self.noise_iters < 0:
            raise InputFormatError("noise_g and noise_iters must be non-negative")
        if self.drift_factor < 1.0:
            raise InputFormatError(f"drift_factor must be >= 1, got {self.drift_factor}")
        if self.max_condition <= 1:
            raise InputFormatError(f"max_condition must exceed 1, got {self.max_condition}")


@dataclass(slots=True)
class VoxelAnalysis:
    """Full output of the pipeline for one series."""

    fit: HrfFit
    noise: NoiseModel
    bandwidth: float
    drift_bandwidth: float
    K: TestResult
    K_bc: TestResult
    gcv_scores: dict[float, float] = field(default_factory=dict)


@dataclass(slots=True)
class VoxelResult:
    """One row of the per-voxel result table."""

    voxel: int
    K: float = float("nan")
    p_K: float = float("nan")
    K_bc: float = float("nan")
    p_Kbc: float = float("nan")
    sigma2_hat: float = float("nan")
    bandwidth: float = float("nan")
    gamma: tuple[float, float, float] = (float("nan"), float("nan"), float("nan"))
    shrinkage: bool = False
    status: str = STATUS_OK
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


class ActivationPipeline:
    """Facade running smoothing, noise estimation and testing for voxel series.

    Unless a bandwidth is fixed, a pilot fit at the middle candidate gives
    ``y - S h_hat``; its second differences give a noise estimate, and GCV
    scored in that noise's metric picks the bandwidth. The fit then starts
    from an identity correlation and re-estimates the banded correlation
    ``noise_iters`` times. The drift estimate behind ``K_bc`` uses a
    smoother ``drift_factor`` times wider. The design and cached smoothers
    are read-only and shared by all workers.
    """

    def __init__(self, design: DesignMatrix, config: Optional[PipelineConfig] = None):
        self.design = design
        self.config = config or PipelineConfig(m=design.m)
        if self.config.m != design.m:
            raise InputFormatError(f"config m={self.config.m} differs from design m={design.m}")
        self.hypothesis: HypothesisMatrix = make_hypothesis(
            self.config.hypothesis, design.r, design.m, contrast=self.config.contrast
        )
        if self.config.bandwidth_grid is not None:
            self.candidates = tuple(self.config.bandwidth_grid)
        else:
            self.candidates = tuple(default_bandwidth_grid(min(design.run_lengths), design.m))
        known = self.config.known_noise
        if known is not None and known.run_lengths != design.run_lengths:
            raise DimensionMismatchError("known noise model runs do not match the design")
        self._smoothers: dict[float, Smoother] = {}
        self._lock = threading.Lock()

    def smoother_for(self, bandwidth: float) -> Smoother:
        with self._lock:
            cached = self._smoothers.get(bandwidth)
        if cached is not None:
            return cached
        smoother = build_run_smoother(self.design.run_lengths, bandwidth, self.config.kernel)
        with self._lock:
            return self._smoothers.setdefault(bandwidth, smoother)

    def drift_bandwidth_for(self, bandwidth: float) -> float:
        """Bandwidth of the drift smoother paired with an HRF-stage ``bandwidth``."""
        return max(bandwidth, min(self.config.drift_factor * bandwidth, BANDWIDTH_GRID_UPPER))

    def _estimate_noise(self, partial: np.ndarray) -> NoiseModel:
        return estimate_noise(partial, self.design.run_lengths, self.config.noise_g)

    def analyze_series(self, y: np.ndarray) -> VoxelAnalysis:
        """Run both stages on one series and compute K and K_bc."""
        y = np.asarray(y, dtype=float)
        design = self.design
        if y.shape != (design.n,):
            raise DimensionMismatchError(f"series has shape {y.shape}, design expects ({design.n},)")
        identity = white_noise(design.run_lengths)
        known = self.config.known_noise
        scores: dict[float, float] = {}

        if self.config.bandwidth is not None:
            bandwidth = self.config.bandwidth
            smoother = self.smoother_for(bandwidth)
        else:
            pilot = self.smoother_for(self.candidates[len(self.candidates) // 2])
            pilot_fit = fit_gls(y, design, pilot, identity, self.config.max_condition)
            partial = y - design.entries @ pilot_fit.h_hat
            if known is not None:
                metric = known
            elif self.config.noise_iters > 0:
                metric = self._estimate_noise(partial)
            else:
                metric = identity
            selection = select_bandwidth_gcv(
                partial,
                self.candidates,
                design.run_lengths,
                self.config.kernel,
                noise=metric,
                build=self.smoother_for,
            )
            bandwidth, smoother, scores = selection.bandwidth, selection.smoother, selection.scores
        drift_bandwidth = self.drift_bandwidth_for(bandwidth)
        drift_smoother = self.smoother_for(drift_bandwidth)

        def refit(noise: NoiseModel) -> HrfFit:
            return fit_gls(y, design, smoother, noise, self.config.max_condition, drift_smoother)

        if known is not None:
            noise = known
            fit = refit(noise)
        else:
            noise = identity
            fit = refit(noise)
            for _ in range(self.config.noise_iters):
                noise = self._estimate_noise(y - design.entries @ fit.h_hat)
                fit = refit(noise)
        logger.debug("Bandwidth %.4g, drift bandwidth %.4g, sigma2 %.4g", bandwidth, drift_bandwidth, fit.sigma2_hat)

        return VoxelAnalysis(
            fit=fit,
            noise=noise,
            bandwidth=bandwidth,
            drift_bandwidth=drift_bandwidth,
            K=test_K(fit, self.hypothesis),
            K_bc=test_K_bc(fit, self.hypothesis),
            gcv_scores=scores,
        )

    def analyze_voxel(self, voxel: int, y: np.ndarray) -> VoxelResult:
        """Analyse one voxel, turning failures into flagged rows."""
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            return VoxelResult(voxel=voxel, status=STATUS_FAILED, reason="non-finite samples")
        if y.size == 0 or np.ptp(y) == 0.0:
            return VoxelResult(voxel=voxel, status=STATUS_DEGENERATE, reason="constant series")
        try:
            analysis = self.analyze_series(y)
        except FmriSemiparError as exc:
            logger.warning("Voxel %d failed: %s", voxel, exc)
            return VoxelResult(voxel=voxel, status=STATUS_FAILED, reason=str(exc))

        gamma = np.full(3, np.nan)
        shown = analysis.noise.gamma[:3]
        gamma[: shown.size] = shown
        fit = analysis.fit
        status, reason = STATUS_OK, ""
        if not fit.sigma2_hat > 0:
            status, reason = STATUS_DEGENERATE, "zero residual variance"
        return VoxelResult(
            voxel=voxel,
            K=analysis.K.statistic,
            p_K=analysis.K.p_value,
            K_bc=analysis.K_bc.statistic,
            p_Kbc=analysis.K_bc.p_value,
            sigma2_hat=fit.sigma2_hat,
            bandwidth=analysis.bandwidth,
            gamma=(float(gamma[0]), float(gamma[1]), float(gamma[2])),
            shrinkage=analysis.noise.shrinkage < 1.0 or analysis.noise.fallback,
            status=status,
            reason=reason,
        )

    def analyze_grid(
        self,
        series: np.ndarray,
        threads: int = 1,
        voxels: Optional[Sequence[int]] = None,
    ) -> list[VoxelResult]:
        """
        Analyse every row of a ``(voxels, n)`` matrix.

        Rows are distributed over a thread pool; the returned list is sorted
        by voxel index regardless of scheduling.
        """
        series = np.asarray(series, dtype=float)
        if series.ndim == 1:
            series = series[None, :]
        if series.shape[1] != self.design.n:
            raise DimensionMismatchError(
                f"series have {series.shape[1]} samples, design expects {self.design.n}"
            )
        labels: Iterable[int] = voxels if voxels is not None else range(series.shape[0])
        jobs = list(zip(labels, series))
        logger.info("Analysing %d voxel(s) with %d thread(s)", len(jobs), max(threads, 1))
        if threads <= 1:
            results = [self.analyze_voxel(int(v), row) for v, row in jobs]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda job: self.analyze_voxel(int(job[0]), job[1]), jobs))
        results.sort(key=lambda result: result.voxel)
        failed = sum(1 for result in results if result.status == STATUS_FAILED)
        if failed:
            logger.warning("%d of %d voxel(s) failed", failed, len(results))
        return results
