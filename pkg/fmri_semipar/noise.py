"""Banded error-correlation estimation by second-order differencing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded, solve

from .config import DEFAULT_NOISE_G
from .errors import (
    DimensionMismatchError,
    InfeasibleCovarianceError,
    InsufficientDataError,
    InvalidDimensionError,
    NotPositiveDefiniteError,
)

logger = logging.getLogger(__name__)

# Autocorrelation of the second-difference filter (1, -2, 1), indexed by lag offset.
_DIFFERENCE_WEIGHTS = {0: 6.0, 1: -4.0, -1: -4.0, 2: 1.0, -2: 1.0}
SHRINKAGE_STEPS = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0)


def _run_lengths_for(length: int, run_lengths: Sequence[int] | None) -> tuple[int, ...]:
    if run_lengths is None:
        return (int(length),)
    run_lengths = tuple(int(n) for n in run_lengths)
    if sum(run_lengths) != length:
        raise DimensionMismatchError(f"run lengths sum to {sum(run_lengths)}, series has {length} samples")
    return run_lengths


def _run_slices(run_lengths: Sequence[int]) -> list[slice]:
    bounds = np.concatenate([[0], np.cumsum(run_lengths)]).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(frozen=True, slots=True)
class NoiseModel:
    """Banded correlation ``R`` of a stationary g-dependent error process.

    ``gamma`` holds the autocovariances ``gamma(0..g)`` in signal units. The
    matrix is stored in upper banded form with its Cholesky factor computed
    once; lags that would couple two different runs are zero.
    """

    gamma: np.ndarray
    run_lengths: tuple[int, ...]
    shrinkage: float = 1.0
    fallback: bool = False
    _band: np.ndarray = field(init=False, repr=False, compare=False)
    _factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        gamma = np.array(self.gamma, dtype=float).ravel()
        if gamma.size == 0 or gamma[0] <= 0:
            raise InfeasibleCovarianceError(f"gamma(0) must be positive, got {gamma[:1]}")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "run_lengths", tuple(int(n) for n in self.run_lengths))
        band = _correlation_band(self.correlations, self.run_lengths)
        try:
            factor = cholesky_banded(band, lower=False)
        except LinAlgError as exc:
            raise NotPositiveDefiniteError(
                f"banded correlation with shrinkage {self.shrinkage:g} is not positive definite"
            ) from exc
        object.__setattr__(self, "_band", band)
        object.__setattr__(self, "_factor", factor)

    @property
    def g(self) -> int:
        return self.gamma.size - 1

    @property
    def n(self) -> int:
        return sum(self.run_lengths)

    @property
    def sigma2(self) -> float:
        return float(self.gamma[0])

    @property
    def correlations(self) -> np.ndarray:
        """Lag correlations actually used in ``R``, shrinkage included."""
        rho = self.gamma / self.gamma[0]
        rho[1:] *= self.shrinkage
        return rho

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``R^-1 rhs`` via the banded Cholesky factor."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 0 or rhs.shape[0] != self.n:
            raise DimensionMismatchError(f"expected {self.n} rows, got shape {rhs.shape}")
        return cho_solve_banded((self._factor, False), rhs)

    def dense(self) -> np.ndarray:
        """Dense ``R`` (small problems and tests only)."""
        n = self.n
        matrix = np.zeros((n, n))
        g = self.g
        for lag in range(g + 1):
            values = self._band[g - lag, lag:]
            idx = np.arange(n - lag)
            matrix[idx, idx + lag] = values
            matrix[idx + lag, idx] = values
        return matrix

    def inverse_column(self, column: int) -> np.ndarray:
        """Column ``column`` of ``V = R^-1``."""
        unit = np.zeros(self.n)
        unit[column] = 1.0
        return self.solve(unit)


def _correlation_band(rho: np.ndarray, run_lengths: Sequence[int]) -> np.ndarray:
    g = rho.size - 1
    n = int(sum(run_lengths))
    run_ids = np.repeat(np.arange(len(run_lengths)), run_lengths)
    band = np.zeros((g + 1, n))
    band[g, :] = 1.0
    for lag in range(1, g + 1):
        if lag >= n:
            break
        same_run = run_ids[lag:] == run_ids[:-lag]
        band[g - lag, lag:] = np.where(same_run, rho[lag], 0.0)
    return band


def second_difference(series: np.ndarray, run_lengths: Sequence[int] | None = None) -> np.ndarray:
    """``x_i - 2 x_{i-1} + x_{i-2}`` within each run; each run loses two samples."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 1:
        raise DimensionMismatchError(f"series must be 1-D, got shape {series.shape}")
    pieces = []
    for index, rows in enumerate(_run_slices(_run_lengths_for(series.size, run_lengths))):
        run = series[rows]
        if run.size < 3:
            raise InvalidDimensionError(f"run {index + 1} has {run.size} samples; differencing needs 3")
        pieces.append(np.diff(run, n=2))
    return np.concatenate(pieces)


def estimate_autocov_diff(
    e: np.ndarray,
    maxlag: int,
    run_lengths: Sequence[int] | None = None,
) -> np.ndarray:
    """
    Mean-removed sample autocovariances ``gamma_e(0..maxlag)``.

    Every lag is normalised by the full length ``N`` (the biased estimator,
    which keeps the implied Toeplitz matrix non-negative definite). With
    ``run_lengths`` only pairs inside the same run contribute.
    """
    e = np.asarray(e, dtype=float)
    total = e.size
    if total <= maxlag + 1:
        raise InsufficientDataError(f"{total} differenced samples cannot support lag {maxlag}")
    centred = e - e.mean()
    acov = np.zeros(maxlag + 1)
    for rows in _run_slices(_run_lengths_for(total, run_lengths)):
        run = centred[rows]
        for lag in range(min(maxlag, run.size - 1) + 1):
            acov[lag] += np.dot(run[: run.size - lag], run[lag:])
    return acov / total


def differencing_map(g: int) -> np.ndarray:
    """
    Matrix ``W`` with ``gamma_e = W gamma`` for a g-dependent process.

    For ``g = 2``::

        gamma_e(0) =  6 gamma(0) - 8 gamma(1) + 2 gamma(2)
        gamma_e(1) = -4 gamma(0) + 7 gamma(1) - 4 gamma(2)
        gamma_e(2) =    gamma(0) - 4 gamma(1) + 6 gamma(2)
    """
    if g < 0:
        raise InvalidDimensionError(f"g must be >= 0, got {g}")
    matrix = np.zeros((g + 1, g + 1))
    for lag in range(g + 1):
        for offset, weight in _DIFFERENCE_WEIGHTS.items():
            target = abs(lag + offset)
            if target <= g:
                matrix[lag, target] += weight
    return matrix


def forward_difference_autocov(gamma: Sequence[float]) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    return differencing_map(gamma.size - 1) @ gamma


def solve_gamma_system(gamma_e: Sequence[float], g: int | None = None) -> np.ndarray:
    """
    Recover ``gamma(0..g)`` from differenced autocovariances.

    Raises:
        InfeasibleCovarianceError: ``gamma(0) <= 0`` or some ``|gamma(j)| > gamma(0)``.
    """
    gamma_e = np.asarray(gamma_e, dtype=float)
    g = gamma_e.size - 1 if g is None else g
    if gamma_e.size != g + 1:
        raise DimensionMismatchError(f"need {g + 1} differenced autocovariances, got {gamma_e.size}")
    gamma = solve(differencing_map(g), gamma_e)
    if not gamma[0] > 0:
        raise InfeasibleCovarianceError(f"solved gamma(0) = {gamma[0]:.4g} is not positive")
    if np.any(np.abs(gamma[1:]) > gamma[0]):
        raise InfeasibleCovarianceError(f"solved autocovariances {np.round(gamma, 6)} exceed gamma(0)")
    return gamma


def band_limit(gamma: Sequence[float], g: int) -> np.ndarray:
    """
    What the ``g``-band estimate converges to when the true autocovariance
    ``gamma`` does not vanish beyond lag ``g``.

    The differenced autocovariances are formed from the full ``gamma``
    (missing lags count as zero) and pushed through the truncated system.
    For a g-dependent process the result is ``gamma(0..g)`` itself.
    """
    if g < 0:
        raise InvalidDimensionError(f"g must be >= 0, got {g}")
    full = np.zeros(g + 3)
    gamma = np.asarray(gamma, dtype=float)[: g + 3]
    full[: gamma.size] = gamma
    gamma_e = np.array(
        [sum(weight * full[abs(lag + offset)] for offset, weight in _DIFFERENCE_WEIGHTS.items()) for lag in range(g + 1)]
    )
    return solve(differencing_map(g), gamma_e)


def build_correlation(
    gamma: Sequence[float],
    n: int | None = None,
    run_lengths: Sequence[int] | None = None,
) -> NoiseModel:
    """
    Banded correlation ``R(i, j) = gamma(|i - j|) / gamma(0)`` for ``|i - j| <= g``.

    When the raw band is not positive definite, off-diagonals are shrunk by the
    largest factor in 0.9, 0.8, ... that restores a Cholesky factor; the factor
    is recorded on the model. Shrinking to zero gives the identity.
    """
    if run_lengths is None:
        if n is None:
            raise InvalidDimensionError("either n or run_lengths is required")
        run_lengths = (n,)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0 or not gamma[0] > 0:
        raise InfeasibleCovarianceError(f"gamma(0) must be positive, got {gamma[:1]}")
    try:
        return NoiseModel(gamma=gamma, run_lengths=tuple(run_lengths))
    except NotPositiveDefiniteError:
        pass
    for factor in SHRINKAGE_STEPS:
        try:
            model = NoiseModel(gamma=gamma, run_lengths=tuple(run_lengths), shrinkage=factor)
        except NotPositiveDefiniteError:
            continue
        logger.warning("Correlation band not positive definite; shrunk off-diagonals by %.1f", factor)
        return model
    raise NotPositiveDefiniteError("identity correlation failed to factor")  # pragma: no cover


def banded_solve(model: NoiseModel, rhs: np.ndarray) -> np.ndarray:
    """``R^-1 rhs`` without forming the dense inverse."""
    return model.solve(rhs)


def white_noise(run_lengths: Sequence[int], variance: float = 1.0, *, fallback: bool = False) -> NoiseModel:
    """Identity correlation (ordinary least squares weighting)."""
    return NoiseModel(gamma=np.array([variance]), run_lengths=tuple(run_lengths), fallback=fallback)


def estimate_noise(
    residual: np.ndarray,
    run_lengths: Sequence[int] | None = None,
    g: int = DEFAULT_NOISE_G,
) -> NoiseModel:
    """
    Difference the working residual ``y - S h_hat``, estimate ``gamma(0..g)``
    and build ``R``. Infeasible solutions fall back to white noise.
    """
    residual = np.asarray(residual, dtype=float)
    run_lengths = _run_lengths_for(residual.size, run_lengths)
    diffed = second_difference(residual, run_lengths)
    diffed_lengths = tuple(length - 2 for length in run_lengths)
    gamma_e = estimate_autocov_diff(diffed, g, diffed_lengths)
    try:
        gamma = solve_gamma_system(gamma_e, g)
    except InfeasibleCovarianceError as exc:
        variance = gamma_e[0] / _DIFFERENCE_WEIGHTS[0]
        logger.warning("Noise autocovariances infeasible (%s); using white noise", exc)
        return white_noise(run_lengths, variance if variance > 0 else 1.0, fallback=True)
    model = build_correlation(gamma, run_lengths=run_lengths)
    logger.debug("Estimated noise gamma=%s shrinkage=%.2f", np.round(gamma, 6), model.shrinkage)
    return model
