"""GLS estimation of the HRF and the chi-square calibrated statistics K and K_bc."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.special import gammaln, xlogy

from .config import MAX_GRAM_CONDITION
from .design import DesignMatrix
from .errors import (
    DimensionMismatchError,
    IllPosedDesignError,
    IllPosedHypothesisError,
    InputFormatError,
    InsufficientDataError,
    InvalidHypothesisError,
)
from .noise import NoiseModel
from .smoother import Smoother
from .stats import chi2_quantile, chi2_sf

logger = logging.getLogger(__name__)

Variant = Literal["plain", "bias-corrected"]
HypothesisKind = Literal["all-zero", "contrast", "custom"]


@dataclass(slots=True)
class HrfFit:
    """Semiparametric GLS fit of one voxel series."""

    h_hat: np.ndarray
    h_hat_bc: np.ndarray
    residual: np.ndarray
    residual_bc: np.ndarray
    drift_hat: np.ndarray
    drift_tilde: np.ndarray
    sigma2_hat: float
    sigma2_hat_bc: float
    gram: np.ndarray
    gram_inv: np.ndarray
    n: int
    r: int
    m: int

    @property
    def n_params(self) -> int:
        return self.r * self.m

    @property
    def dof(self) -> int:
        return self.n - self.n_params


@dataclass(frozen=True, slots=True)
class HypothesisMatrix:
    """Full-row-rank ``A`` of ``H0: A h = 0``."""

    A: np.ndarray
    kind: HypothesisKind = "custom"

    @property
    def k(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, slots=True)
class TestResult:
    """A K or K_bc statistic with its chi-square p-value."""

    __test__ = False  # not a pytest class

    statistic: float
    df: int
    p_value: float
    variant: Variant


def fit_gls(
    y: np.ndarray,
    design: DesignMatrix,
    smoother: Smoother,
    noise: NoiseModel,
    max_condition: float = MAX_GRAM_CONDITION,
    drift_smoother: Smoother | None = None,
) -> HrfFit:
    """
    Estimate the HRF by GLS on drift-removed data.

    With ``y~ = (I - S_d) y`` and ``S~ = (I - S_d) S``::

        h_hat    = (S~' R^-1 S~)^-1 S~' R^-1 y~
        d_hat    = S_D (y - S h_hat),   d~ = (I - S_d) d_hat
        h_hat_bc = h_hat - (S~' R^-1 S~)^-1 S~' R^-1 d~
        r_hat    = y~ - S~ h_hat,       r_hat_bc = r_hat - d~

    ``S_D`` is ``drift_smoother`` when given and ``S_d`` otherwise. A wider
    drift smoother keeps ``d~`` from soaking up the noise that ``I - S_d``
    lets through, so ``r_hat_bc`` keeps its variance.

    Every n-dimensional product goes through the sparse smoother or the
    banded correlation solve; only the rm x rm Gram matrix is dense.
    """
    y = np.asarray(y, dtype=float)
    n, n_params = design.n, design.n_params
    drift_smoother = drift_smoother or smoother
    if y.shape != (n,):
        raise DimensionMismatchError(f"series has shape {y.shape}, design expects ({n},)")
    if smoother.n != n or noise.n != n or drift_smoother.n != n:
        raise DimensionMismatchError(
            f"smoother ({smoother.n}) / drift smoother ({drift_smoother.n}) / noise ({noise.n}) do not match n={n}"
        )
    if n <= n_params:
        raise InsufficientDataError(f"n={n} observations cannot identify rm={n_params} parameters")

    S = design.entries
    y_tilde = smoother.residual(y)
    S_tilde = smoother.residual(S)
    weighted = noise.solve(S_tilde)
    gram = S_tilde.T @ weighted
    gram = 0.5 * (gram + gram.T)

    condition = np.linalg.cond(gram)
    if not np.isfinite(condition) or condition > max_condition:
        raise IllPosedDesignError(f"Gram matrix condition number {condition:.3g} exceeds {max_condition:.3g}")
    try:
        factor = cho_factor(gram)
    except LinAlgError as exc:
        raise IllPosedDesignError("Gram matrix is not positive definite") from exc

    h_hat = cho_solve(factor, weighted.T @ y_tilde)
    residual = y_tilde - S_tilde @ h_hat
    drift_hat = drift_smoother.apply(y - S @ h_hat)
    drift_tilde = smoother.residual(drift_hat)
    h_hat_bc = h_hat - cho_solve(factor, weighted.T @ drift_tilde)
    residual_bc = residual - drift_tilde

    dof = n - n_params
    sigma2_hat = float(residual @ noise.solve(residual)) / dof
    sigma2_hat_bc = float(residual_bc @ noise.solve(residual_bc)) / dof
    return HrfFit(
        h_hat=h_hat,
        h_hat_bc=h_hat_bc,
        residual=residual,
        residual_bc=residual_bc,
        drift_hat=drift_hat,
        drift_tilde=drift_tilde,
        sigma2_hat=sigma2_hat,
        sigma2_hat_bc=sigma2_hat_bc,
        gram=gram,
        gram_inv=cho_solve(factor, np.eye(n_params)),
        n=n,
        r=design.r,
        m=design.m,
    )


def make_hypothesis(
    kind: HypothesisKind,
    r: int,
    m: int,
    *,
    contrast: tuple[int, int] | None = None,
    rows: Sequence[Sequence[float]] | np.ndarray | None = None,
) -> HypothesisMatrix:
    """
    Build ``A`` for ``H0: h = 0`` (``all-zero``), ``H0: h_j1 = h_j2``
    (``contrast``, 1-based stimulus types) or explicit ``rows``.
    """
    n_params = r * m
    if kind == "all-zero":
        A = np.eye(n_params)
    elif kind == "contrast":
        if contrast is None:
            raise InputFormatError("contrast hypothesis needs (j1, j2)")
        j1, j2 = contrast
        if j1 == j2 or not (1 <= j1 <= r and 1 <= j2 <= r):
            raise InputFormatError(f"contrast types must be distinct and within 1..{r}, got {contrast}")
        A = np.zeros((m, n_params))
        lags = np.arange(m)
        A[lags, (j1 - 1) * m + lags] = 1.0
        A[lags, (j2 - 1) * m + lags] = -1.0
    elif kind == "custom":
        if rows is None:
            raise InputFormatError("custom hypothesis needs rows")
        A = np.atleast_2d(np.asarray(rows, dtype=float))
        if A.shape[1] != n_params:
            raise DimensionMismatchError(f"hypothesis rows need {n_params} columns, got {A.shape[1]}")
    else:
        raise InputFormatError(f"unknown hypothesis kind {kind!r}")
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise InvalidHypothesisError(f"hypothesis matrix with {A.shape[0]} rows is rank deficient")
    return HypothesisMatrix(A=A, kind=kind)


def _quadratic_statistic(estimate: np.ndarray, fit: HrfFit, hypothesis: HypothesisMatrix, sigma2: float) -> float:
    A = hypothesis.A
    if A.shape[1] != fit.n_params:
        raise DimensionMismatchError(f"hypothesis has {A.shape[1]} columns, fit has {fit.n_params} parameters")
    contrast = A @ estimate
    middle = A @ fit.gram_inv @ A.T
    try:
        numerator = float(contrast @ solve(middle, contrast, assume_a="pos"))
    except LinAlgError as exc:
        raise IllPosedHypothesisError("A (S'R^-1S)^-1 A' is singular") from exc
    numerator = max(numerator, 0.0)
    if numerator == 0.0:
        return 0.0
    if sigma2 <= 0.0:
        return float("inf")
    return numerator / sigma2


def test_K(fit: HrfFit, hypothesis: HypothesisMatrix) -> TestResult:
    """``K = (A h)'{A G^-1 A'}^-1 (A h) / {r' R^-1 r / (n - rm)}`` against chi2_k."""
    statistic = _quadratic_statistic(fit.h_hat, fit, hypothesis, fit.sigma2_hat)
    return TestResult(statistic=statistic, df=hypothesis.k,
                      p_value=_p_value(statistic, hypothesis.k), variant="plain")


def test_K_bc(fit: HrfFit, hypothesis: HypothesisMatrix) -> TestResult:
    """Bias-corrected K: ``h_hat_bc`` in the numerator, ``r_hat_bc`` in the denominator."""
    statistic = _quadratic_statistic(fit.h_hat_bc, fit, hypothesis, fit.sigma2_hat_bc)
    return TestResult(statistic=statistic, df=hypothesis.k,
                      p_value=_p_value(statistic, hypothesis.k), variant="bias-corrected")


# Keep pytest from collecting the two statistics as tests when imported into test modules.
test_K.__test__ = False  # type: ignore[attr-defined]
test_K_bc.__test__ = False  # type: ignore[attr-defined]


def _p_value(statistic: float, k: int) -> float:
    if not np.isfinite(statistic):
        return 0.0
    return chi2_sf(statistic, k)


def empirical_m(fit: HrfFit) -> np.ndarray:
    """``n^-1 S~' R^-1 S~``."""
    return fit.gram / fit.n


def _limit_quadratic(vector: np.ndarray, A: np.ndarray, M: np.ndarray, sigma2: float) -> float:
    if sigma2 <= 0:
        raise InputFormatError(f"sigma2 must be positive, got {sigma2}")
    try:
        middle = A @ solve(M, A.T, assume_a="pos")
        return float(vector @ solve(middle, vector, assume_a="pos")) / sigma2
    except LinAlgError as exc:
        raise IllPosedHypothesisError("A M^-1 A' is singular") from exc


def noncentrality(c: np.ndarray, A: np.ndarray, M: np.ndarray, sigma2: float) -> float:
    """``tau2 = c' (A M^-1 A')^-1 c / sigma2``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return _limit_quadratic(c, A, np.asarray(M, dtype=float), sigma2)


def fixed_alternative_limit(h: np.ndarray, A: np.ndarray, M: np.ndarray, sigma2: float) -> float:
    """Probability limit of ``K / n`` under a fixed alternative ``h``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return _limit_quadratic(A @ np.asarray(h, dtype=float), A, np.asarray(M, dtype=float), sigma2)


def local_alternative(c: np.ndarray, A: np.ndarray, n: int) -> np.ndarray:
    """Minimum-norm ``h`` with ``A h = n^-1/2 c``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return np.linalg.pinv(A) @ (np.asarray(c, dtype=float) / np.sqrt(n))


def _noncentral_density(x: float, k: int, tau2: float, max_terms: int) -> float:
    # exp{-(x + tau2)/2} / 2^{k/2} * sum_j x^{k/2+j-1} tau2^j / {Gamma(k/2+j) 4^j j!}
    if x <= 0:
        return 0.0
    j = np.arange(max_terms)
    log_terms = (
        xlogy(k / 2.0 + j - 1.0, x)
        + xlogy(j, tau2)
        - gammaln(k / 2.0 + j)
        - j * np.log(4.0)
        - gammaln(j + 1.0)
    )
    peak = log_terms.max()
    series = np.exp(peak + np.log(np.exp(log_terms - peak).sum()))
    return float(np.exp(-(x + tau2) / 2.0 - (k / 2.0) * np.log(2.0)) * series)


def asymptotic_power(k: int, tau2: float, alpha: float, max_terms: int | None = None) -> float:
    """
    Local power: the noncentral chi2_k(tau2) density integrated from the
    central ``1 - alpha`` quantile to infinity.

    The density series is summed in log space; ``max_terms`` defaults to a
    count well past the Poisson(tau2 / 2) bulk.
    """
    if k < 1 or tau2 < 0 or not 0.0 < alpha < 1.0:
        raise InputFormatError(f"need k >= 1, tau2 >= 0, alpha in (0, 1); got {k}, {tau2}, {alpha}")
    critical = chi2_quantile(1.0 - alpha, k)
    if tau2 == 0:
        return chi2_sf(critical, k)
    if max_terms is None:
        lam = tau2 / 2.0
        max_terms = int(lam + 40.0 * np.sqrt(lam + 1.0) + 60)
    spread = np.sqrt(2.0 * (k + 2.0 * tau2))
    upper = k + tau2 + 40.0 * spread + 100.0
    value, error = quad(
        _noncentral_density, critical, upper,
        args=(k, tau2, max_terms), epsabs=1e-13, epsrel=1e-11, limit=500,
    )
    if error > 1e-9:
        logger.warning("Power integral precision %.2g for k=%d tau2=%.3g", error, k, tau2)
    return min(max(value, 0.0), 1.0)
