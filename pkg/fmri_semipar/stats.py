"""Chi-square distribution functions and Benjamini-Hochberg FDR control."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc, gammaincc, gammaln, xlogy

from .errors import InputFormatError

logger = logging.getLogger(__name__)

# Remaining Poisson mass at which the noncentral series is truncated.
POISSON_TAIL_TOL = 1e-14
MAX_SERIES_TERMS = 100_000
BH_PROCEDURE = "benjamini-hochberg"


def _check_df(k: float) -> None:
    if not k >= 1:
        raise InputFormatError(f"degrees of freedom must be >= 1, got {k}")


def chi2_cdf(x: float, k: float) -> float:
    """Lower tail ``P{chi2_k <= x}`` via the regularized incomplete gamma."""
    _check_df(k)
    if x < 0:
        raise InputFormatError(f"chi-square argument must be >= 0, got {x}")
    return float(gammainc(k / 2.0, x / 2.0))


def chi2_sf(x: float, k: float) -> float:
    """Upper tail ``P{chi2_k > x}``."""
    _check_df(k)
    if x < 0:
        raise InputFormatError(f"chi-square argument must be >= 0, got {x}")
    return float(gammaincc(k / 2.0, x / 2.0))


def chi2_quantile(p: float, k: float) -> float:
    """Invert ``chi2_cdf`` by bracketed root finding to 1e-12."""
    _check_df(k)
    if not 0.0 < p < 1.0:
        raise InputFormatError(f"probability must lie in (0, 1), got {p}")
    upper = max(2.0 * k, 10.0)
    while chi2_cdf(upper, k) < p:
        upper *= 2.0
    return float(brentq(lambda x: gammainc(k / 2.0, x / 2.0) - p, 0.0, upper, xtol=1e-12, rtol=1e-14))


def noncentral_chi2_sf(x: float, k: float, tau2: float) -> float:
    """
    Upper tail of the noncentral chi-square with noncentrality ``tau2``.

    Evaluated as a Poisson(tau2 / 2) mixture of central tails with ``k + 2j``
    degrees of freedom, summed until the unvisited Poisson mass drops below
    ``POISSON_TAIL_TOL``.
    """
    _check_df(k)
    if x < 0 or tau2 < 0:
        raise InputFormatError(f"need x >= 0 and tau2 >= 0, got x={x}, tau2={tau2}")
    if x == 0:
        return 1.0
    lam = tau2 / 2.0
    if lam == 0:
        return chi2_sf(x, k)
    total = 0.0
    mass = 0.0
    for j in range(MAX_SERIES_TERMS):
        weight = float(np.exp(xlogy(j, lam) - lam - gammaln(j + 1)))
        total += weight * float(gammaincc(k / 2.0 + j, x / 2.0))
        mass += weight
        if j > lam and 1.0 - mass < POISSON_TAIL_TOL:
            break
    else:
        logger.warning("Noncentral series truncated after %d terms (mass %.3g)", MAX_SERIES_TERMS, mass)
    return min(max(total, 0.0), 1.0)


@dataclass(slots=True)
class PValueSet:
    """P-values with their voxel labels."""

    values: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.labels is None or len(self.labels) == 0:
            self.labels = np.arange(self.values.size)
        self.labels = np.asarray(self.labels).ravel()
        if self.labels.size != self.values.size:
            raise InputFormatError(f"{self.labels.size} labels for {self.values.size} p-values")
        if np.any(~((self.values >= 0.0) & (self.values <= 1.0))):
            raise InputFormatError("p-values must lie in [0, 1]")


@dataclass(slots=True)
class FdrResult:
    """Per-hypothesis decisions, in input order."""

    labels: np.ndarray
    p_values: np.ndarray
    q_values: np.ndarray
    reject: np.ndarray
    threshold: float
    level: float
    procedure: str = BH_PROCEDURE

    @property
    def n_rejected(self) -> int:
        return int(self.reject.sum())


def bh_fdr(pvals: PValueSet | Sequence[float], q: float) -> FdrResult:
    """
    Benjamini-Hochberg step-up procedure at level ``q``.

    Rejects the ``i*`` smallest p-values where ``i* = max{i : p_(i) <= i q / m}``.
    Ties in p are ordered by label so the output is deterministic; tied
    p-values always share a decision.
    """
    if not 0.0 < q < 1.0:
        raise InputFormatError(f"FDR level must lie in (0, 1), got {q}")
    if not isinstance(pvals, PValueSet):
        pvals = PValueSet(values=np.asarray(pvals, dtype=float))
    values, labels = pvals.values, pvals.labels
    m = values.size
    if m == 0:
        empty = np.zeros(0)
        return FdrResult(labels=labels, p_values=empty, q_values=empty,
                         reject=np.zeros(0, dtype=bool), threshold=0.0, level=q)

    order = np.lexsort((labels, values))
    ranked = values[order]
    ranks = np.arange(1, m + 1)
    below = np.nonzero(ranked <= ranks * q / m)[0]
    cutoff = int(below[-1]) + 1 if below.size else 0

    adjusted = np.minimum.accumulate((ranked * m / ranks)[::-1])[::-1]
    q_values = np.empty(m)
    q_values[order] = np.minimum(adjusted, 1.0)
    reject = np.zeros(m, dtype=bool)
    reject[order[:cutoff]] = True
    threshold = float(ranked[cutoff - 1]) if cutoff else 0.0
    logger.debug("BH at q=%.4g rejected %d of %d", q, cutoff, m)
    return FdrResult(labels=labels, p_values=values, q_values=q_values,
                     reject=reject, threshold=threshold, level=q)
