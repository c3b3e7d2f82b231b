"""Local linear smoothing matrices for drift removal."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy import sparse

from .config import BANDWIDTH_GRID_SIZE, BANDWIDTH_GRID_UPPER, DEFAULT_KERNEL
from .errors import (
    DimensionMismatchError,
    InputFormatError,
    InvalidDimensionError,
    NoValidBandwidthError,
    SingularWindowError,
)

if TYPE_CHECKING:
    from .noise import NoiseModel

logger = logging.getLogger(__name__)

# Relative determinant of the 2x2 local normal equations below which a window is singular.
WINDOW_DET_TOL = 1e-12


def epanechnikov(u):
    """Epanechnikov kernel 0.75 (1 - u^2) on [-1, 1]."""
    u = np.asarray(u, dtype=float)
    value = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(value) if value.ndim == 0 else value


def biweight(u):
    """Quartic kernel 15/16 (1 - u^2)^2 on [-1, 1]."""
    u = np.asarray(u, dtype=float)
    value = np.where(np.abs(u) <= 1.0, 0.9375 * (1.0 - u * u) ** 2, 0.0)
    return float(value) if value.ndim == 0 else value


KERNELS: dict[str, Callable] = {
    "epanechnikov": epanechnikov,
    "biweight": biweight,
}
# Both kernels are supported on [-L, L] with L = 1.
KERNEL_SUPPORT = 1.0


def get_kernel(name: str) -> Callable:
    try:
        return KERNELS[name]
    except KeyError:
        raise InputFormatError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


@dataclass(frozen=True, slots=True)
class Smoother:
    """Sparse n x n local linear smoothing matrix ``S_d`` and its metadata.

    For multi-run data the matrix is block diagonal, one block per run, so
    smoothing never crosses a run boundary.
    """

    matrix: sparse.csr_matrix
    bandwidth: float
    kernel: str = DEFAULT_KERNEL
    support_halfwidth: float = KERNEL_SUPPORT
    run_lengths: tuple[int, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        _check_rows(self.n, values)
        return np.asarray(self.matrix @ values)

    def residual(self, values: np.ndarray) -> np.ndarray:
        return residual_project(self, values)

    def trace(self) -> float:
        return float(self.matrix.diagonal().sum())

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(slots=True)
class BandwidthSelection:
    """Outcome of a GCV search."""

    bandwidth: float
    smoother: Smoother
    scores: dict[float, float]


def _check_rows(n: int, values: np.ndarray) -> None:
    if values.ndim == 0 or values.shape[0] != n:
        raise DimensionMismatchError(f"expected {n} rows, got shape {values.shape}")


def build_smoother(n: int, b: float, kernel: str = DEFAULT_KERNEL) -> Smoother:
    """
    Local linear smoothing matrix at design points ``t_i = i / n``.

    Row ``i`` holds ``(1, 0) {X'WX}^-1 (1, t_j - t_i)' K_b(t_j - t_i)``, written
    through the kernel moments ``s_k = sum_j K_b(t_j - t_i) (t_j - t_i)^k``.
    Boundary rows use their truncated, asymmetric window as is.

    Raises:
        InvalidDimensionError: ``n < 3`` or ``b`` outside ``(0, 1)``.
        SingularWindowError: some window holds fewer than two weighted points
            or its 2x2 local system is numerically singular.
    """
    if n < 3:
        raise InvalidDimensionError(f"smoother needs n >= 3, got {n}")
    if not 0.0 < b < 1.0:
        raise InvalidDimensionError(f"bandwidth must lie in (0, 1), got {b}")
    kernel_fn = get_kernel(kernel)

    half = int(np.floor(b * KERNEL_SUPPORT * n + 1e-9))
    offsets = np.arange(-half, half + 1)
    rows = np.arange(n)[:, None]
    cols = rows + offsets[None, :]
    inside = (cols >= 0) & (cols < n)
    dist = offsets / n
    weights = np.where(inside, kernel_fn(dist / b) / b, 0.0)

    s0 = weights.sum(axis=1)
    s1 = (weights * dist).sum(axis=1)
    s2 = (weights * dist**2).sum(axis=1)
    det = s0 * s2 - s1**2
    support = (weights > 0).sum(axis=1)
    if np.any(support < 2):
        worst = int(np.argmin(support))
        raise SingularWindowError(
            f"bandwidth {b:g} leaves row {worst + 1} of {n} with {support[worst]} weighted point(s)"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = det / (s0 * s2)
    if np.any(~(relative > WINDOW_DET_TOL)):
        worst = int(np.nanargmin(np.where(np.isfinite(relative), relative, -np.inf)))
        raise SingularWindowError(f"local system is singular at row {worst + 1} of {n} (bandwidth {b:g})")

    coefficients = (s2[:, None] - s1[:, None] * dist[None, :]) * weights / det[:, None]
    keep = inside & (weights > 0)
    matrix = sparse.csr_matrix(
        (coefficients[keep], (np.broadcast_to(rows, cols.shape)[keep], cols[keep])),
        shape=(n, n),
    )
    return Smoother(matrix=matrix, bandwidth=float(b), kernel=kernel, run_lengths=(n,))


def build_run_smoother(
    run_lengths: Sequence[int],
    b: float,
    kernel: str = DEFAULT_KERNEL,
) -> Smoother:
    """Block-diagonal smoother with one local linear block per run."""
    run_lengths = tuple(int(length) for length in run_lengths)
    if len(run_lengths) == 1:
        return build_smoother(run_lengths[0], b, kernel)
    blocks = [build_smoother(length, b, kernel).matrix for length in run_lengths]
    matrix = sparse.block_diag(blocks, format="csr")
    return Smoother(matrix=matrix, bandwidth=float(b), kernel=kernel, run_lengths=run_lengths)


def residual_project(smoother: Smoother, values: np.ndarray) -> np.ndarray:
    """Return ``(I - S_d) values`` for a vector or a matrix of columns."""
    values = np.asarray(values, dtype=float)
    _check_rows(smoother.n, values)
    return values - np.asarray(smoother.matrix @ values)


def kernel_average_matrix(n: int, b: float, kernel: str = DEFAULT_KERNEL) -> np.ndarray:
    """Dense ``H(i, j) = n^-1 K_b(t_j - t_i)``, the interior limit of ``S_d``."""
    kernel_fn = get_kernel(kernel)
    t = np.arange(1, n + 1) / n
    return kernel_fn((t[None, :] - t[:, None]) / b) / b / n


def default_bandwidth_grid(
    n: int,
    m: int,
    size: int = BANDWIDTH_GRID_SIZE,
    upper: float = BANDWIDTH_GRID_UPPER,
) -> np.ndarray:
    """Log-spaced candidates from ``2m/n`` to ``upper``.

    The lower end keeps the smoother wider than the HRF support so it cannot
    absorb the response itself.
    """
    lower = 2.0 * m / n
    if lower >= upper:
        logger.warning("2m/n = %.3f exceeds the grid upper end %.3f; using %.3f", lower, upper, upper / 4)
        lower = upper / 4
    return np.geomspace(lower, upper, size)


def bandwidth_from_seconds(seconds: float, run_lengths: Sequence[int], tr: float) -> float:
    """Convert a bandwidth in seconds to rescaled units (mean run duration = 1)."""
    if seconds <= 0 or tr <= 0:
        raise InvalidDimensionError("bandwidth seconds and TR must be positive")
    duration = float(np.mean(run_lengths)) * tr
    return seconds / duration


def gcv_score(smoother: Smoother, values: np.ndarray, noise: NoiseModel | None = None) -> float:
    """
    ``n ||(I - S_d) v||^2 / (n - tr S_d)^2``; infinite when the smoother interpolates.

    With a noise model the squared norm is taken in the ``R^-1`` metric, so
    correlated noise is scored as if it were white.
    """
    n = smoother.n
    resid = residual_project(smoother, values)
    dof = n - smoother.trace()
    if dof <= 0:
        return float("inf")
    energy = np.dot(resid, resid) if noise is None else np.dot(resid, noise.solve(resid))
    return float(n * energy / dof**2)


def select_bandwidth_gcv(
    y_partial: np.ndarray,
    candidates: Sequence[float],
    run_lengths: Sequence[int] | None = None,
    kernel: str = DEFAULT_KERNEL,
    noise: NoiseModel | None = None,
    build: Callable[[float], Smoother] | None = None,
) -> BandwidthSelection:
    """
    Choose the candidate bandwidth minimising generalized cross-validation.

    ``y_partial`` is the working residual ``y - S h_hat``; candidates that
    produce singular windows are skipped. Ties go to the larger bandwidth.
    ``noise`` whitens the score (see :func:`gcv_score`) and ``build`` lets a
    caller hand in cached smoothers.
    """
    y_partial = np.asarray(y_partial, dtype=float)
    if len(candidates) == 0:
        raise NoValidBandwidthError("bandwidth grid is empty")
    run_lengths = tuple(run_lengths) if run_lengths else (y_partial.shape[0],)
    build = build or (lambda b: build_run_smoother(run_lengths, b, kernel))

    best: tuple[float, Smoother] | None = None
    best_score = float("inf")
    scores: dict[float, float] = {}
    for b in sorted((float(c) for c in candidates), reverse=True):
        try:
            smoother = build(b)
        except (SingularWindowError, InvalidDimensionError) as exc:
            logger.debug("Skipping bandwidth %.4g: %s", b, exc)
            continue
        score = gcv_score(smoother, y_partial, noise)
        scores[b] = score
        if best is None or score < best_score:
            best = (b, smoother)
            best_score = score
    if best is None:
        raise NoValidBandwidthError(f"no valid bandwidth among {list(candidates)}")
    logger.debug("GCV selected bandwidth %.4g (score %.4g)", best[0], best_score)
    return BandwidthSelection(bandwidth=best[0], smoother=best[1], scores=scores)
