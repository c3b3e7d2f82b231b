"""Toeplitz convolution designs built from binary stimulus trains."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import toeplitz

from .errors import InvalidDimensionError, InvalidStimulusError

logger = logging.getLogger(__name__)


def _as_binary(values, *, what: str = "stimulus train") -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.size and not np.all((array == 0.0) | (array == 1.0)):
        bad = array[(array != 0.0) & (array != 1.0)]
        raise InvalidStimulusError(f"{what} must contain only 0/1 values, found {bad[0]!r}")
    return array


@dataclass(frozen=True, slots=True)
class StimulusGrid:
    """Binary stimulus trains on the fine time grid, one array per run.

    Each run is stored as an ``(n_fine, r)`` array whose column ``j`` is the
    train of stimulus type ``j``.
    """

    runs: tuple[np.ndarray, ...]
    resolution_s: float = 1.0
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.resolution_s <= 0:
            raise InvalidDimensionError(f"resolution_s must be positive, got {self.resolution_s}")
        if not self.runs:
            raise InvalidDimensionError("a stimulus grid needs at least one run")
        checked: list[np.ndarray] = []
        n_types = None
        for index, run in enumerate(self.runs):
            array = _as_binary(run, what=f"run {index + 1}")
            if array.ndim == 1:
                array = array[:, None]
            if array.ndim != 2:
                raise InvalidDimensionError(f"run {index + 1} must be 1-D or 2-D, got shape {array.shape}")
            if n_types is None:
                n_types = array.shape[1]
            elif array.shape[1] != n_types:
                raise InvalidDimensionError(
                    f"run {index + 1} has {array.shape[1]} stimulus types, expected {n_types}"
                )
            array.setflags(write=False)
            checked.append(array)
        object.__setattr__(self, "runs", tuple(checked))
        names = tuple(self.names) or tuple(f"stim{j + 1}" for j in range(n_types or 0))
        if len(names) != n_types:
            raise InvalidDimensionError(f"{len(names)} names given for {n_types} stimulus types")
        object.__setattr__(self, "names", names)

    @classmethod
    def from_trains(
        cls,
        trains: Sequence[Sequence[float]],
        *,
        resolution_s: float = 1.0,
        names: Sequence[str] = (),
    ) -> "StimulusGrid":
        """Single-run grid from ``r`` equal-length trains."""
        lengths = {len(train) for train in trains}
        if len(lengths) != 1:
            raise InvalidDimensionError(f"trains within a run must share one length, got {sorted(lengths)}")
        return cls(runs=(np.column_stack([np.asarray(t, dtype=float) for t in trains]),),
                   resolution_s=resolution_s, names=tuple(names))

    @property
    def n_types(self) -> int:
        return self.runs[0].shape[1]

    @property
    def run_lengths(self) -> tuple[int, ...]:
        return tuple(run.shape[0] for run in self.runs)

    def stimulus_frequencies(self) -> np.ndarray:
        """Empirical P{s_j = 1} per stimulus type over all runs."""
        stacked = np.vstack(self.runs)
        if stacked.shape[0] == 0:
            return np.zeros(self.n_types)
        return stacked.mean(axis=0)


@dataclass(frozen=True, slots=True)
class DesignMatrix:
    """Stacked Toeplitz blocks ``S = [S_1, ..., S_r]`` with run structure.

    Rows are runs placed contiguously; columns are ``r`` blocks of ``m``
    lags. The entries array is read-only so one design can be shared by
    many voxel workers.
    """

    entries: np.ndarray
    m: int
    r: int
    run_lengths: tuple[int, ...]
    names: tuple[str, ...] = ()
    _run_ids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[1] != self.r * self.m:
            raise InvalidDimensionError(
                f"design must have r*m = {self.r * self.m} columns, got shape {entries.shape}"
            )
        if sum(self.run_lengths) != entries.shape[0]:
            raise InvalidDimensionError(
                f"run lengths sum to {sum(self.run_lengths)}, design has {entries.shape[0]} rows"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "run_lengths", tuple(int(n) for n in self.run_lengths))
        run_ids = np.repeat(np.arange(len(self.run_lengths)), self.run_lengths)
        run_ids.setflags(write=False)
        object.__setattr__(self, "_run_ids", run_ids)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"stim{j + 1}" for j in range(self.r)))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def n_params(self) -> int:
        return self.r * self.m

    @property
    def block_offsets(self) -> tuple[int, ...]:
        return tuple(j * self.m for j in range(self.r))

    @property
    def run_ids(self) -> np.ndarray:
        return self._run_ids

    def run_slices(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.run_lengths)])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def block(self, j: int) -> np.ndarray:
        """Columns of ``S_j`` (0-based ``j``)."""
        start = j * self.m
        return self.entries[:, start : start + self.m]

    def permute_types(self, order: Sequence[int]) -> "DesignMatrix":
        """Reorder stimulus-type blocks; ``order`` lists 0-based block indices."""
        if sorted(order) != list(range(self.r)):
            raise InvalidDimensionError(f"{list(order)} is not a permutation of {self.r} types")
        columns = np.concatenate([np.arange(j * self.m, (j + 1) * self.m) for j in order])
        return DesignMatrix(
            entries=self.entries[:, columns].copy(),
            m=self.m,
            r=self.r,
            run_lengths=self.run_lengths,
            names=tuple(self.names[j] for j in order),
        )


@dataclass(slots=True)
class DesignReport:
    """Diagnostics for the column covariance of a design."""

    rank: int
    n_params: int
    min_cov_eigenvalue: float
    condition_number: float
    stimulus_frequencies: np.ndarray
    flagged: bool
    reasons: list[str] = field(default_factory=list)


def build_toeplitz(train: Sequence[float], m: int) -> np.ndarray:
    """
    Lower-triangular Toeplitz block for one stimulus train.

    Entry ``(i, l)`` is ``train[i - l]`` for ``i >= l`` and zero above the
    diagonal, so column ``l`` is the train delayed by ``l`` samples.
    """
    column = _as_binary(train)
    if column.ndim != 1:
        raise InvalidDimensionError(f"train must be 1-D, got shape {column.shape}")
    n = column.shape[0]
    if m < 1 or m >= n:
        raise InvalidDimensionError(f"need 1 <= m < n, got m={m}, n={n}")
    first_row = np.zeros(m)
    first_row[0] = column[0]
    return toeplitz(column, first_row)


def assemble_design(grid: StimulusGrid, m: int) -> DesignMatrix:
    """Concatenate per-type blocks horizontally and per-run blocks vertically."""
    for index, length in enumerate(grid.run_lengths):
        if length <= m:
            raise InvalidDimensionError(f"run {index + 1} has {length} samples, needs more than m={m}")
    rows = [
        np.hstack([build_toeplitz(run[:, j], m) for j in range(grid.n_types)])
        for run in grid.runs
    ]
    design = DesignMatrix(
        entries=np.vstack(rows),
        m=m,
        r=grid.n_types,
        run_lengths=grid.run_lengths,
        names=grid.names,
    )
    logger.debug("Assembled design %dx%d over %d run(s)", design.n, design.n_params, len(grid.runs))
    return design


def subsample_rows(design: DesignMatrix, decimation: int, phase: int = 0) -> DesignMatrix:
    """
    Keep rows whose within-run index is ``phase`` modulo ``decimation``.

    Used when the acquisition TR is a multiple of the stimulus resolution;
    the default phase keeps the first fine-grid sample of every TR.
    """
    if decimation < 1:
        raise InvalidDimensionError(f"decimation must be >= 1, got {decimation}")
    if not 0 <= phase < decimation:
        raise InvalidDimensionError(f"phase must lie in [0, {decimation}), got {phase}")
    if decimation == 1:
        return design
    kept: list[np.ndarray] = []
    lengths: list[int] = []
    for index, rows in enumerate(design.run_slices()):
        length = rows.stop - rows.start
        if decimation > length:
            raise InvalidDimensionError(
                f"decimation {decimation} exceeds length {length} of run {index + 1}"
            )
        local = np.arange(phase, length, decimation)
        kept.append(rows.start + local)
        lengths.append(local.size)
    index_array = np.concatenate(kept)
    return DesignMatrix(
        entries=design.entries[index_array].copy(),
        m=design.m,
        r=design.r,
        run_lengths=tuple(lengths),
        names=design.names,
    )


def decimation_for(tr_seconds: float, resolution_s: float) -> int:
    """Integer ratio of acquisition TR to stimulus resolution."""
    if tr_seconds <= 0 or resolution_s <= 0:
        raise InvalidDimensionError("TR and stimulus resolution must be positive")
    ratio = tr_seconds / resolution_s
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise InvalidDimensionError(
            f"TR {tr_seconds}s is not an integer multiple of the stimulus resolution {resolution_s}s"
        )
    return factor


def design_validity_check(
    design: DesignMatrix,
    tol: float = 1e-8,
    grid: StimulusGrid | None = None,
) -> DesignReport:
    """
    Finite-sample check that the design columns have a positive definite covariance.

    A design is flagged when the smallest eigenvalue of the empirical column
    covariance is at or below ``tol`` (relative to the largest one) or when
    ``S`` is rank deficient.
    """
    entries = design.entries
    rank = int(np.linalg.matrix_rank(entries))
    if design.n > 1:
        covariance = np.atleast_2d(np.cov(entries, rowvar=False))
        eigenvalues = np.linalg.eigvalsh(covariance)
    else:
        eigenvalues = np.zeros(design.n_params)
    min_eig = float(eigenvalues[0])
    max_eig = float(max(eigenvalues[-1], 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = float(np.linalg.cond(entries.T @ entries))
    if not np.isfinite(condition):
        condition = float("inf")

    frequencies = (
        grid.stimulus_frequencies()
        if grid is not None
        else np.array([design.block(j)[:, 0].mean() for j in range(design.r)])
    )

    reasons: list[str] = []
    if rank < design.n_params:
        reasons.append(f"design rank {rank} < {design.n_params} columns")
    if min_eig <= tol * max(1.0, max_eig):
        reasons.append(f"column covariance not positive definite (smallest eigenvalue {min_eig:.3g})")
    if frequencies.sum() >= 1.0:
        logger.warning(
            "Stimulus frequencies sum to %.3f (>= 1); types overlap on the fine grid",
            frequencies.sum(),
        )
    report = DesignReport(
        rank=rank,
        n_params=design.n_params,
        min_cov_eigenvalue=min_eig,
        condition_number=condition,
        stimulus_frequencies=frequencies,
        flagged=bool(reasons),
        reasons=reasons,
    )
    if report.flagged:
        logger.warning("Design flagged: %s", "; ".join(reasons))
    return report
