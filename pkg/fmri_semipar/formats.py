"""Readers and writers for stimulus, series, grid and result files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .design import StimulusGrid
from .errors import InputFormatError, InvalidStimulusError
from .pipeline import VoxelResult
from .stats import FdrResult

logger = logging.getLogger(__name__)

FMRB_MAGIC = b"FMRB1\0"
FMRB_HEADER = np.dtype([("nx", "<u4"), ("ny", "<u4"), ("nz", "<u4"), ("nt", "<u4")])
FMRB_VALUE = np.dtype("<f4")

RESULT_COLUMNS = (
    "voxel", "K", "p_K", "K_bc", "p_Kbc", "sigma2_hat", "bandwidth",
    "gamma0", "gamma1", "gamma2", "shrinkage", "status", "reason",
)
PVALUE_COLUMNS = {"K": "p_K", "K_bc": "p_Kbc"}


def invocation_line(invocation: str | None) -> str:
    return f"# invocation: {invocation or ''}\n"


def _rows(path: Path) -> Iterator[tuple[int, list[str] | None]]:
    """Yield ``(lineno, cells)``; ``cells`` is None for a blank line. Comments are skipped."""
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if stripped.startswith("#"):
                continue
            if not stripped:
                yield lineno, None
                continue
            yield lineno, [cell.strip() for cell in next(csv.reader([stripped]))]


def _is_numeric(cells: Sequence[str]) -> bool:
    try:
        [float(cell) for cell in cells]
    except ValueError:
        return False
    return True


def _read_stimulus_file(path: Path) -> tuple[list[str], list[np.ndarray]]:
    names: list[str] = []
    runs: list[np.ndarray] = []
    current: list[list[float]] = []
    for lineno, cells in _rows(path):
        if cells is None:
            if current:
                runs.append(np.asarray(current))
                current = []
            continue
        if not names:
            if _is_numeric(cells):
                raise InputFormatError(f"{path}:{lineno}: missing header row of stimulus names")
            names = cells
            continue
        if len(cells) != len(names):
            raise InputFormatError(f"{path}:{lineno}: expected {len(names)} columns, got {len(cells)}")
        if any(cell not in ("0", "1") for cell in cells):
            raise InvalidStimulusError(f"{path}:{lineno}: stimulus values must be 0 or 1, got {cells}")
        current.append([float(cell) for cell in cells])
    if current:
        runs.append(np.asarray(current))
    if not names or not runs:
        raise InputFormatError(f"{path}: no stimulus rows")
    return names, runs


def read_stimulus_csv(paths: Path | Sequence[Path], resolution_s: float = 1.0) -> StimulusGrid:
    """
    Read one or more stimulus files into a grid.

    Each file has a header of stimulus names then one 0/1 row per grid point.
    Blank lines separate runs inside a file; each file holds at least one run.
    """
    if isinstance(paths, (str, Path)):
        paths = [Path(paths)]
    names: list[str] | None = None
    runs: list[np.ndarray] = []
    for path in paths:
        file_names, file_runs = _read_stimulus_file(Path(path))
        if names is not None and file_names != names:
            raise InputFormatError(f"{path}: stimulus names {file_names} differ from {names}")
        names = file_names
        runs.extend(file_runs)
    logger.debug("Read %d stimulus run(s) of %d type(s)", len(runs), len(names or []))
    return StimulusGrid(runs=tuple(runs), resolution_s=resolution_s, names=tuple(names or ()))


def write_stimulus_csv(path: Path, grid: StimulusGrid, invocation: str | None = None) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(invocation_line(invocation))
        writer = csv.writer(handle)
        writer.writerow(grid.names)
        for index, run in enumerate(grid.runs):
            if index:
                handle.write("\n")
            writer.writerows(run.astype(int).tolist())
    return path


@dataclass(slots=True)
class SeriesTable:
    """Observed series: ``data`` is ``(n, voxels)``, one column per voxel."""

    data: np.ndarray
    names: tuple[str, ...]
    run_lengths: tuple[int, ...]

    @property
    def by_voxel(self) -> np.ndarray:
        return self.data.T


def read_series_csv(path: Path) -> SeriesTable:
    """
    Read a series CSV. A non-numeric first row is taken as voxel names;
    blank lines mark run boundaries.
    """
    path = Path(path)
    names: list[str] = []
    rows: list[list[float]] = []
    run_lengths: list[int] = []
    run_start = 0
    for lineno, cells in _rows(path):
        if cells is None:
            if len(rows) > run_start:
                run_lengths.append(len(rows) - run_start)
                run_start = len(rows)
            continue
        if not rows and not names and not _is_numeric(cells):
            names = cells
            continue
        width = len(names) if names else (len(rows[0]) if rows else len(cells))
        if len(cells) != width:
            raise InputFormatError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
        try:
            rows.append([float(cell) for cell in cells])
        except ValueError as exc:
            raise InputFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from exc
    if not rows:
        raise InputFormatError(f"{path}: no series rows")
    if len(rows) > run_start:
        run_lengths.append(len(rows) - run_start)
    data = np.asarray(rows)
    if not names:
        names = [f"voxel{j}" for j in range(data.shape[1])]
    return SeriesTable(data=data, names=tuple(names), run_lengths=tuple(run_lengths))


def write_series_csv(
    path: Path,
    data: np.ndarray,
    names: Sequence[str] | None = None,
    run_lengths: Sequence[int] | None = None,
    invocation: str | None = None,
) -> Path:
    """Write ``(n,)`` or ``(n, voxels)`` data with a blank line between runs."""
    path = Path(path)
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    names = list(names) if names else [f"voxel{j}" for j in range(data.shape[1])]
    bounds = np.cumsum(run_lengths)[:-1].tolist() if run_lengths else []
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(invocation_line(invocation))
        writer = csv.writer(handle)
        writer.writerow(names)
        for index, row in enumerate(data):
            if index in bounds:
                handle.write("\n")
            writer.writerow([repr(float(value)) for value in row])
    return path


def write_fmrb1(path: Path, data: np.ndarray) -> Path:
    """Write a ``(nx, ny, nz, nt)`` grid: voxel-major float32, x fastest."""
    data = np.asarray(data)
    if data.ndim != 4:
        raise InputFormatError(f"grid must be 4-D (nx, ny, nz, nt), got shape {data.shape}")
    header = np.array([tuple(data.shape)], dtype=FMRB_HEADER)
    body = np.ascontiguousarray(data.transpose(2, 1, 0, 3), dtype=FMRB_VALUE)
    path = Path(path)
    with path.open("wb") as handle:
        handle.write(FMRB_MAGIC)
        handle.write(header.tobytes())
        handle.write(body.tobytes())
    return path


def read_fmrb1(path: Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(FMRB_MAGIC):
        raise InputFormatError(f"{path}: not an FMRB1 file")
    offset = len(FMRB_MAGIC)
    if len(raw) < offset + FMRB_HEADER.itemsize:
        raise InputFormatError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype=FMRB_HEADER, count=1, offset=offset)[0]
    nx, ny, nz, nt = (int(header[name]) for name in ("nx", "ny", "nz", "nt"))
    offset += FMRB_HEADER.itemsize
    expected = nx * ny * nz * nt * FMRB_VALUE.itemsize
    if len(raw) - offset != expected:
        raise InputFormatError(f"{path}: expected {expected} data bytes, found {len(raw) - offset}")
    values = np.frombuffer(raw, dtype=FMRB_VALUE, offset=offset).reshape(nz, ny, nx, nt)
    return values.transpose(2, 1, 0, 3).astype(float)


def grid_to_series(grid: np.ndarray) -> np.ndarray:
    """``(nx, ny, nz, nt)`` -> ``(voxels, nt)`` in file voxel order."""
    grid = np.asarray(grid)
    return grid.transpose(2, 1, 0, 3).reshape(-1, grid.shape[3])


def series_to_grid(series: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    nx, ny, nz = dims
    series = np.asarray(series)
    return series.reshape(nz, ny, nx, -1).transpose(2, 1, 0, 3)


def write_sidecar(path: Path, metadata: dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_sidecar(path: Path) -> dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: invalid JSON sidecar ({exc})") from exc


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_table_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    invocation: str | None = None,
) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(invocation_line(invocation))
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_value(value) for value in row])
    return path


def write_results_csv(path: Path, results: Iterable[VoxelResult], invocation: str | None = None) -> Path:
    rows = (
        (
            r.voxel, r.K, r.p_K, r.K_bc, r.p_Kbc, r.sigma2_hat, r.bandwidth,
            r.gamma[0], r.gamma[1], r.gamma[2], r.shrinkage, r.status, r.reason,
        )
        for r in results
    )
    return write_table_csv(path, RESULT_COLUMNS, rows, invocation)


def _float(value: str | None) -> float:
    if value is None or value == "":
        return float("nan")
    return float(value)


def read_results_csv(path: Path, required: Sequence[str] = ("voxel",)) -> list[VoxelResult]:
    """Read a result table; ``required`` columns must be present in the header."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(line for line in handle if not line.startswith("#"))
        header = reader.fieldnames or []
        missing = [column for column in required if column not in header]
        if missing:
            raise InputFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        results = []
        for row in reader:
            try:
                results.append(
                    VoxelResult(
                        voxel=int(row["voxel"]),
                        K=_float(row.get("K")),
                        p_K=_float(row.get("p_K")),
                        K_bc=_float(row.get("K_bc")),
                        p_Kbc=_float(row.get("p_Kbc")),
                        sigma2_hat=_float(row.get("sigma2_hat")),
                        bandwidth=_float(row.get("bandwidth")),
                        gamma=(_float(row.get("gamma0")), _float(row.get("gamma1")), _float(row.get("gamma2"))),
                        shrinkage=row.get("shrinkage") == "1",
                        status=row.get("status") or "ok",
                        reason=row.get("reason") or "",
                    )
                )
            except (TypeError, ValueError) as exc:
                raise InputFormatError(f"{path}:{reader.line_num}: malformed row ({exc})") from exc
    return results


def write_qvalue_csv(path: Path, fdr: FdrResult, invocation: str | None = None) -> Path:
    rows = zip(fdr.labels.tolist(), fdr.p_values.tolist(), fdr.q_values.tolist(), fdr.reject.tolist())
    return write_table_csv(path, ("voxel", "p_value", "q_value", "reject"), rows, invocation)
