"""Shared configuration for fmri_semipar."""

from __future__ import annotations

import os
from pathlib import Path

APP_DIR = Path(os.environ.get("FMRI_SEMIPAR_HOME", Path.home() / ".fmri_semipar")).expanduser()
LOG_FILE = APP_DIR / "fmri_semipar.log"
LOG_LEVEL_ENV = "FMRI_SEMIPAR_LOG_LEVEL"

DEFAULT_HRF_LENGTH = 18
DEFAULT_KERNEL = "epanechnikov"
DEFAULT_NOISE_G = 2
DEFAULT_NOISE_ITERS = 1
DEFAULT_FDR_LEVEL = 0.05
DEFAULT_ALPHA = 0.05
MAX_GRAM_CONDITION = 1e10
BANDWIDTH_GRID_SIZE = 10
BANDWIDTH_GRID_UPPER = 0.5
# Drift smoother bandwidth used for d_hat, as a multiple of the HRF-stage bandwidth.
DRIFT_BANDWIDTH_FACTOR = 2.0
# Noise band used by the Monte Carlo studies, whose AR(1) component is not banded.
SIMULATION_NOISE_G = 6


def ensure_app_dirs() -> None:
    """Ensure the application directory exists."""
    APP_DIR.mkdir(parents=True, exist_ok=True)


def load_config_file(path: Path) -> dict[str, str]:
    """
    Read a flat ``key=value`` configuration file.

    Blank lines and ``#`` comments are skipped. Keys are normalised so that
    ``noise-iters`` and ``noise_iters`` address the same option. Values are
    returned as strings; argparse converts them when they become defaults.
    """
    values: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip().lstrip("-").replace("-", "_")
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            values[key] = value.strip()
    return values
