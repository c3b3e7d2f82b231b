"""
fmri_semipar package.

Semiparametric detection of activated fMRI voxels: Toeplitz HRF designs,
local linear drift removal, banded GLS, the K and K_bc statistics, FDR maps
and the simulation studies that calibrate them.
"""

__all__ = [
    "config",
    "design",
    "formats",
    "inference",
    "montecarlo",
    "noise",
    "pipeline",
    "sim",
    "smoother",
    "stats",
]

__version__ = "0.1.0"
