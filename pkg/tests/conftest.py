import os

import pytest

RUN_SLOW_ENV = "FMRI_SEMIPAR_RUN_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo study, set FMRI_SEMIPAR_RUN_SLOW=1 to run")


def pytest_collection_modifyitems(config, items):
    if os.environ.get(RUN_SLOW_ENV) == "1":
        return
    skip_slow = pytest.mark.skip(reason=f"set {RUN_SLOW_ENV}=1 to run Monte Carlo studies")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
