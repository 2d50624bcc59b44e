import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evmlp.model import NetworkConfig, StageConfig, build_network, evmlp_t1_config  # noqa: E402


@pytest.fixture(scope="session")
def small_config():
    """Three stages on a 16x16x3 input: 4x4 -> 2x2 -> 1x1 patch grids."""
    return NetworkConfig(
        input_side=16,
        input_channels=3,
        stages=(
            StageConfig(4, 2.0, 8, 2, 0.0),
            StageConfig(2, 2.0, 12, 1, 0.0),
            StageConfig(2, 3.0, 8, 1, 0.25),
        ),
        num_classes=5,
        name="small",
    )


@pytest.fixture(scope="session")
def small_net(small_config):
    return build_network(small_config, seed=3)


@pytest.fixture(scope="session")
def t1_config():
    return evmlp_t1_config()


@pytest.fixture(scope="session")
def t1_net(t1_config):
    return build_network(t1_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2]) if n.split("_")[2].isdigit() else 99):
        verdict = "PASS" if _ACCEPTANCE[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
