import numpy as np
import pytest

from mmeloc.geometry import CameraIntrinsics, default_calibration
from mmeloc.sim import ScenarioConfig, generate


@pytest.fixture
def K():
    return CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)


@pytest.fixture
def calib():
    return default_calibration()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_scenario():
    """One second of the default descent, shared by the slower tests."""
    return generate(ScenarioConfig(seed=3, duration=1.0))


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n: int, name: str, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
