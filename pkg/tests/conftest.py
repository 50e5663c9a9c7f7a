import numpy as np
import pytest

from sfse.data import LoadProfileConfig, generate_timeline
from sfse.grid import load_case


@pytest.fixture(scope="session")
def ieee37():
    return load_case("ieee37")


@pytest.fixture(scope="session")
def case4():
    return load_case("case4_dist")


@pytest.fixture(scope="session")
def ieee37_timeline(ieee37):
    return generate_timeline(ieee37)


@pytest.fixture(scope="session")
def pilot_small(case4):
    """Short pilot timeline (one simulated week at 1-minute steps, 10x coarser source)."""
    cfg = LoadProfileConfig(n_households=3, duration_steps=7 * 14400, daily_period_steps=14400,
                            load_peak=0.3, pv_peak=0.2, walk_crossing_steps=180, seed=1)
    return generate_timeline(case4, cfg, window=10, factor=10, n_load_buses=3, n_pv_buses=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
