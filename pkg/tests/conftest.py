import numpy as np
import pytest
from hypothesis import settings

from gcrb_radar.geometry import StationLayout, TargetState
from gcrb_radar.signal_model import Scenario
from gcrb_radar.waveform import GmskParams, draw_bits

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

REFERENCE = (15000.0, 10000.0)
TRUTH = TargetState(15150.0, 10127.5, 50.0, 30.0)


def reference_scenario(num_tx=2, num_rx=3, freq_offset=300.0, scnr_db=20.0, **kw) -> Scenario:
    layout = StationLayout.ring(num_tx, num_rx, REFERENCE, 7000.0)
    return Scenario(layout, TRUTH, GmskParams(freq_offset=freq_offset), scnr_db=scnr_db, **kw)


@pytest.fixture
def scenario():
    return reference_scenario()


@pytest.fixture
def small_scenario():
    layout = StationLayout.ring(2, 2, REFERENCE, 7000.0)
    return Scenario(layout, TRUTH, GmskParams(num_bits=4, oversampling=4, freq_offset=3000.0), scnr_db=15.0)


@pytest.fixture
def bits():
    return draw_bits(np.random.default_rng(11), 2, 16)


# one summary line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
