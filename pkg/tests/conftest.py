import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from cvqkd.model_core import REFERENCE, LinkParams

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# detector-unit scale that is far from 1, so a missed normalization shows up
ODD_N0 = 137.5


def link_params(
    v_a=(0.5, 50.0), t=(0.01, 1.0), epsilon=(0.0, 0.1), eta=(0.3, 1.0), v_el=(0.0, 0.2),
    beta=(0.5, 1.0),
):
    def fl(lo, hi):
        return st.floats(lo, hi, allow_nan=False, allow_infinity=False)

    return st.builds(
        LinkParams, v_a=fl(*v_a), t=fl(*t), epsilon=fl(*epsilon), eta=fl(*eta),
        v_el=fl(*v_el), beta=fl(*beta),
    )


@pytest.fixture
def reference():
    return REFERENCE


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one pass/fail line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
