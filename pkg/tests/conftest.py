import numpy as np
import pytest

from mchom.field import GeometrySpec, generate_medium
from mchom.mesh import FineGrid


@pytest.fixture(scope="session")
def channels32():
    grid = FineGrid(32)
    spec = GeometrySpec(kind="channels", kappa_high=1e4, channel_width=1 / 16)
    return generate_medium(spec, grid)


@pytest.fixture(scope="session")
def constant32():
    return generate_medium(GeometrySpec(kind="constant"), FineGrid(32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
