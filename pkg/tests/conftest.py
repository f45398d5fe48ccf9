import sys

import numpy as np
import pytest

from fourfem.mesh import build_lshape, build_structured_square, uniform_refine


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def square2():
    return build_structured_square(2)


@pytest.fixture(scope="session")
def square4():
    return build_structured_square(4)


@pytest.fixture(scope="session")
def lshape1():
    return uniform_refine(build_lshape(), 1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
