import numpy as np
import pytest

from vishape.fem import SemilinearDensity
from vishape.flow import translation_bump
from vishape.mesh import unit_square_mesh
from vishape.vi import ObstacleProblem

DENSITY = "u^3 + u - 10*sin(3*x)*cos(2*y)"
OBSTACLE = "0.3 + 0.2*x*y"


def demo_problem(n=16):
    return ObstacleProblem(unit_square_mesh(n), 1.0, SemilinearDensity.from_expression(DENSITY), OBSTACLE)


@pytest.fixture
def bump():
    return translation_bump(amplitude=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: criterion number -> (passed, detail)
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
