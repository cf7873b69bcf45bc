import math

import numpy as np
import pytest

from todadeg import bubble, shadow
from todadeg.torus import TorusField, TorusGrid
from todadeg.weights import TrigWeight


def solve_one_point(n, h1, rho2=2 * math.pi, start=(0.0, 0.0), tol=1e-10):
    grid = TorusGrid(n)
    prob = shadow.ShadowProblem(rho2, h1, 1.0, grid, m=1)
    init = shadow.ShadowState(points=np.array([start], dtype=float), w=TorusField.zeros(grid))
    return prob, shadow.newton_shadow(prob, init, tol)


@pytest.fixture(scope="session")
def shadow_weak():
    """One free point at the origin, h1 = 1 + 0.1 cos cos, rho2 = 2 pi, n = 128."""
    return solve_one_point(128, TrigWeight.cos_cos(0.1))


@pytest.fixture(scope="session")
def bubble_ctx(shadow_weak):
    prob, st = shadow_weak
    return bubble.BubbleContext.from_shadow(prob, st)


@pytest.fixture(scope="session")
def singular_setup():
    """No free point, one fixed vortex alpha = 1/2 at the origin, n = 128."""
    grid = TorusGrid(128)
    prob = shadow.ShadowProblem(2 * math.pi, TrigWeight.cos_cos(0.1), 1.0, grid, m=0,
                                fixed_singular=(((0.0, 0.0), 0.5),))
    st = shadow.newton_shadow(prob, shadow.ShadowState(points=np.zeros((0, 2)), w=TorusField.zeros(grid)), 1e-10)
    return prob, st, bubble.BubbleContext.from_shadow(prob, st)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
