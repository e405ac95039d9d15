import numpy as np
import pytest

from gridopt import grid_model as gm

TWO_BUS = """function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1.0 0 345 1 1.0 1.0;
    2 1 10 0 0 0 1 1.0 0 345 1 1.1 0.9;
];
mpc.gen = [
    1 10 0 300 -300 1.0 100 1 250 0;
];
mpc.branch = [
    1 2 0 0.1 0 250 250 250 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.02 10 0;
];
"""

# reference generator voltage pinned so the reduced-space parameterization
# (which keeps v_REF fixed) has the same optimum as the full-space problem
TWO_BUS_GEN2 = """function mpc = twobusg2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1.0 0 345 1 1.0 1.0;
    2 2 40 10 0 0 1 1.0 0 345 1 1.1 0.9;
];
mpc.gen = [
    1 10 0 300 -300 1.0 100 1 250 0;
    2 30 0 300 -300 1.0 100 1 250 0;
];
mpc.branch = [
    1 2 0.02 0.1 0.04 250 250 250 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.02 10 0;
    2 0 0 3 0.04 15 0;
];
"""

RING_3BUS = """function mpc = ring3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1.0 0 345 1 1.1 0.9;
    2 2 20 5 0 0 1 1.0 0 345 1 1.1 0.9;
    3 1 30 9 0 0 1 1.0 0 345 1 1.1 0.9;
];
mpc.gen = [
    1 30 0 300 -300 1.0 100 1 250 0;
    2 20 0 300 -300 1.0 100 1 250 0;
];
mpc.branch = [
    1 2 0.01 0.06 0.02 250 250 250 0 0 1 -360 360;
    2 3 0.01 0.06 0.02 250 250 250 0 0 1 -360 360;
    1 3 0.01 0.06 0.02 250 250 250 0 0 1 -360 360;
    1 3 0.02 0.12 0.02 100 100 100 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.02 10 0;
    2 0 0 3 0.03 12 0;
];
"""


@pytest.fixture(scope="session")
def case9():
    return gm.load_bundled_case("case9")


@pytest.fixture(scope="session")
def case118():
    return gm.load_bundled_case("case118")


@pytest.fixture(scope="session")
def two_bus():
    return gm.parse_matpower(TWO_BUS, name="twobus")


@pytest.fixture(scope="session")
def two_bus_gen2():
    return gm.parse_matpower(TWO_BUS_GEN2, name="twobusg2")


@pytest.fixture(scope="session")
def ring3():
    return gm.parse_matpower(RING_3BUS, name="ring3")


def fd_gradient(fun, x, eps=1e-6):
    """Central finite differences of a scalar function."""
    g = np.zeros(len(x))
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def fd_jacobian(fun, x, eps=1e-6):
    """Central finite differences of a vector function."""
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((len(f0), len(x)))
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        J[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * eps)
    return J


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))
