import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pencilbeam.ballistic import ballistic_point_pairing, ballistic_solve, ballistic_source_pairing
from pencilbeam.geom_sphere import north_pole

N3 = north_pole(3)


def const(c):
    return lambda x: c


def test_zero_source_gives_zero():
    assert ballistic_solve(lambda y, e: 0.0, const(1.0), np.zeros(3), N3, 1.0) == 0.0


@pytest.mark.parametrize("lam,h,gap", [(1.0, 0.5, 0.3), (2.5, 0.2, 1.0), (0.4, 2.0, 0.0)])
def test_slab_source_matches_exact_ray_integral(lam, h, gap):
    # the slab occupies depths [-gap - h, -gap] behind the point x = 0 along theta = N
    def f(y, e):
        return 1.0 if -gap - h <= y[-1] <= -gap else 0.0

    got = ballistic_solve(f, const(lam), np.zeros(3), N3, lam, breaks=(gap, gap + h))
    want = (1 - np.exp(-lam * h)) * np.exp(-lam * gap) / lam
    assert got == pytest.approx(want, rel=1e-7)


def test_transport_equation_residual():
    lam0 = 1.3

    def f(y, e):
        return np.exp(-np.sum((y - np.array([0.2, -0.1, 0.0])) ** 2))

    theta = np.array([0.6, 0.0, 0.8])
    x = np.array([0.1, 0.3, 0.4])
    h = 1e-3
    v = lambda p: ballistic_solve(f, const(lam0), p, theta, lam0)
    deriv = (v(x + h * theta) - v(x - h * theta)) / (2 * h)
    assert abs(deriv + lam0 * v(x) - f(x, theta)) < 1e-4


def test_unit_test_function_gives_inverse_rate():
    assert ballistic_point_pairing(lambda x, t: 1.0, const(2.0), np.zeros(3), N3, 2.0) == pytest.approx(0.5, rel=1e-9)


@pytest.mark.parametrize("kappa", [1.0, 4.0])
def test_on_axis_exponential_test_function(kappa):
    psi = lambda x, t: np.exp(-kappa * np.linalg.norm(x[:-1]))
    assert ballistic_point_pairing(psi, const(0.8), np.zeros(3), N3, 0.8) == pytest.approx(1 / 0.8, rel=1e-9)


def test_depth_test_function_gives_inverse_square_rate():
    lam0 = 1.7
    got = ballistic_point_pairing(lambda x, t: x[-1], const(lam0), np.zeros(3), N3, lam0)
    assert got == pytest.approx(1 / lam0**2, rel=1e-7)


@given(st.floats(0.2, 5.0), st.floats(0.0, 2.0))
def test_rate_as_test_function_gives_unit_mass(lam0, slope):
    lam = lambda x: lam0 + slope * np.sin(x[-1]) ** 2
    got = ballistic_point_pairing(lambda x, t: lam(x), lam, np.zeros(2), north_pole(2), lam0)
    assert got == pytest.approx(1.0, abs=1e-8)


def test_stronger_attenuation_lowers_pairing():
    psi = lambda x, t: 1.0 / (1.0 + x[-1] ** 2)
    weak = ballistic_point_pairing(psi, const(1.0), np.zeros(3), N3, 1.0)
    strong = ballistic_point_pairing(psi, lambda x: 1.0 + 0.5 * (x[-1] > 0.5), np.zeros(3), N3, 1.0, breaks=(0.5,))
    assert 0 < strong < weak


def test_pairing_is_linear_and_positive():
    lam = const(1.2)
    p1 = lambda x, t: np.cos(x[-1]) ** 2
    p2 = lambda x, t: np.exp(-x[-1])
    a = ballistic_point_pairing(p1, lam, np.zeros(3), N3, 1.2)
    b = ballistic_point_pairing(p2, lam, np.zeros(3), N3, 1.2)
    ab = ballistic_point_pairing(lambda x, t: 2 * p1(x, t) - 3 * p2(x, t), lam, np.zeros(3), N3, 1.2)
    assert ab == pytest.approx(2 * a - 3 * b, rel=1e-7)
    assert a > 0 and b > 0


def test_finite_horizon_truncates_ray():
    got = ballistic_point_pairing(lambda x, t: 1.0, const(1.0), np.zeros(3), N3, 1.0, t_max=2.0)
    assert got == pytest.approx(1 - np.exp(-2.0), rel=1e-9)


def test_source_pairing_sums_weighted_rays():
    nodes_x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    nodes_t = np.array([N3, N3])
    got = ballistic_source_pairing(lambda x, t: 1.0, const(2.0), nodes_x, nodes_t, [0.25, 0.75], 2.0)
    assert got == pytest.approx(0.5, rel=1e-9)
