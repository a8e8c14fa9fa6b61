import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from pencilbeam.geom_sphere import north_pole, stereo_inverse
from pencilbeam.measures import PhaseSpaceMeasure
from pencilbeam.wasserstein import (
    InstanceTooLarge,
    MetricSpec,
    distance,
    restrict_to_window,
    w1_kappa,
    witness_pairing,
    write_w1_csv,
)


def atoms(x, theta, w):
    return PhaseSpaceMeasure(np.asarray(x, float), np.asarray(theta, float), np.asarray(w, float))


def random_measure(rng, n, d=2, scale=1.0, integer=False):
    x = rng.uniform(-scale, scale, (n, d))
    theta = stereo_inverse(rng.uniform(-0.5, 0.5, (n, d - 1)))
    w = rng.integers(1, 3, n).astype(float) if integer else rng.uniform(0.1, 1.0, n)
    return atoms(x, theta, w)


def brute_force_unbalanced(mu, nu, spec):
    """Cheapest partial matching of unit-mass copies; unmatched mass costs 1 per unit."""
    def units(m):
        return [(m.x[i], m.theta[i]) for i in range(len(m)) for _ in range(int(m.w[i]))]

    a, b = units(mu), units(nu)
    cost = np.array([[spec.kappa * float(distance(p[0], p[1], q[0], q[1], spec)) for q in b] for p in a])
    best = len(a) + len(b)
    for k in range(min(len(a), len(b)) + 1):
        for rows in itertools.combinations(range(len(a)), k):
            for cols in itertools.permutations(range(len(b)), k):
                best = min(best, sum(cost[r, c] for r, c in zip(rows, cols)) + len(a) + len(b) - 2 * k)
    return best


NORTH = north_pole(2)


# --------------------------------------------------------------------------- closed forms

def test_identical_measures_are_at_distance_zero(rng):
    mu = random_measure(rng, 6)
    assert w1_kappa(mu, mu, MetricSpec(2.0)).value == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("r,kappa", [(0.1, 1.0), (0.3, 4.0), (0.5, 4.0), (1.7, 1.0), (0.05, 2.5)])
@pytest.mark.parametrize("exact", [False, True])
def test_two_unit_deltas(r, kappa, exact):
    mu = atoms([[0.0, 0.0]], [NORTH], [1.0])
    nu = atoms([[r, 0.0]], [NORTH], [1.0])
    res = w1_kappa(mu, nu, MetricSpec(kappa), exact_rational=exact)
    assert res.value == pytest.approx(min(kappa * r, 2.0), abs=1e-9)


def test_two_deltas_separated_in_angle_only():
    a = 0.3
    mu = atoms([[0.0, 0.0]], [NORTH], [1.0])
    nu = atoms([[0.0, 0.0]], [[np.sin(a), np.cos(a)]], [1.0])
    assert w1_kappa(mu, nu, MetricSpec(2.0)).value == pytest.approx(2 * a, abs=1e-9)
    chord = 2 * np.sin(a / 2)
    assert w1_kappa(mu, nu, MetricSpec(2.0, angular="chord")).value == pytest.approx(2 * chord, abs=1e-9)


def test_mass_surplus_costs_sup_norm():
    p = [[0.2, -0.4]]
    assert w1_kappa(atoms(p, [NORTH], [2.0]), atoms(p, [NORTH], [1.0]), MetricSpec(3.0)).value == pytest.approx(1.0)


def test_rational_path_reports_exact_fraction():
    mu = atoms([[0.0, 0.0], [1.0, 0.0]], [NORTH, NORTH], [1.0, 0.5])
    nu = atoms([[0.25, 0.0]], [NORTH], [1.0])
    res = w1_kappa(mu, nu, MetricSpec(1.0), exact_rational=True)
    lp = w1_kappa(mu, nu, MetricSpec(1.0))
    assert res.meta["exact_value"] == pytest.approx(0.75)
    assert res.value == pytest.approx(lp.value, abs=1e-9)


def test_rational_path_rejects_large_instances(rng):
    with pytest.raises(InstanceTooLarge):
        w1_kappa(random_measure(rng, 7), random_measure(rng, 7), MetricSpec(1.0), exact_rational=True)


def test_cap_on_support_size(rng):
    with pytest.raises(InstanceTooLarge):
        w1_kappa(random_measure(rng, 20), random_measure(rng, 20), MetricSpec(1.0), cap=30)


def test_kappa_below_one_is_rejected():
    with pytest.raises(ValueError):
        MetricSpec(0.5)


# --------------------------------------------------------------------------- oracle equivalence

@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1.0, 2.0, 5.0]))
def test_matches_brute_force_unbalanced_transport(seed, n_mu, n_nu, kappa):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng, n_mu, scale=0.6, integer=True)
    nu = random_measure(rng, n_nu, scale=0.6, integer=True)
    spec = MetricSpec(kappa)
    assert w1_kappa(mu, nu, spec).value == pytest.approx(brute_force_unbalanced(mu, nu, spec), abs=1e-9)


def test_brute_force_on_shared_support():
    x = [[0.0, 0.0], [0.4, 0.1], [-0.3, 0.2]]
    th = [NORTH] * 3
    mu = atoms(x, th, [2, 1, 0])
    nu = atoms(x, th, [1, 1, 2])
    spec = MetricSpec(1.5)
    # zero-weight atoms contribute no units to the enumeration
    assert w1_kappa(mu, nu, spec).value == pytest.approx(brute_force_unbalanced(mu, nu, spec), abs=1e-9)


# --------------------------------------------------------------------------- metric properties

def test_symmetry_and_triangle_inequality(rng):
    spec = MetricSpec(2.0)
    for _ in range(10):
        a, b, c = (random_measure(rng, 5) for _ in range(3))
        ab = w1_kappa(a, b, spec).value
        assert ab == pytest.approx(w1_kappa(b, a, spec).value, abs=1e-9)
        assert ab <= w1_kappa(a, c, spec).value + w1_kappa(c, b, spec).value + 1e-9


def classical_w1(mu, nu, spec):
    """Balanced transport cost by a plan LP, independent of the dual formulation."""
    D = distance(mu.x[:, None], mu.theta[:, None], nu.x[None], nu.theta[None], spec)
    n, m = D.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    res = optimize.linprog(D.ravel(), A_eq=A, b_eq=np.r_[mu.w, nu.w], bounds=(0, None), method="highs")
    return res.fun


def test_upper_bounds(rng):
    spec = MetricSpec(3.0)
    for _ in range(5):
        mu = random_measure(rng, 5)
        nu = random_measure(rng, 5)
        nu = nu.scaled(mu.mass / nu.mass)
        val = w1_kappa(mu, nu, spec).value
        assert val <= mu.mass + nu.mass + 1e-9
        assert val <= spec.kappa * classical_w1(mu, nu, spec) + 1e-9


def test_monotone_in_kappa(rng):
    mu, nu = random_measure(rng, 8), random_measure(rng, 8)
    vals = [w1_kappa(mu, nu, MetricSpec(k)).value for k in (1.0, 2.0, 4.0, 8.0, 16.0)]
    assert np.all(np.diff(vals) >= -1e-9)


def test_random_feasible_witnesses_are_dominated(rng):
    kappa = 2.0
    spec = MetricSpec(kappa)
    mu, nu = random_measure(rng, 10), random_measure(rng, 10)
    res = w1_kappa(mu, nu, spec)
    for k in range(100):
        if k % 2:
            u = rng.normal(size=2)
            u *= rng.uniform(0, kappa) / np.linalg.norm(u)
            v = rng.normal(size=2)
            v *= rng.uniform(0, kappa) / np.linalg.norm(v)
            c = rng.uniform(-1, 1)
            psi = lambda x, t, u=u, v=v, c=c: np.clip(x @ u + t @ v + c, -1, 1)
        else:
            x0 = rng.uniform(-1, 1, 2)
            t0 = stereo_inverse(rng.uniform(-0.5, 0.5, 1))
            a = rng.uniform(-1, 1)
            psi = lambda x, t, x0=x0, t0=t0, a=a: np.clip(a - kappa * distance(x, t, x0, t0, spec), -1, 1)
        w = witness_pairing(mu, nu, psi, spec)
        assert w.scale == 1.0
        assert w.value <= res.value + 1e-9


def test_constant_witness_gives_mass_difference(rng):
    mu, nu = random_measure(rng, 4), random_measure(rng, 3)
    w = witness_pairing(mu, nu, lambda x, t: np.ones(len(x)), MetricSpec(1.0))
    assert w.value == pytest.approx(mu.mass - nu.mass)
    assert abs(w.value) <= w1_kappa(mu, nu, MetricSpec(1.0)).value + 1e-9


def test_steep_witness_is_rescaled_into_the_ball(rng):
    mu, nu = random_measure(rng, 6), random_measure(rng, 6)
    spec = MetricSpec(1.0)
    w = witness_pairing(mu, nu, lambda x, t: np.sin(20 * x[:, 0]), spec)
    assert w.scale < 1.0
    assert w.value <= w1_kappa(mu, nu, spec).value + 1e-9


def test_sparsified_solve_matches_all_pairs(rng):
    mu, nu = random_measure(rng, 120, d=3), random_measure(rng, 120, d=3)
    spec = MetricSpec(4.0)
    full = w1_kappa(mu, nu, spec)
    sparse = w1_kappa(mu, nu, spec, exact_pairs=0, k=8)
    assert sparse.meta["mode"] == "knn+generation"
    assert sparse.lower - 1e-9 <= full.value <= sparse.value + 1e-9
    assert sparse.value == pytest.approx(full.value, abs=max(sparse.dual_gap, 1e-7))


def test_dual_potential_is_feasible(rng):
    mu, nu = random_measure(rng, 8), random_measure(rng, 8)
    spec = MetricSpec(3.0)
    res = w1_kappa(mu, nu, spec)
    D = distance(res.x[:, None], res.theta[:, None], res.x[None], res.theta[None], spec)
    assert np.all(np.abs(res.psi) <= 1 + 1e-9)
    assert np.all(res.psi[:, None] - res.psi[None] <= spec.kappa * D + 1e-9)


# --------------------------------------------------------------------------- windows and output

def test_window_restriction(rng):
    mu = random_measure(rng, 40)
    same = restrict_to_window(mu, ([-2, -2], [2, 2]))
    assert len(same) == len(mu) and same.dropped_mass == 0.0
    empty = restrict_to_window(mu, ([5, 5], [6, 6]))
    assert empty.mass == 0.0 and empty.dropped_mass == pytest.approx(mu.mass)
    left = restrict_to_window(mu, ([-2, -2], [0, 2]))
    right = restrict_to_window(mu, ([np.nextafter(0, 1), -2], [2, 2]))
    assert left.mass + right.mass == pytest.approx(mu.mass)


def test_windowed_distance_reports_dropped_mass():
    mu = atoms([[0.0, 0.0], [3.0, 0.0]], [NORTH, NORTH], [1.0, 0.5])
    nu = atoms([[0.0, 0.0]], [NORTH], [1.0])
    res = w1_kappa(mu, nu, MetricSpec(1.0, window=([-1, -1], [1, 1])))
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert res.dropped_mass == pytest.approx(0.5)


def test_csv_output(tmp_path):
    path = tmp_path / "w1.csv"
    write_w1_csv(path, [{"kappa": 2.0, "value": 0.125, "dual_gap": 0.0, "dropped_mass": 0.0,
                         "metric_choice": "sum:geodesic"}])
    rows = list(csv.DictReader(open(path)))
    assert rows[0]["kappa"] == "2.0" and rows[0]["metric_choice"] == "sum:geodesic"
    assert float(rows[0]["value"]) == 0.125
