import numpy as np
import pytest
from scipy import integrate, stats

from pencilbeam.ballistic import ballistic_source_pairing
from pencilbeam.geom_sphere import north_pole, surface_weight
from pencilbeam.kernels import MediumProfile, ScatteringParams
from pencilbeam.rte_mc import (
    BoxCapSource,
    HistogramSpec,
    NonPositiveRate,
    PointSource,
    g_ladder_study,
    histogram_density,
    simulate,
    unit_rate,
)
from pencilbeam.measures import PhaseSpaceMeasure
from pencilbeam.wasserstein import MetricSpec, w1_kappa

PARAMS = ScatteringParams.narrow_beam(0.9, 0.5, 1.0, 0.2, 3)
SOURCE3 = BoxCapSource(np.array([-0.2, -0.2, 0.0]), np.array([0.2, 0.2, 0.1]), 0.3)


def small_spec(d=3, nx=4, nv=4):
    x_edges = tuple(np.linspace(-0.4, 0.4, nx + 1) for _ in range(d - 1)) + (np.linspace(0.0, 1.0, nx + 1),)
    v_edges = tuple(np.linspace(-0.3, 0.3, nv + 1) for _ in range(d - 1))
    return HistogramSpec(x_edges, v_edges)


# --------------------------------------------------------------------------- sources and bins

def test_cap_source_geometry(rng):
    src = BoxCapSource(np.zeros(3), np.ones(3), 0.5, mass=2.0)
    assert src.cap_area == pytest.approx(2 * np.pi * (1 - np.cos(0.5)))
    assert src.sup == pytest.approx(2.0 / src.cap_area)
    x, th = src.sample(rng, 200_000)
    assert np.all(th[:, -1] >= np.cos(0.5) - 1e-12)
    # the polar cosine is uniform on a cap
    assert th[:, -1].mean() == pytest.approx((1 + np.cos(0.5)) / 2, abs=3e-4)
    assert np.allclose(x.mean(axis=0), 0.5, atol=3e-3)


def test_cap_source_sampling_in_four_dimensions(rng):
    src = BoxCapSource(np.zeros(4), np.ones(4), 0.4)
    _, th = src.sample(rng, 1000)
    assert th.shape == (1000, 4) and np.all(th[:, -1] >= np.cos(0.4))
    assert np.allclose(np.linalg.norm(th, axis=1), 1.0)


def test_histogram_index_and_centres():
    spec = small_spec()
    xc, tc = spec.centres()
    assert np.array_equal(spec.index(xc, tc), np.arange(int(np.prod(spec.shape))))
    far = spec.index(np.array([[5.0, 0.0, 0.5]]), north_pole(3)[None])
    south = spec.index(np.zeros((1, 3)) + 0.1, -north_pole(3)[None])
    assert far[0] == -1 and south[0] == -1


def test_histogram_volumes_match_solid_angle_quadrature():
    spec = small_spec(nv=3)
    vol = spec.volumes()
    box = 0.8 * 0.8 * 1.0
    edges = spec.v_edges[0]
    for i in range(3):
        for j in range(3):
            want, _ = integrate.dblquad(lambda b, a: surface_weight(np.array([a, b]), 3), edges[i], edges[i + 1],
                                        edges[j], edges[j + 1], epsabs=1e-13)
            assert vol[..., i, j].sum() == pytest.approx(box * want, rel=1e-8)


def test_rates_must_be_positive():
    with pytest.raises(NonPositiveRate):
        simulate(SOURCE3, MediumProfile(lam0=0.0), PARAMS, 10)
    with pytest.raises(NonPositiveRate):
        simulate(SOURCE3, MediumProfile(), PARAMS, 10, b_max=-1.0)


# --------------------------------------------------------------------------- conservation

@pytest.fixture(scope="module")
def balance_run():
    medium = MediumProfile(lam=lambda x: 1.0 + 0.5 * np.tanh(x[..., -1]), lam0=1.0)
    functionals = (lambda x, t: medium.lam(x), lambda x, t: np.ones(len(x)))
    res = simulate(SOURCE3, medium, PARAMS, 40_000, small_spec(), seed=1, functionals=functionals)
    return medium, res


def test_absorbed_mass_equals_source_mass(balance_run):
    _, res = balance_run
    est, se = res.meta["functionals"][0], res.meta["functionals_se"][0]
    assert abs(est - SOURCE3.mass) < 3 * se


def test_total_mass_is_bounded_by_source_over_rate(balance_run):
    _, res = balance_run
    est, se = res.meta["functionals"][1], res.meta["functionals_se"][1]
    assert est <= SOURCE3.mass / 1.0 + 3 * se
    assert res.mass + res.meta["outside_mass"] == pytest.approx(est, rel=1e-9)


def test_smoothed_sup_norm_bound(balance_run):
    medium, res = balance_run
    dens = histogram_density(res)
    se = res.meta["hist_se"].reshape(dens.shape) / res.meta["spec"].volumes()
    assert np.all(res.w >= 0)
    assert np.all(dens <= SOURCE3.sup / medium.lam0 + 3 * se)


def test_no_scattering_matches_ballistic_pairing():
    d, lam = 2, 1.3
    src = BoxCapSource(np.array([-0.3, 0.0]), np.array([0.3, 0.2]), 0.4)
    medium = MediumProfile(lam=lam, lam0=lam)
    psi = lambda x, t: np.exp(-np.sum((x - np.array([0.1, 0.6])) ** 2, axis=-1)) * (1 + t[..., 0])
    res = simulate(src, medium, None, 200_000, seed=5, functionals=(psi,))
    est, se = res.meta["functionals"][0], res.meta["functionals_se"][0]
    # Gauss-Legendre nodes over box x arc for the ray oracle
    gx, gw = np.polynomial.legendre.leggauss(6)
    xs = 0.3 * gx
    ys = 0.1 + 0.1 * gx
    angles = 0.4 * gx
    nodes_x, nodes_t, weights = [], [], []
    for a, wa in zip(xs, gw * 0.3):
        for b, wb in zip(ys, gw * 0.1):
            for c, wc in zip(angles, gw * 0.4):
                nodes_x.append([a, b])
                nodes_t.append([np.sin(c), np.cos(c)])
                weights.append(wa * wb * wc * src.sup)
    want = ballistic_source_pairing(lambda x, t: float(psi(x, t)), lambda x: lam, nodes_x, nodes_t, weights, lam)
    assert abs(est - want) < 3 * se
    assert res.meta["collisions"] == 0


# --------------------------------------------------------------------------- reproducibility and errors

def test_identical_runs_are_byte_identical():
    a = simulate(SOURCE3, MediumProfile(), PARAMS, 3000, small_spec(), seed=11, n_batches=4)
    b = simulate(SOURCE3, MediumProfile(), PARAMS, 3000, small_spec(), seed=11, n_batches=4)
    c = simulate(SOURCE3, MediumProfile(), PARAMS, 3000, small_spec(), seed=12, n_batches=4)
    assert a.w.tobytes() == b.w.tobytes()
    assert a.w.tobytes() != c.w.tobytes()


def test_standard_error_shrinks_with_particle_count():
    psi = (lambda x, t: np.exp(-np.sum(x**2, axis=-1)),)
    se = [simulate(SOURCE3, MediumProfile(), PARAMS, n, seed=2, functionals=psi).meta["functionals_se"][0]
          for n in (10_000, 20_000)]
    assert se[1] / se[0] == pytest.approx(1 / np.sqrt(2), rel=0.2)


def test_two_seeds_agree_within_bootstrap_error():
    spec = small_spec(nx=3, nv=3)
    a = simulate(SOURCE3, MediumProfile(), PARAMS, 20_000, spec, seed=21)
    b = simulate(SOURCE3, MediumProfile(), PARAMS, 20_000, spec, seed=22)
    metric = MetricSpec(2.0)
    between = w1_kappa(a, b, metric).value
    # bootstrap error: distance from a run to its own batch-resampled replicates
    boot = np.random.default_rng(0)
    hb = a.meta["hist_batches"]
    replicas = [w1_kappa(a, PhaseSpaceMeasure(a.x, a.theta, hb[boot.integers(0, len(hb), len(hb))].sum(axis=0)),
                         metric).value for _ in range(16)]
    assert between < 3 * np.mean(replicas)


def test_isotropic_scattering_forgets_the_source_direction():
    params = ScatteringParams(0.0, 0.5, 1.0, 1.0, 1.0, 3)
    lam = 0.1
    medium = MediumProfile(lam=lam, b=10.0 / unit_rate(params), lam0=lam)
    edges = np.linspace(-1, 1, 9)
    bins = tuple((lambda x, t, lo=lo, hi=hi: ((t[:, -1] >= lo) & (t[:, -1] < hi)).astype(float))
                 for lo, hi in zip(edges[:-1], edges[1:]))
    res = simulate(PointSource(np.zeros(3), north_pole(3)), medium, params, 4000, seed=4, functionals=bins)
    est, se = res.meta["functionals"], res.meta["functionals_se"]
    expected = est.sum() / len(est)
    chi2 = np.sum(((est - expected) / se) ** 2)
    assert stats.chi2.sf(chi2, len(est) - 1) > 1e-3


def test_g_ladder_records_parameters_and_distinct_streams():
    runs = g_ladder_study(SOURCE3, MediumProfile(), 0.5, 1.0, 0.2, [0.9, 0.95], 500, small_spec(), seed=3)
    assert [r.meta["g"] for r in runs] == [0.9, 0.95]
    for r in runs:
        assert (1 - r.meta["g"]) ** 1.0 == pytest.approx(0.2 ** (2 * 0.5) * r.meta["delta"])
    assert runs[0].meta["seed"] != runs[1].meta["seed"]
