"""Study orchestration: (eps, kappa) scaling of the pencil-beam error, the g -> 1 trend, manifests.

Configurations are JSON documents; every key is listed in `StudyConfig`. A manifest
embeds the full configuration, so `run_from_manifest` reproduces the CSV outputs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .ballistic import ballistic_point_pairing
from .geom_sphere import BETA, north_pole, stereo_inverse
from .io import dump_json
from .kernels import MediumProfile, ScatteringParams, b_from_sigma, frac_laplacian_constant, sphere_constant
from .measures import PhaseSpaceMeasure
from .pencil_beam import AxisProfiles, sample_J
from .rte_mc import HistogramSpec, PointSource, g_ladder_study
from .wasserstein import MetricSpec, w1_kappa

SCALING_COLUMNS = ["eps", "kappa", "eps_kappa", "regime", "W", "witness_lower", "ballistic_mass", "beam_mass",
                   "slope", "r2", "slope_lo", "slope_hi", "slope_ok"]
CONVERGENCE_COLUMNS = ["g", "delta", "kappa", "below_kappa0", "W", "mc_error", "ot_gap", "n_particles", "seed",
                       "mc_mass", "beam_mass"]
RESIDUAL_GATE = 0.05


class ConfigError(ValueError):
    pass


def make_field(spec):
    """Constant number, {"type": "linear", "value", "gradient"} or {"type": "tabulated", "depth", "values"}."""
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda x: np.full(np.shape(x)[:-1], c)
    kind = spec.get("type")
    if kind == "linear":
        c, grad = float(spec["value"]), np.asarray(spec["gradient"], float)
        return lambda x: c + np.asarray(x, float) @ grad
    if kind == "tabulated":
        z, vals = np.asarray(spec["depth"], float), np.asarray(spec["values"], float)
        return lambda x: np.interp(np.asarray(x, float)[..., -1], z, vals)
    raise ConfigError(f"unknown field type {kind!r}; use a number, 'linear' or 'tabulated'")


def _constant(spec) -> float | None:
    return float(spec) if isinstance(spec, (int, float)) else None


@dataclass
class StudyConfig:
    d: int = 3
    s: float = 0.75
    s_prime: float = 0.7
    m: float = 1.0
    eps: list = field(default_factory=lambda: [2.0**-k for k in range(3, 8)])
    kappa: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    lam: object = 4.0
    lam0: float | None = None
    sigma: object = 0.1
    metric: str = "sum"
    angular: str = "geodesic"
    regime: str = "small"
    kappa0: float = 1.0
    seed: int = 0
    n_samples: int = 100_000
    n_steps: int = 200
    depth_intervals: int = 13
    depth_nodes: int = 8
    # convergence study
    g_ladder: list = field(default_factory=lambda: [0.9, 0.99, 0.999])
    mc_eps: float = 0.05
    mc_kappa: float = 4.0
    mc_particles: int = 100_000
    mc_batches: int = 16
    n_bootstrap: int = 8
    x_half: float = 0.2
    depth_window: list = field(default_factory=lambda: [0.2, 1.4])
    v_half: float = 0.1
    bins: list = field(default_factory=lambda: [4, 4, 4])
    domain_margin: float = 1.0
    output_dir: str = "out"

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if not 0 < self.s < 1:
            raise ConfigError("s must lie in (0, 1)")
        lo = 2 * self.s - 1 if self.d == 2 else 0.0
        if not (max(lo, 0.0) < self.s_prime < self.s):
            raise ConfigError(f"s_prime={self.s_prime} outside the admissible window ({max(lo, 0.0)}, {self.s}) "
                              f"for d={self.d}; choose s_prime strictly between these values")
        eps = np.asarray(self.eps, float)
        if len(eps) < 2 or np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
            raise ConfigError("eps must be a strictly decreasing list of at least two positive values")
        if any(k < 1 for k in self.kappa) or self.mc_kappa < 1:
            raise ConfigError("every kappa must be at least 1")
        if self.regime not in ("small", "any"):
            raise ConfigError("regime must be 'small' (all eps*kappa <= 1) or 'any'")
        if self.regime == "small" and eps[0] * max(self.kappa) > 1:
            raise ConfigError(f"eps*kappa reaches {eps[0] * max(self.kappa):.3g} > 1 under regime 'small'; "
                              "drop the largest kappa or eps, or set regime to 'any'")
        if self.metric not in ("sum", "l2"):
            raise ConfigError("metric must be 'sum' or 'l2'")
        if self.angular not in ("geodesic", "chord"):
            raise ConfigError("angular must be 'geodesic' or 'chord'")
        if len(self.bins) != 3:
            raise ConfigError("bins lists counts per transversal x axis, depth axis and chart axis")
        for g in self.g_ladder:
            if not 0 < g < 1:
                raise ConfigError("g values must lie in (0, 1)")
        if self.lam0 is None:
            c = _constant(self.lam)
            if c is None:
                raise ConfigError("a non-constant lam needs an explicit lower bound lam0")
            self.lam0 = c
        if self.lam0 <= 0:
            raise ConfigError("lam0 must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "StudyConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("config", data))

    def medium(self) -> MediumProfile:
        b = b_from_sigma(1.0, self.d, self.s, self.m)
        sig = make_field(self.sigma)
        return MediumProfile(lam=make_field(self.lam), sigma=sig, b=lambda x: float(b) * sig(x), lam0=self.lam0)

    def metric_spec(self, kappa: float) -> MetricSpec:
        return MetricSpec(kappa=kappa, angular=self.angular, combine=self.metric)


# --------------------------------------------------------------------------- scaling study

def _depth_rule(lam0: float, intervals: int, nodes: int):
    """Composite Gauss rule on [0, 40/lam0] with geometrically graded panels towards 0."""
    top = 40.0 / lam0
    edges = np.concatenate([[0.0], top * np.geomspace(2.0 ** (1 - intervals), 1.0, intervals)])
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    t = np.concatenate([(a + b) / 2 + (b - a) / 2 * gx for a, b in zip(edges[:-1], edges[1:])])
    w = np.concatenate([(b - a) / 2 * gw for a, b in zip(edges[:-1], edges[1:])])
    return t, w


def unit_depth_samples(cfg: StudyConfig):
    """Norms |X'|, |V| of the normalised beam at unit depth for constant sigma."""
    sig = _constant(cfg.sigma)
    if sig is None or _constant(cfg.lam) is None:
        raise ConfigError("the scaling study uses self-similarity and needs constant lam and sigma")
    Xs, Vs = sample_J([1.0], cfg.n_samples, AxisProfiles.constant(sig, float(cfg.lam)), cfg.s, cfg.d, cfg.seed,
                      cfg.n_steps)
    return np.linalg.norm(Xs[0], axis=1), np.linalg.norm(Vs[0], axis=1)


def axis_distance(xp_norm, v_norm, cfg: StudyConfig):
    """Distance from (x', x^d, theta) to the beam axis {(t N, N)} given |x'| and the chart radius |v|."""
    ang = 2 * np.arctan(v_norm) if cfg.angular == "geodesic" else 2 * v_norm / np.sqrt(1 + v_norm**2)
    return xp_norm + ang if cfg.metric == "sum" else np.hypot(xp_norm, ang)


def beam_vs_ballistic(eps: float, kappa: float, Y: np.ndarray, Z: np.ndarray, cfg: StudyConfig):
    """Exact W1_kappa between the ballistic point-source solution and the on-axis beam, plus the witness.

    For each depth t the optimal potential is max(1 - kappa dist(z, axis), -1): it is
    kappa-Lipschitz and attains the depth-wise upper bound, so
    W = int Lambda(t) (1 - E[w(V) max(1 - kappa dist, -1)]) dt with w = <eps V>^{-2(d-1)}.
    The witness uses exp(-kappa |x'|) in place of the optimal potential.
    """
    lam = float(cfg.lam)
    a, b = 1 + 1 / (2 * cfg.s), 1 / (2 * cfg.s)
    n = cfg.d - 1
    ts, tw = _depth_rule(lam, cfg.depth_intervals, cfg.depth_nodes)
    lam_f = make_field(cfg.lam)
    pole = north_pole(cfg.d)
    ballistic = ballistic_point_pairing(lambda x, th: 1.0, lambda x: float(lam_f(x)), np.zeros(cfg.d), pole,
                                        cfg.lam0)
    beam_opt = beam_wit = beam_mass = 0.0
    for t, w in zip(ts, tw):
        v = eps * t**b * Z
        xp = 2 * eps * t**a * Y
        weight = (1 + v * v) ** (-n)
        lw = w * np.exp(-lam * t)
        beam_opt += lw * np.mean(weight * np.maximum(1 - kappa * axis_distance(xp, v, cfg), -1.0))
        beam_wit += lw * np.mean(weight * np.exp(-kappa * xp))
        beam_mass += lw * np.mean(weight)
    return ballistic - beam_opt, ballistic - beam_wit, ballistic, beam_mass


def fit_slope(x, y):
    """Least-squares slope of log y on log x with its R^2."""
    lx, ly = np.log(x), np.log(y)
    p = np.polyfit(lx, ly, 1)
    res = ly - np.polyval(p, lx)
    r2 = 1.0 - res.var() / ly.var() if ly.var() > 0 else 1.0
    return float(p[0]), float(r2)


def slope_band(cfg: StudyConfig) -> tuple[float, float]:
    return min(2 * cfg.s_prime, 1.0) - 0.15, 1.1


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for r in rows:
            out.writerow([_fmt(r[c]) for c in columns])
            fh.flush()


@dataclass
class StudyResult:
    rows: list
    summary: dict
    csv_path: Path | None = None


def run_scaling_study(cfg: StudyConfig, out_dir=None) -> StudyResult:
    """Rows (eps, kappa, W, witness) over the ladders, and a log-log slope fit against eps*kappa."""
    Y, Z = unit_depth_samples(cfg)
    rows = []
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "scaling.csv"
        fh = open(path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCALING_COLUMNS[:8])
    try:
        for eps in cfg.eps:
            for kappa in cfg.kappa:
                W, wit, vb, vm = beam_vs_ballistic(eps, kappa, Y, Z, cfg)
                row = {"eps": eps, "kappa": kappa, "eps_kappa": eps * kappa,
                       "regime": "upper" if eps * kappa <= 1 else "lower",
                       "W": W, "witness_lower": wit, "ballistic_mass": vb, "beam_mass": vm}
                rows.append(row)
                if path is not None:
                    writer.writerow([_fmt(row[c]) for c in SCALING_COLUMNS[:8]])
                    fh.flush()
    finally:
        if path is not None:
            fh.close()
    fit_rows = [r for r in rows if r["regime"] == "upper"]
    slope, r2 = fit_slope([r["eps_kappa"] for r in fit_rows], [r["W"] for r in fit_rows])
    lo, hi = slope_band(cfg)
    asserted = (1 - r2) < RESIDUAL_GATE
    ok = (lo <= slope <= hi) if asserted else None
    for r in rows:
        r.update(slope=slope, r2=r2, slope_lo=lo, slope_hi=hi, slope_ok="n/a" if ok is None else ok)
    if path is not None:
        _write_rows(path, SCALING_COLUMNS, rows)
    summary = {"slope": slope, "r2": r2, "band": [lo, hi], "asserted": asserted, "slope_ok": ok,
               "witness_positive": all(r["witness_lower"] > 0 for r in fit_rows)}
    return StudyResult(rows, summary, path)


# --------------------------------------------------------------------------- convergence study

def convergence_spec(cfg: StudyConfig) -> HistogramSpec:
    nx, nz, nv = cfg.bins
    n = cfg.d - 1
    x_edges = tuple([np.linspace(-cfg.x_half, cfg.x_half, nx + 1)] * n +
                    [np.linspace(cfg.depth_window[0], cfg.depth_window[1], nz + 1)])
    v_edges = tuple([np.linspace(-cfg.v_half, cfg.v_half, nv + 1)] * n)
    return HistogramSpec(x_edges, v_edges)


def beam_histogram(cfg: StudyConfig, spec: HistogramSpec, eps: float, seed: int) -> PhaseSpaceMeasure:
    """On-axis beam binned on `spec`.

    Depths are drawn uniformly on the window and unit-depth samples are rescaled self-similarly.
    """
    sig = _constant(cfg.sigma)
    lam = _constant(cfg.lam)
    if sig is None or lam is None:
        raise ConfigError("the convergence study needs constant lam and sigma")
    Xs, Vs = sample_J([1.0], cfg.n_samples, AxisProfiles.constant(sig, lam), cfg.s, cfg.d, seed, cfg.n_steps)
    rng = np.random.Generator(np.random.Philox(key=seed + 1))
    z0, z1 = cfg.depth_window
    t = z0 + (z1 - z0) * rng.random(cfg.n_samples)
    a, b = 1 + 1 / (2 * cfg.s), 1 / (2 * cfg.s)
    xp = 2 * eps * Xs[0] * (t**a)[:, None]
    v = eps * Vs[0] * (t**b)[:, None]
    w = np.exp(-lam * t) * (z1 - z0) / cfg.n_samples * (1 + np.sum(v * v, axis=1)) ** (-(cfg.d - 1))
    x = np.concatenate([xp, t[:, None]], axis=1)
    k = spec.index(x, stereo_inverse(v))
    inside = k >= 0
    hist = np.bincount(k[inside], weights=w[inside], minlength=int(np.prod(spec.shape)))
    xc, tc = spec.centres()
    return PhaseSpaceMeasure(xc, tc, hist, spec.window, dropped_mass=float(w[~inside].sum()))


def _w1_hist(mu_w, nu: PhaseSpaceMeasure, spec_metric: MetricSpec):
    mu = PhaseSpaceMeasure(nu.x, nu.theta, mu_w)
    keep = (mu.w > 0) | (nu.w > 0)
    mu = PhaseSpaceMeasure(mu.x[keep], mu.theta[keep], mu.w[keep])
    nv = PhaseSpaceMeasure(nu.x[keep], nu.theta[keep], nu.w[keep])
    return w1_kappa(mu, nv, spec_metric)


def w1_with_bootstrap(mc: PhaseSpaceMeasure, beam: PhaseSpaceMeasure, metric: MetricSpec, n_boot: int, seed: int):
    """W1 between an MC histogram and a reference on the same bins, with a batch-bootstrap error."""
    res = _w1_hist(mc.w, beam, metric)
    hb = mc.meta["hist_batches"]
    rng = np.random.Generator(np.random.Philox(key=seed))
    boots = [_w1_hist(hb[rng.integers(0, len(hb), len(hb))].sum(axis=0), beam, metric).value for _ in range(n_boot)]
    return res, float(np.std(boots, ddof=1)) if n_boot > 1 else 0.0


def run_convergence_study(cfg: StudyConfig, out_dir=None) -> StudyResult:
    """W1 between u^g (Monte Carlo) and the beam approximation along the g ladder, with a trend report."""
    spec = convergence_spec(cfg)
    eps = cfg.mc_eps
    beam = beam_histogram(cfg, spec, eps, cfg.seed)
    medium = cfg.medium()
    pole = north_pole(cfg.d)
    lo = np.concatenate([np.full(cfg.d - 1, -cfg.x_half), [cfg.depth_window[0]]]) - cfg.domain_margin
    hi = np.concatenate([np.full(cfg.d - 1, cfg.x_half), [cfg.depth_window[1]]]) + cfg.domain_margin
    lo[-1] = min(lo[-1], -cfg.domain_margin)
    b_max = float(b_from_sigma(_constant(cfg.sigma), cfg.d, cfg.s, cfg.m))
    runs = g_ladder_study(PointSource(np.zeros(cfg.d), pole), medium, cfg.s, cfg.m, eps, cfg.g_ladder,
                          cfg.mc_particles, spec, cfg.seed, d=cfg.d, n_batches=cfg.mc_batches, b_max=b_max,
                          domain=(lo, hi))
    metric = cfg.metric_spec(cfg.mc_kappa)
    rows = []
    for k, run in enumerate(runs):
        res, err = w1_with_bootstrap(run, beam, metric, cfg.n_bootstrap, cfg.seed + 1000 + k)
        rows.append({"g": run.meta["g"], "delta": run.meta["delta"], "kappa": cfg.mc_kappa,
                     "below_kappa0": cfg.mc_kappa < cfg.kappa0, "W": res.value, "mc_error": err,
                     "ot_gap": res.dual_gap, "n_particles": cfg.mc_particles, "seed": run.meta["seed"],
                     "mc_mass": run.mass, "beam_mass": beam.mass})
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "convergence.csv"
        _write_rows(path, CONVERGENCE_COLUMNS, rows)
    summary = trend_report(rows)
    return StudyResult(rows, summary, path)


def trend_report(rows) -> dict:
    g = [r["g"] for r in rows]
    W = [r["W"] for r in rows]
    err = [np.hypot(r["mc_error"], r["ot_gap"]) for r in rows]
    tau = float(stats.kendalltau(g, W).statistic) if len(rows) > 1 else 0.0
    steps = [W[i + 1] - W[i] for i in range(len(W) - 1)]
    within = [s <= 2 * np.hypot(err[i], err[i + 1]) for i, s in enumerate(steps)]
    return {"kendall_tau": tau, "steps": steps, "step_errors": [float(np.hypot(err[i], err[i + 1]))
                                                                 for i in range(len(steps))],
            "non_increasing_within_errors": bool(all(within)),
            "flagged_below_kappa0": any(r["below_kappa0"] for r in rows)}


# --------------------------------------------------------------------------- manifests

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit_manifest(cfg: StudyConfig, results: dict, out_dir) -> Path:
    """Write manifest.json: config echo, derived constants, versions, result summaries and output hashes."""
    out = Path(out_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    outputs = {name: {"path": str(r.csv_path.name), "sha256": _sha256(r.csv_path)}
               for name, r in results.items() if r.csv_path is not None}
    manifest = {
        "config": asdict(cfg),
        "constants": {
            "sphere_constant": sphere_constant(cfg.d, cfg.s),
            "frac_laplacian_constant": frac_laplacian_constant(cfg.d - 1, cfg.s),
            "beta": BETA,
            "b_per_unit_sigma": float(b_from_sigma(1.0, cfg.d, cfg.s, cfg.m)),
        },
        "versions": {"artifact": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "output_dir": str(out),
        "output_dir_created": created,
        "summaries": {name: r.summary for name, r in results.items()},
        "outputs": outputs,
    }
    path = out / "manifest.json"
    dump_json(path, manifest)
    return path


def run_study(cfg: StudyConfig, which: Sequence[str] = ("scaling",), out_dir=None) -> tuple[dict, Path]:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    runners = {"scaling": run_scaling_study, "convergence": run_convergence_study}
    results = {name: runners[name](cfg, out) for name in which}
    path = emit_manifest(cfg, results, out)
    if created:
        data = json.loads(path.read_text())
        data["output_dir_created"] = True
        dump_json(path, data)
    return results, path


def run_from_manifest(manifest_path, out_dir) -> tuple[dict, Path]:
    data = json.loads(Path(manifest_path).read_text())
    cfg = StudyConfig.from_dict(data["config"])
    return run_study(cfg, tuple(data["summaries"].keys()), out_dir)
