"""Monte Carlo solver for the stationary transport equation with (g, s, m) scattering.

Free flights are drawn by delta tracking against a majorant of the scattering
rate; absorption only attenuates the particle weight. Each flight deposits its
length times the weight at a uniformly chosen point of the flight, which is an
unbiased track-length estimate of every bin integral and functional.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .geom_sphere import north_pole, stereo_inverse, stereo_project, surface_weight
from .kernels import MediumProfile, ScatteringParams
from .measures import PhaseSpaceMeasure

ROULETTE_THRESHOLD = 1e-6
ROULETTE_SURVIVAL = 10.0
_TAU_CAP = -np.log(1e-14)
_GL8 = np.polynomial.legendre.leggauss(8)


class WeightUnderflow(RuntimeError):
    """Raised when roulette cannot keep any history alive (diagnostic only)."""


class NonPositiveRate(ValueError):
    pass


# --------------------------------------------------------------------------- sources

@dataclass(frozen=True)
class PointSource:
    """Unit-direction pencil source: all mass at (x0, theta0)."""

    x0: np.ndarray
    theta0: np.ndarray
    mass: float = 1.0

    def sample(self, rng: np.random.Generator, n: int):
        d = len(self.x0)
        return np.tile(np.asarray(self.x0, float), (n, 1)), np.tile(np.asarray(self.theta0, float), (n, 1))

    @property
    def sup(self) -> float:
        return np.inf


@dataclass(frozen=True)
class BoxCapSource:
    """Constant density on box x cap: x in [lo, hi], angle to the north pole at most `half_angle`."""

    lo: np.ndarray
    hi: np.ndarray
    half_angle: float
    mass: float = 1.0

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def cap_area(self) -> float:
        d = self.d
        if d == 2:
            return 2.0 * self.half_angle
        from scipy import integrate

        val, _ = integrate.quad(lambda p: np.sin(p) ** (d - 2), 0.0, self.half_angle)
        return kernels.sphere_area(d - 1) * val

    @property
    def sup(self) -> float:
        return self.mass / (float(np.prod(np.asarray(self.hi) - np.asarray(self.lo))) * self.cap_area)

    def density(self, x, theta) -> np.ndarray:
        x = np.asarray(x, float)
        theta = np.asarray(theta, float)
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=-1) & (theta[..., -1] >= np.cos(self.half_angle))
        return np.where(inside, self.sup, 0.0)

    def sample(self, rng: np.random.Generator, n: int):
        d = self.d
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        x = lo + (hi - lo) * rng.random((n, d))
        out = np.empty((0, d))
        cmin = np.cos(self.half_angle)
        while len(out) < n:
            if d == 3:
                mu = cmin + (1.0 - cmin) * rng.random(n)
                phi = 2 * np.pi * rng.random(n)
                r = np.sqrt(np.maximum(1.0 - mu * mu, 0.0))
                cand = np.stack([r * np.cos(phi), r * np.sin(phi), mu], axis=1)
            else:
                cand = rng.standard_normal((4 * n, d))
                cand /= np.linalg.norm(cand, axis=1)[:, None]
                cand = cand[cand[:, -1] >= cmin]
            out = np.concatenate([out, cand])
        return x, out[:n]


# --------------------------------------------------------------------------- tallies

@dataclass(frozen=True)
class HistogramSpec:
    """Tensor bins in x (d edge arrays) times chart bins in v about the north pole (d - 1 edge arrays)."""

    x_edges: tuple
    v_edges: tuple

    @property
    def d(self) -> int:
        return len(self.x_edges)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(e) - 1 for e in self.x_edges) + tuple(len(e) - 1 for e in self.v_edges)

    @property
    def window(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([e[0] for e in self.x_edges]), np.array([e[-1] for e in self.x_edges]))

    def index(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Flat bin index, or -1 outside the window or near the south pole."""
        idx = np.zeros(len(x), dtype=np.int64)
        ok = theta[:, -1] > -1.0 + 1e-9
        v = np.zeros((len(x), self.d - 1))
        v[ok] = stereo_project(theta[ok])
        coords = [x[:, i] for i in range(self.d)] + [v[:, i] for i in range(self.d - 1)]
        for c, edges, size in zip(coords, self.x_edges + self.v_edges, self.shape):
            k = np.searchsorted(edges, c, side="right") - 1
            ok &= (k >= 0) & (k < size)
            idx = idx * size + np.clip(k, 0, size - 1)
        return np.where(ok, idx, -1)

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Bin centres as (x, theta) arrays in flat bin order."""
        mids = [0.5 * (np.asarray(e)[1:] + np.asarray(e)[:-1]) for e in self.x_edges + self.v_edges]
        mesh = np.meshgrid(*mids, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        return flat[:, : self.d], stereo_inverse(flat[:, self.d:])

    def volumes(self) -> np.ndarray:
        """dx volume times solid angle of each bin (4-point Gauss rule per chart axis)."""
        xv = np.ones(1)
        for e in self.x_edges:
            xv = np.multiply.outer(xv, np.diff(e))
        gx, gw = np.polynomial.legendre.leggauss(4)
        angle = np.ones(1)
        per_axis = []
        for e in self.v_edges:
            e = np.asarray(e)
            a, b = e[:-1, None], e[1:, None]
            per_axis.append(((a + b) / 2 + (b - a) / 2 * gx, (b - a) / 2 * gw))
        mesh_nodes = np.meshgrid(*[p[0].ravel() for p in per_axis], indexing="ij")
        mesh_w = np.meshgrid(*[p[1].ravel() for p in per_axis], indexing="ij")
        v = np.stack([m for m in mesh_nodes], axis=-1)
        w = np.prod(np.stack(mesh_w, axis=-1), axis=-1) * surface_weight(v, self.d)
        shape = []
        for e in self.v_edges:
            shape += [len(e) - 1, 4]
        w = w.reshape(shape)
        angle = w.sum(axis=tuple(range(1, 2 * (self.d - 1), 2)))
        return (xv.reshape(xv.shape[1:]) if xv.ndim > 1 else xv)[(...,) + (None,) * (self.d - 1)] * angle


# --------------------------------------------------------------------------- transport

def _segment_integral(f: Callable, x: np.ndarray, theta: np.ndarray, length: np.ndarray) -> np.ndarray:
    """int_0^length f(x + t theta) dt with an 8-point Gauss rule per segment."""
    nodes, wts = _GL8
    half = 0.5 * length
    total = np.zeros(len(x))
    for t, w in zip(nodes, wts):
        total += w * f(x + ((t + 1.0) * half)[:, None] * theta)
    return total * half


def _scatter(theta: np.ndarray, mu: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate directions to polar cosine mu about the old direction, uniform azimuth."""
    g = rng.standard_normal(theta.shape)
    g -= np.sum(g * theta, axis=1)[:, None] * theta
    g /= np.linalg.norm(g, axis=1)[:, None]
    out = mu[:, None] * theta + np.sqrt(np.maximum(1.0 - mu * mu, 0.0))[:, None] * g
    return out / np.linalg.norm(out, axis=1)[:, None]


def _run_batch(source, medium: MediumProfile, params: ScatteringParams | None, rate_max: float, n: int,
               weight0: float, spec: HistogramSpec | None, functionals: Sequence[Callable],
               rng: np.random.Generator, domain, max_steps: int):
    d = len(np.asarray(source.sample(rng, 1)[0][0]))
    x, theta = source.sample(rng, n)
    x = np.array(x, float)
    theta = np.array(theta, float)
    w = np.full(n, weight0)
    pid = np.arange(n)
    nbins = int(np.prod(spec.shape)) if spec is not None else 0
    hist = np.zeros(nbins)
    outside = 0.0
    per_particle = np.zeros((len(functionals), n))
    collisions = 0
    lam0 = medium.lam0
    for _ in range(max_steps):
        if len(w) == 0:
            break
        m = len(w)
        if rate_max > 0:
            ell = rng.standard_exponential(m) / rate_max
            capped = ell > _TAU_CAP / lam0
            ell = np.minimum(ell, _TAU_CAP / lam0)
        else:
            ell = np.full(m, _TAU_CAP / lam0)
            capped = np.ones(m, dtype=bool)
        tstar = rng.random(m) * ell
        tau_star = _segment_integral(medium.lam, x, theta, tstar)
        dep = ell * w * np.exp(-tau_star)
        xs = x + tstar[:, None] * theta
        if spec is not None:
            k = spec.index(xs, theta)
            inside = k >= 0
            hist += np.bincount(k[inside], weights=dep[inside], minlength=nbins)
            outside += float(np.sum(dep[~inside]))
        for i, fn in enumerate(functionals):
            np.add.at(per_particle[i], pid, dep * fn(xs, theta))
        tau = _segment_integral(medium.lam, x, theta, ell)
        x = x + ell[:, None] * theta
        w = w * np.exp(-tau)
        alive = ~capped
        if domain is not None:
            alive &= np.all((x >= domain[0]) & (x <= domain[1]), axis=1)
        if rate_max > 0 and params is not None:
            real = alive & (rng.random(m) * rate_max < _scatter_rate(medium, params, x))
            idx = np.nonzero(real)[0]
            if len(idx):
                mu = kernels.sample_scatter_cosine(params.g, params.s, params.d, rng.random(len(idx)))
                theta[idx] = _scatter(theta[idx], mu, rng)
                collisions += len(idx)
        low = alive & (w < ROULETTE_THRESHOLD)
        if np.any(low):
            survive = rng.random(m) * ROULETTE_SURVIVAL < 1.0
            w = np.where(low & survive, w * ROULETTE_SURVIVAL, w)
            alive &= ~low | survive
        x, theta, w, pid = x[alive], theta[alive], w[alive], pid[alive]
    else:
        if len(w):
            raise WeightUnderflow("histories still alive after the step limit")
    return hist, outside, per_particle, collisions


_RATE_CACHE: dict = {}


def unit_rate(params: ScatteringParams) -> float:
    """Scattering rate per unit b, i.e. the angular integral of the kernel divided by delta."""
    key = (params.g, params.s, params.m, params.delta, params.d)
    if key not in _RATE_CACHE:
        _RATE_CACHE[key] = kernels.hg_total_rate(None, params)
    return _RATE_CACHE[key]


def _scatter_rate(medium: MediumProfile, params: ScatteringParams, x: np.ndarray) -> np.ndarray:
    return medium.b(x) * unit_rate(params)


def simulate(source, medium: MediumProfile, params: ScatteringParams | None, n_particles: int,
             spec: HistogramSpec | None = None, seed: int = 0, *, functionals: Sequence[Callable] = (),
             n_batches: int = 16, b_max: float | None = None, domain=None, max_steps: int = 1_000_000
             ) -> PhaseSpaceMeasure:
    """Estimate the solution u^g as a histogram measure plus functional tallies.

    `params=None` (or b_max = 0) switches scattering off. `b_max` majorises b(x);
    when omitted, b is taken to be constant and read at the origin. Particles are
    split into `n_batches` logical workers with independent Philox streams, so the
    result depends only on (seed, n_batches, n_particles). The returned measure
    carries in `meta`: per-batch histograms, functional means and standard errors,
    the mass deposited outside the window and collision counts.
    """
    if medium.lam0 <= 0:
        raise NonPositiveRate("absorption lower bound lam0 must be positive")
    d = len(np.asarray(source.sample(np.random.default_rng(0), 1)[0][0]))
    if params is None:
        rate_max = 0.0
    else:
        bm = float(medium.b(np.zeros(d))) if b_max is None else float(b_max)
        if bm < 0:
            raise NonPositiveRate("b_max must be nonnegative")
        rate_max = bm * unit_rate(params)
    children = np.random.SeedSequence(seed).spawn(n_batches)
    sizes = [n_particles // n_batches + (1 if i < n_particles % n_batches else 0) for i in range(n_batches)]
    weight0 = source.mass / n_particles
    hists, outs, funcs, cols = [], [], [], 0
    for child, size in zip(children, sizes):
        rng = np.random.Generator(np.random.Philox(child))
        h, o, f, c = _run_batch(source, medium, params, rate_max, size, weight0, spec, functionals, rng, domain,
                                max_steps)
        hists.append(h)
        outs.append(o)
        funcs.append(f)
        cols += c
    per_particle = np.concatenate(funcs, axis=1) if functionals else np.zeros((0, n_particles))
    fmean = per_particle.sum(axis=1)
    fse = per_particle.std(axis=1, ddof=1) * np.sqrt(n_particles) if n_particles > 1 else np.zeros(len(fmean))
    meta = {
        "functionals": fmean,
        "functionals_se": fse,
        "outside_mass": float(sum(outs)),
        "collisions": cols,
        "n_particles": n_particles,
        "n_batches": n_batches,
        "seed": seed,
    }
    if spec is None:
        m = PhaseSpaceMeasure.empty(d)
        m.meta.update(meta)
        return m
    hb = np.array(hists)
    total = hb.sum(axis=0)
    xc, tc = spec.centres()
    meta.update({"hist_batches": hb, "spec": spec,
                 "hist_se": hb.std(axis=0, ddof=1) * np.sqrt(n_batches) if n_batches > 1 else np.zeros_like(total)})
    return PhaseSpaceMeasure(xc, tc, total, spec.window, meta=meta)


def histogram_density(measure: PhaseSpaceMeasure) -> np.ndarray:
    """Bin averages of u (mass per dx dtheta), shaped like the histogram."""
    spec: HistogramSpec = measure.meta["spec"]
    return measure.w.reshape(spec.shape) / spec.volumes()


def g_ladder_study(source, medium: MediumProfile, s: float, m: float, eps: float, g_list: Sequence[float],
                   n_particles: int, spec: HistogramSpec, seed: int = 0, d: int = 3, **kw) -> list[PhaseSpaceMeasure]:
    """One histogram per g with delta fixed by (1 - g)^m = eps^{2s} delta and a seed stream split per g."""
    seeds = np.random.SeedSequence(seed).generate_state(len(g_list))
    out = []
    for g, sd in zip(g_list, seeds):
        params = ScatteringParams.narrow_beam(g, s, m, eps, d)
        meas = simulate(source, medium, params, n_particles, spec, int(sd), **kw)
        meas.meta["g"] = g
        meas.meta["delta"] = params.delta
        out.append(meas)
    return out
