"""Spectral solver for the fractional Fermi pencil-beam equation.

In stretched beam coordinates (X', X^d, V) the equation reads

    d_{X^d} U + V . grad_{X'} U + lam(X^d) U + sigma(X^d) (-Delta_V)^s U = F.

With the transform f_hat(xi) = int exp(-i X'.xi) f the solution is explicit: the
initial data transform is sheared to (xi, eta + X^d xi) and damped by

    exp(-int_0^{X^d} |eta + (X^d - t) xi|^{2s} sigma(t) dt),

so every slice is an inverse FFT of a closed-form multiplier. Depth enters only
through one-dimensional integrals, which are evaluated by Gauss-Legendre rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .geom_sphere import FrameMap, bracket, frame_map, north_pole
from .measures import PhaseSpaceMeasure


class GridTooCoarse(ValueError):
    pass


class SupportClipped(ValueError):
    pass


class MomentDiverges(ValueError):
    pass


_GL = {n: np.polynomial.legendre.leggauss(n) for n in (16, 32, 64)}
# power in the substitution u = u* + L w^k that tames the |u - u*|^{2s} cusp
_CUSP_POWER = 4
_CHUNK = 1 << 15


def _gl01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = _GL[n]
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class AxisProfiles:
    """Depth profiles sigma(t), lam(t) on the beam axis.

    `sigma_const` / `lam_const` short-circuit evaluation when the profile is constant.
    """

    sigma: Callable[[np.ndarray], np.ndarray]
    lam: Callable[[np.ndarray], np.ndarray]
    sigma_const: float | None = None
    lam_const: float | None = None

    @classmethod
    def constant(cls, sigma: float, lam: float = 0.0) -> "AxisProfiles":
        return cls(
            sigma=lambda t: np.full(np.shape(t), float(sigma)),
            lam=lambda t: np.full(np.shape(t), float(lam)),
            sigma_const=float(sigma),
            lam_const=float(lam),
        )

    @classmethod
    def from_functions(cls, sigma, lam) -> "AxisProfiles":
        return cls(
            sigma=lambda t: np.asarray(sigma(np.asarray(t, dtype=float)), dtype=float) * np.ones(np.shape(t)),
            lam=lambda t: np.asarray(lam(np.asarray(t, dtype=float)), dtype=float) * np.ones(np.shape(t)),
        )


def lam_integral(t0: float, t1: float, lam) -> float:
    """int_{t0}^{t1} lam(t) dt for a profile or callable."""
    if isinstance(lam, AxisProfiles):
        if lam.lam_const is not None:
            return lam.lam_const * (t1 - t0)
        lam = lam.lam
    if t1 <= t0:
        return 0.0
    val, _ = integrate.quad(lambda t: float(lam(np.asarray(t))), t0, t1, epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def lambda_factor(depth, lam) -> np.ndarray | float:
    """Lambda(X^d) = exp(-int_0^{X^d} lam)."""
    depth_arr = np.atleast_1d(np.asarray(depth, dtype=float))
    if np.any(depth_arr < 0):
        raise ValueError("depth must be nonnegative")
    out = np.array([np.exp(-lam_integral(0.0, float(x), lam)) for x in depth_arr])
    return float(out[0]) if np.ndim(depth) == 0 else out


def _shear_block(xi, eta, t0, t1, profiles: AxisProfiles, s: float, nodes: int) -> np.ndarray:
    length = t1 - t0
    a = np.sum(xi * xi, axis=-1)
    b = np.sum(xi * eta, axis=-1)
    c = np.sum(eta * eta, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ustar = np.where(a > 0, -b / np.where(a > 0, a, 1.0), 0.0)
    ustar = np.clip(ustar, 0.0, length)
    w, wt = _gl01(nodes)
    k = _CUSP_POWER
    total = np.zeros(a.shape)
    for lo, span, sign in ((ustar, length - ustar, 1.0), (ustar, ustar, -1.0)):
        u = lo[..., None] + sign * span[..., None] * w**k
        q = np.maximum(c[..., None] + 2.0 * b[..., None] * u + a[..., None] * u * u, 0.0) ** s
        if profiles.sigma_const is None:
            q = q * profiles.sigma(t1 - u)
        jac = k * span[..., None] * w ** (k - 1)
        total += np.sum(q * jac * wt, axis=-1)
    if profiles.sigma_const is not None:
        total *= profiles.sigma_const
    return total


def shear_integral(xi, eta, t0: float, t1: float, profiles: AxisProfiles, s: float, nodes: int = 32):
    """int_{t0}^{t1} |eta + (t1 - t) xi|^{2s} sigma(t) dt, vectorised over the leading axes.

    The integrand's only non-smooth point is the minimiser of |eta + u xi|; the
    interval is split there and each piece is mapped by u = u* +- L w^4, which
    makes the Gauss-Legendre rule converge fast. Returns (value, refinement gap)
    where the gap compares `nodes` against `2 * nodes` points.
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    xi, eta = np.broadcast_arrays(xi, eta)
    shape = xi.shape[:-1]
    flat_xi = xi.reshape(-1, xi.shape[-1])
    flat_eta = eta.reshape(-1, eta.shape[-1])
    fine = np.empty(flat_xi.shape[0])
    gap = 0.0
    for i in range(0, flat_xi.shape[0], _CHUNK):
        sl = slice(i, i + _CHUNK)
        coarse_v = _shear_block(flat_xi[sl], flat_eta[sl], t0, t1, profiles, s, nodes)
        fine_v = _shear_block(flat_xi[sl], flat_eta[sl], t0, t1, profiles, s, 2 * nodes)
        fine[sl] = fine_v
        gap = max(gap, float(np.max(np.abs(fine_v - coarse_v), initial=0.0)))
    return fine.reshape(shape), gap


def fourier_solution(xi, depth: float, eta, G_hat, profiles: AxisProfiles, s: float, F_hat=None,
                     source_nodes: int = 32) -> np.ndarray:
    """Transform of U at depth X^d for initial data G_hat and interior source F_hat.

    G_hat(xi, eta) and F_hat(xi, t, eta) act on arrays whose last axis holds the
    d - 1 components. The Duhamel term integrates the source over t in [0, X^d]
    with a Gauss-Legendre rule.
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    xi, eta = np.broadcast_arrays(xi, eta)
    expo, _ = shear_integral(xi, eta, 0.0, depth, profiles, s)
    out = np.exp(-lam_integral(0.0, depth, profiles)) * G_hat(xi, eta + depth * xi) * np.exp(-expo)
    if F_hat is not None:
        tn, tw = _gl01(source_nodes)
        for t, wgt in zip(tn * depth, tw * depth):
            e_t, _ = shear_integral(xi, eta, t, depth, profiles, s)
            att = np.exp(-lam_integral(t, depth, profiles))
            out = out + wgt * att * F_hat(xi, t, eta + (depth - t) * xi) * np.exp(-e_t)
    return out


def profile_hat(xi, eta, depth: float, profiles: AxisProfiles, s: float) -> np.ndarray:
    """Self-similar profile exp(-int_0^1 |eta + tau xi|^{2s} sigma(X^d (1 - tau)) dtau)."""
    xi = np.asarray(xi, dtype=float)
    expo, _ = shear_integral(xi / depth, eta, 0.0, depth, profiles, s)
    return np.exp(-expo / depth)


def self_similar_exponent(d: int, s: float) -> float:
    """J(X', X^d, V) = Lambda (X^d)^{-a} profile(X'/(X^d)^{1+1/2s}, V/(X^d)^{1/2s}) with this a."""
    return (d - 1) * (1.0 + 1.0 / s)


# --------------------------------------------------------------------------- grids

@dataclass(frozen=True)
class SliceGrid:
    """Uniform tensor grid over (X', V) in R^n x R^n, n = d - 1, centred at (cx, cv)."""

    n: int
    nx: int
    nv: int
    hx: float
    hv: float
    cx: tuple = ()
    cv: tuple = ()

    def __post_init__(self):
        if not self.cx:
            object.__setattr__(self, "cx", (0.0,) * self.n)
        if not self.cv:
            object.__setattr__(self, "cv", (0.0,) * self.n)

    @classmethod
    def from_extent(cls, n: int, nx: int, nv: int, half_x: float, half_v: float, cx=(), cv=()) -> "SliceGrid":
        return cls(n, nx, nv, 2.0 * half_x / nx, 2.0 * half_v / nv, tuple(cx), tuple(cv))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.n + (self.nv,) * self.n

    @property
    def cell(self) -> float:
        return (self.hx * self.hv) ** self.n

    def axes(self) -> list[np.ndarray]:
        ax = [c + (np.arange(self.nx) - self.nx // 2) * self.hx for c in self.cx]
        av = [c + (np.arange(self.nv) - self.nv // 2) * self.hv for c in self.cv]
        return ax + av

    def freqs(self) -> list[np.ndarray]:
        fx = 2 * np.pi * np.fft.fftfreq(self.nx, self.hx)
        fv = 2 * np.pi * np.fft.fftfreq(self.nv, self.hv)
        return [fx] * self.n + [fv] * self.n

    def mesh(self, sparse: bool = True) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij", sparse=sparse)

    def freq_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense frequency arrays (xi, eta), each of shape grid.shape + (n,)."""
        m = np.meshgrid(*self.freqs(), indexing="ij")
        return np.stack(m[: self.n], axis=-1), np.stack(m[self.n:], axis=-1)

    def scaled(self, fx: float, fv: float) -> "SliceGrid":
        return SliceGrid(self.n, self.nx, self.nv, self.hx * fx, self.hv * fv,
                         tuple(c * fx for c in self.cx), tuple(c * fv for c in self.cv))


def natural_grid(depth: float, s: float, sigma: float, n: int, nx: int, nv: int,
                 span_x: float = 40.0, span_v: float = 40.0) -> SliceGrid:
    """Grid sizing rule: extents proportional to the slice's intrinsic scales.

    The angular spread grows like (sigma X^d)^{1/2s} and the transversal spread
    like X^d times that; spans are given in units of these scales.
    """
    sv = (sigma * depth) ** (1.0 / (2 * s))
    return SliceGrid.from_extent(n, nx, nv, span_x * depth * sv, span_v * sv)


def _to_grid(U_hat: np.ndarray, grid: SliceGrid) -> np.ndarray:
    phase = np.ones(grid.shape, dtype=complex)
    centres = list(grid.cx) + list(grid.cv)
    fm = np.meshgrid(*grid.freqs(), indexing="ij", sparse=True)
    for f, c in zip(fm, centres):
        if c != 0.0:
            phase = phase * np.exp(1j * f * c)
    vals = np.fft.fftshift(np.fft.ifftn(U_hat * phase)) / grid.cell
    return vals.real


def _from_grid(values: np.ndarray, grid: SliceGrid) -> np.ndarray:
    out = np.fft.fftn(np.fft.ifftshift(values)) * grid.cell
    centres = list(grid.cx) + list(grid.cv)
    fm = np.meshgrid(*grid.freqs(), indexing="ij", sparse=True)
    for f, c in zip(fm, centres):
        if c != 0.0:
            out = out * np.exp(-1j * f * c)
    return out


def _frame_max(a: np.ndarray) -> float:
    """Largest |a| on the Nyquist frame of an fft-ordered array."""
    worst = 0.0
    for ax, n in enumerate(a.shape):
        idx = [slice(None)] * a.ndim
        idx[ax] = n // 2
        worst = max(worst, float(np.max(np.abs(a[tuple(idx)]))))
    return worst


# --------------------------------------------------------------------------- fields

@dataclass
class BeamSlice:
    depth: float
    grid: SliceGrid
    values: np.ndarray
    lam_factor: float
    meta: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.cell)


@dataclass
class BeamField:
    """Samples of U on per-slice tensor grids."""

    d: int
    s: float
    slices: list[BeamSlice]
    meta: dict = field(default_factory=dict)

    @property
    def depths(self) -> np.ndarray:
        return np.array([sl.depth for sl in self.slices])

    def __getitem__(self, i: int) -> BeamSlice:
        return self.slices[i]

    def __len__(self) -> int:
        return len(self.slices)


@dataclass(frozen=True)
class Atoms:
    """Weighted deltas at (Y', W); for interior sources also at a depth t."""

    Y: np.ndarray
    W: np.ndarray
    weight: np.ndarray
    depth: np.ndarray | None = None

    @classmethod
    def single(cls, Y, W, weight: float = 1.0, depth: float | None = None) -> "Atoms":
        return cls(np.atleast_2d(np.asarray(Y, dtype=float)), np.atleast_2d(np.asarray(W, dtype=float)),
                   np.atleast_1d(float(weight)), None if depth is None else np.atleast_1d(float(depth)))

    def transform(self, xi, eta) -> np.ndarray:
        out = np.zeros(np.broadcast_shapes(xi.shape, eta.shape)[:-1], dtype=complex)
        for y, w, a in zip(self.Y, self.W, self.weight):
            out += a * np.exp(-1j * (xi @ y + eta @ w))
        return out


@dataclass(frozen=True)
class SampledData:
    """Initial data sampled on a slice grid (the same grid is used for every output slice)."""

    grid: SliceGrid
    values: np.ndarray


def _check_grid_resolution(mult: np.ndarray, tol: float = 1e-9) -> float:
    tail = _frame_max(mult) / max(abs(mult.flat[0]), 1e-300)
    if tail > tol:
        raise GridTooCoarse(f"spectral multiplier is {tail:.2e} of its peak at the Nyquist frame (limit {tol:g})")
    return tail


def _multiplier(grid: SliceGrid, t0: float, t1: float, profiles: AxisProfiles, s: float):
    xi, eta = grid.freq_mesh()
    expo, gap = shear_integral(xi, eta, t0, t1, profiles, s)
    return np.exp(-expo), gap, xi, eta


def fundamental_J(depths: Sequence[float], grid, profiles: AxisProfiles, s: float, d: int = 3,
                  tail_tol: float = 1e-9) -> BeamField:
    """Fundamental solution (G = delta at the origin, F = 0) on each depth slice.

    `grid` is a SliceGrid used for every slice or a callable depth -> SliceGrid.
    """
    slices = []
    for depth in depths:
        g = grid(depth) if callable(grid) else grid
        if g.n != d - 1:
            raise ValueError("grid dimension does not match d - 1")
        mult, gap, _, _ = _multiplier(g, 0.0, depth, profiles, s)
        tail = _check_grid_resolution(mult, tail_tol)
        lam = lambda_factor(depth, profiles)
        vals = _to_grid(lam * mult, g)
        slices.append(BeamSlice(float(depth), g, vals, lam, {"spectral_tail": tail, "quad_gap": gap}))
    return BeamField(d, s, slices, {"source": "fundamental"})


def _check_atoms_inside(atoms: Atoms, grid: SliceGrid, shift_depth: float) -> None:
    centre = atoms.Y + shift_depth * atoms.W
    half_x = grid.hx * grid.nx / 2
    half_v = grid.hv * grid.nv / 2
    out_x = np.any(np.abs(centre - np.asarray(grid.cx)) > half_x, axis=1)
    out_v = np.any(np.abs(atoms.W - np.asarray(grid.cv)) > half_v, axis=1)
    lost = float(np.sum(np.abs(atoms.weight[out_x | out_v])))
    if lost > 1e-6 * max(float(np.sum(np.abs(atoms.weight))), 1e-300):
        raise SupportClipped(f"atom mass {lost:.3e} is transported outside the grid")


def _sheared_sampled(data: SampledData, grid: SliceGrid, depth: float) -> np.ndarray:
    """Transform of G evaluated at (xi, eta + X^d xi), by a phase shift per W-row."""
    if (data.grid.nx, data.grid.nv, data.grid.hx, data.grid.hv) != (grid.nx, grid.nv, grid.hx, grid.hv):
        raise ValueError("sampled data must live on the output grid")
    n = grid.n
    vals = np.asarray(data.values, dtype=float)
    total = np.sum(np.abs(vals))
    # mass that the shear pushes outside the transversal window
    mesh = data.grid.mesh()
    moved = [mesh[i] + depth * mesh[n + i] for i in range(n)]
    outside = np.zeros(vals.shape, dtype=bool)
    for i in range(n):
        outside |= np.abs(moved[i] - grid.cx[i]) > grid.hx * grid.nx / 2
    if total > 0 and np.sum(np.abs(vals[outside])) > 1e-6 * total:
        raise SupportClipped("sheared initial data leaves the transversal window")
    axes_x = tuple(range(n))
    axes_v = tuple(range(n, 2 * n))
    part = np.fft.fftn(np.fft.ifftshift(vals, axes=axes_x), axes=axes_x) * grid.hx**n
    fx = np.meshgrid(*grid.freqs()[:n], indexing="ij", sparse=True)
    wv = data.grid.axes()[n:]
    wmesh = np.meshgrid(*wv, indexing="ij", sparse=True)
    phase = np.zeros(vals.shape)
    for i in range(n):
        phase = phase + fx[i].reshape(fx[i].shape + (1,) * n) * (
            data.grid.cx[i] + depth * wmesh[i].reshape((1,) * n + wmesh[i].shape))
    part = part * np.exp(-1j * phase)
    full = np.fft.fftn(np.fft.ifftshift(part, axes=axes_v), axes=axes_v) * grid.hv**n
    fv = np.meshgrid(*grid.freqs()[n:], indexing="ij", sparse=True)
    for i in range(n):
        if data.grid.cv[i] != 0.0:
            full = full * np.exp(-1j * fv[i].reshape((1,) * n + fv[i].shape) * data.grid.cv[i])
    return full


def evaluate_U(G, depths: Sequence[float], grid, profiles: AxisProfiles, s: float, d: int = 3,
               F: Atoms | None = None, tail_tol: float = 1e-9) -> BeamField:
    """Solution for initial data G (Atoms or SampledData) and atomic interior source F."""
    slices = []
    for depth in depths:
        g = grid(depth) if callable(grid) else grid
        mult, gap, xi, eta = _multiplier(g, 0.0, depth, profiles, s)
        _check_grid_resolution(mult, tail_tol)
        lam = lambda_factor(depth, profiles)
        if G is None:
            U_hat = np.zeros(g.shape, dtype=complex)
        elif isinstance(G, Atoms):
            _check_atoms_inside(G, g, depth)
            U_hat = lam * mult * G.transform(xi, eta + depth * xi)
        else:
            U_hat = lam * mult * _sheared_sampled(G, g, depth)
        if F is not None:
            for t in np.unique(F.depth):
                if t >= depth:
                    continue
                sel = F.depth == t
                part = Atoms(F.Y[sel], F.W[sel], F.weight[sel])
                _check_atoms_inside(part, g, depth - t)
                m_t, _, _, _ = _multiplier(g, float(t), depth, profiles, s)
                att = np.exp(-lam_integral(float(t), depth, profiles))
                U_hat = U_hat + att * m_t * part.transform(xi, eta + (depth - t) * xi)
        vals = _to_grid(U_hat, g)
        slices.append(BeamSlice(float(depth), g, vals, lam, {"quad_gap": gap}))
    return BeamField(d, s, slices, {"source": "evaluate_U"})


# --------------------------------------------------------------------------- diagnostics

def _v_frac_laplacian(sl: BeamSlice, s: float) -> np.ndarray:
    n = sl.grid.n
    axes_v = tuple(range(n, 2 * n))
    fv = np.meshgrid(*sl.grid.freqs()[n:], indexing="ij", sparse=True)
    sym = sum(f * f for f in fv) ** s
    sym = sym.reshape((1,) * n + sym.shape)
    return np.fft.ifftn(np.fft.fftn(sl.values, axes=axes_v) * sym, axes=axes_v).real


def moment_vanishing(field: BeamField, xi0) -> tuple[np.ndarray, np.ndarray]:
    """Per slice: int (X'.xi0) U and sup over X' of |int (-Delta_V)^s U dV|."""
    xi0 = np.asarray(xi0, dtype=float)
    first, frac = [], []
    for sl in field.slices:
        n = sl.grid.n
        # the Nyquist node is its own mirror image in the periodic cell, so an odd
        # coordinate takes its midpoint value there
        ax = [a - c for a, c in zip(sl.grid.axes()[:n], sl.grid.cx)]
        for a in ax:
            a[0] = 0.0
        mesh = np.meshgrid(*ax, indexing="ij", sparse=True)
        proj = sum((mesh[i] + sl.grid.cx[i]) * xi0[i] for i in range(n))
        proj = proj.reshape(proj.shape + (1,) * n)
        first.append(float(np.sum(proj * sl.values) * sl.grid.cell))
        lap = _v_frac_laplacian(sl, field.s)
        ang = np.sum(lap, axis=tuple(range(n, 2 * n))) * sl.grid.hv**n
        frac.append(float(np.max(np.abs(ang))))
    return np.array(first), np.array(frac)


def _weights(sl: BeamSlice, m: float, n_pow: float) -> np.ndarray:
    n = sl.grid.n
    mesh = sl.grid.mesh()
    rx = np.sqrt(sum(mesh[i] ** 2 for i in range(n)))
    rv = np.sqrt(sum(mesh[n + i] ** 2 for i in range(n)))
    return rx**m * rv**n_pow


def _spectral_derivative(sl: BeamSlice, alpha, beta) -> np.ndarray:
    orders = list(alpha) + list(beta)
    if not any(orders):
        return sl.values
    fm = np.meshgrid(*sl.grid.freqs(), indexing="ij", sparse=True)
    sym = np.ones((1,) * len(orders), dtype=complex)
    for f, k in zip(fm, orders):
        if k:
            sym = sym * (1j * f) ** k
    return np.fft.ifftn(np.fft.fftn(sl.values) * sym).real


def moment_L1(field: BeamField, m: float = 0.0, n: float = 0.0, alpha=None, beta=None,
              window: float | None = None) -> np.ndarray:
    """Per slice: || |X'|^m |V|^n d^alpha_{X'} d^beta_V U ||_1 by grid quadrature.

    Without derivatives the moments are finite only for m, n < 2s; `window`
    (a radius in both X' and V) allows larger powers on a compact set.
    """
    dim = field.d - 1
    alpha = tuple(alpha or (0,) * dim)
    beta = tuple(beta or (0,) * dim)
    if not any(alpha + beta) and window is None and (m >= 2 * field.s or n >= 2 * field.s):
        raise MomentDiverges(f"moment (m={m}, n={n}) diverges for s={field.s} without a window")
    out = []
    for sl in field.slices:
        vals = np.abs(_spectral_derivative(sl, alpha, beta)) * _weights(sl, m, n)
        if window is not None:
            mesh = sl.grid.mesh()
            inside = np.ones(sl.grid.shape, dtype=bool)
            for c in mesh:
                inside = inside & (np.abs(c) <= window)
            vals = np.where(inside, vals, 0.0)
        out.append(float(np.sum(vals) * sl.grid.cell))
    return np.array(out)


def frac_lap_moment(field: BeamField, m: float = 0.0, n: float = 0.0) -> np.ndarray:
    """Per slice: || |X'|^m |V|^n (-Delta_V)^s U ||_1."""
    if m >= 2 * field.s or n >= 2 * field.s:
        raise MomentDiverges(f"moment (m={m}, n={n}) diverges for s={field.s}")
    return np.array([
        float(np.sum(np.abs(_v_frac_laplacian(sl, field.s)) * _weights(sl, m, n)) * sl.grid.cell)
        for sl in field.slices
    ])


def to_self_similar(sl: BeamSlice, d: int, s: float) -> tuple[list[np.ndarray], np.ndarray]:
    """Axes and values of the profile obtained by undoing the self-similar scaling of a slice."""
    n = d - 1
    X = sl.depth
    px, pv = X ** (1.0 + 1.0 / (2 * s)), X ** (1.0 / (2 * s))
    axes = sl.grid.axes()
    axes = [a / px for a in axes[:n]] + [a / pv for a in axes[n:]]
    return axes, sl.values * X ** self_similar_exponent(d, s) / sl.lam_factor


# --------------------------------------------------------------------------- physical space

def rescale_to_physical(field: BeamField, eps: float, frame: FrameMap | None = None,
                        depth_weights=None, clamp: bool = True) -> PhaseSpaceMeasure:
    """Atoms of the physical-space beam measure.

    Each grid node (X', X^d, V) maps to (x, theta) through the inverse frame map and
    carries U <eps V>^{-2(d-1)} times the cell volume (and the depth weight), so the
    pairing with psi equals int U Psi <eps V>^{-2(d-1)} dX dV.
    """
    d = field.d
    n = d - 1
    if frame is None:
        frame = frame_map(np.zeros(d), north_pole(d), eps)
    if abs(frame.eps - eps) > 1e-15 * eps:
        frame = frame_map(frame.y, frame.eta, eps)
    weights = np.ones(len(field)) if depth_weights is None else np.asarray(depth_weights, dtype=float)
    parts = []
    for sl, dw in zip(field.slices, weights):
        mesh = sl.grid.mesh(sparse=False)
        Xp = np.stack([m.ravel() for m in mesh[:n]], axis=-1)
        V = np.stack([m.ravel() for m in mesh[n:]], axis=-1)
        vals = sl.values.ravel()
        if clamp:
            vals = np.maximum(vals, 0.0)
        w = vals * bracket(eps * V) ** (-2 * n) * sl.grid.cell * dw
        X = np.concatenate([Xp, np.full((len(Xp), 1), sl.depth)], axis=1)
        x, theta = frame.invert(X, V)
        parts.append(PhaseSpaceMeasure(x, theta, w))
    out = PhaseSpaceMeasure.concat(parts)
    out.meta.update({"eps": eps, "clamped": clamp})
    return out


# --------------------------------------------------------------------------- sampling

def positive_stable(a: float, size, rng: np.random.Generator) -> np.ndarray:
    """Positive a-stable variables with Laplace transform exp(-u^a), 0 < a < 1 (Kanter)."""
    u = rng.uniform(0.0, np.pi, size)
    e = rng.standard_exponential(size)
    A = (np.sin(a * u) ** a * np.sin((1 - a) * u) ** (1 - a) / np.sin(u)) ** (1.0 / (1 - a))
    return (A / e) ** ((1 - a) / a)


def isotropic_stable(alpha: float, scale, size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Isotropic alpha-stable vectors with E exp(i eta.Z) = exp(-scale |eta|^alpha).

    Uses the sub-Gaussian representation Z = scale^{1/alpha} sqrt(2A) G.
    """
    A = positive_stable(alpha / 2.0, size, rng)
    G = rng.standard_normal((size, dim))
    return (np.asarray(scale) ** (1.0 / alpha) * np.sqrt(2.0 * A))[:, None] * G


def depth_steps(depths: Sequence[float], n_steps: int) -> np.ndarray:
    """Time grid refined geometrically towards 0 that contains every requested depth."""
    depths = np.asarray(sorted(depths), dtype=float)
    top = depths[-1]
    base = np.concatenate([[0.0], np.geomspace(top * 1e-4, top, n_steps)])
    return np.unique(np.concatenate([base, depths]))


def sample_J(depths: Sequence[float], n_samples: int, profiles: AxisProfiles, s: float, d: int = 3,
             seed: int = 0, n_steps: int = 400, batch: int = 1 << 16):
    """Monte Carlo representation of the normalised fundamental solution.

    J(., X^d, .) / Lambda(X^d) is the law of (X', V) for the kinetic process
    dV = sigma^{1/2s} dL, dX' = V dt driven by an isotropic 2s-stable process L,
    started at the origin. Increments are drawn exactly; X' uses the midpoint rule
    on a time grid refined near the origin. Returns arrays (X', V) of shape
    (len(depths), n_samples, d - 1), in depth order as given.
    """
    n = d - 1
    order = np.argsort(depths)
    grid = depth_steps(depths, n_steps)
    want = {float(np.asarray(depths)[i]): i for i in order}
    Xs = np.empty((len(depths), n_samples, n))
    Vs = np.empty((len(depths), n_samples, n))
    rng = np.random.Generator(np.random.Philox(key=seed))
    for start in range(0, n_samples, batch):
        m = min(batch, n_samples - start)
        X = np.zeros((m, n))
        V = np.zeros((m, n))
        for t0, t1 in zip(grid[:-1], grid[1:]):
            h = t1 - t0
            sig = profiles.sigma_const
            if sig is None:
                sig = float(profiles.sigma(np.asarray(0.5 * (t0 + t1))))
            X += 0.5 * h * V
            V += isotropic_stable(2 * s, sig * h, m, n, rng)
            X += 0.5 * h * V
            if float(t1) in want:
                i = want[float(t1)]
                Xs[i, start:start + m] = X
                Vs[i, start:start + m] = V
    return Xs, Vs
