"""Pencil-beam superpositions for broad sources.

A beam centred at (y, eta) is the fundamental solution for the axis profiles
lam(y + t eta), sigma(y + t eta), pushed to physical space through the frame map
at (y, eta). Beams are represented by samples of the kinetic stable process on
Gauss-Legendre depth nodes and reused across calls through a cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geom_sphere import FrameMap, SouthPoleError, bracket, frame_map, north_pole, stereo_inverse, surface_weight
from .kernels import MediumProfile
from .measures import PhaseSpaceMeasure
from .pencil_beam import AxisProfiles, lambda_factor, sample_J


class BudgetInfeasible(ValueError):
    def __init__(self, required: int, cap: int):
        super().__init__(f"{required} cells are needed to meet the diameter bound, cap is {cap}")
        self.required = required
        self.cap = cap


@dataclass(frozen=True)
class BeamAtom:
    weight: float
    x: np.ndarray
    theta: np.ndarray
    frame: FrameMap | None = None


@dataclass(frozen=True)
class BeamSampling:
    """Depth nodes on [0, depth_max] and sample counts used for every beam."""

    depth_max: float
    n_depth: int = 16
    n_samples: int = 2000
    seed: int = 0
    n_steps: int = 200

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        t, w = np.polynomial.legendre.leggauss(self.n_depth)
        return 0.5 * self.depth_max * (t + 1.0), 0.5 * self.depth_max * w


class SuperpositionEngine:
    """Weighted sum of frame-mapped beams, paired against test functions psi(x, theta).

    With `homogeneous=True` all beams share the axis profiles read at the origin, so
    one set of samples serves every beam. Samples use the same seed for every beam
    (common random numbers), which makes pairings smooth in the beam centre.
    """

    def __init__(self, atoms: Sequence[BeamAtom], eps: float, medium: MediumProfile, s: float,
                 sampling: BeamSampling, homogeneous: bool = False, cache_digits: int = 12):
        self.atoms = list(atoms)
        self.eps = eps
        self.medium = medium
        self.s = s
        self.sampling = sampling
        self.homogeneous = homogeneous
        self.cache_digits = cache_digits
        self._cache: dict = {}

    @property
    def d(self) -> int:
        return len(self.atoms[0].x) if self.atoms else 0

    def _key(self, atom: BeamAtom):
        if self.homogeneous:
            return None
        return (tuple(np.round(atom.x, self.cache_digits)), tuple(np.round(atom.theta, self.cache_digits)))

    def _beam_samples(self, atom: BeamAtom):
        key = self._key(atom)
        if key not in self._cache:
            d = len(atom.x)
            y = np.zeros(d) if self.homogeneous else atom.x
            eta = north_pole(d) if self.homogeneous else atom.theta
            lam_t, sig_t = self.medium.on_axis(y, eta)
            profiles = AxisProfiles.from_functions(sig_t, lam_t)
            depths, dw = self.sampling.nodes()
            Xs, Vs = sample_J(depths, self.sampling.n_samples, profiles, self.s, d, self.sampling.seed,
                              self.sampling.n_steps)
            lam = lambda_factor(depths, profiles.lam)
            n = d - 1
            X = np.concatenate([Xs, np.broadcast_to(depths[:, None, None], Xs.shape[:2] + (1,))], axis=2)
            w = (lam * dw)[:, None] / self.sampling.n_samples * bracket(self.eps * Vs) ** (-2 * n)
            self._cache[key] = (X.reshape(-1, d), Vs.reshape(-1, n), w.ravel())
        return self._cache[key]

    def beam_measure(self, atom: BeamAtom) -> PhaseSpaceMeasure:
        """Unit-weight beam at the atom as a physical-space measure."""
        X, V, w = self._beam_samples(atom)
        frame = atom.frame if atom.frame is not None else frame_map(atom.x, atom.theta, self.eps)
        try:
            x, theta = frame.invert(X, V)
        except SouthPoleError as exc:
            raise SouthPoleError(f"beam at x={atom.x}, theta={atom.theta}: {exc}") from exc
        return PhaseSpaceMeasure(x, theta, w)

    def beam_mass(self, atom: BeamAtom) -> float:
        return float(np.sum(self._beam_samples(atom)[2]))

    def pair(self, psi: Callable) -> float:
        return float(sum(a.weight * self.beam_measure(a).pair(psi) for a in self.atoms if a.weight != 0))

    @property
    def mass(self) -> float:
        return float(sum(a.weight * self.beam_mass(a) for a in self.atoms))

    def measure(self) -> PhaseSpaceMeasure:
        parts = [self.beam_measure(a).scaled(a.weight) for a in self.atoms if a.weight != 0]
        return PhaseSpaceMeasure.concat(parts) if parts else PhaseSpaceMeasure.empty(self.d)


def discrete_superposition(atoms: Sequence[BeamAtom], eps: float, medium: MediumProfile, s: float,
                           sampling: BeamSampling, **kw) -> SuperpositionEngine:
    return SuperpositionEngine(atoms, eps, medium, s, sampling, **kw)


# --------------------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class BoxChartQuadrature:
    """Tensor trapezoid nodes on an x box times a box in the stereographic chart about the north pole."""

    x_lo: Sequence[float]
    x_hi: Sequence[float]
    v_lo: Sequence[float]
    v_hi: Sequence[float]
    nx: int
    nv: int

    def refined(self) -> "BoxChartQuadrature":
        return BoxChartQuadrature(self.x_lo, self.x_hi, self.v_lo, self.v_hi, 2 * self.nx - 1, 2 * self.nv - 1)

    def nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x nodes, theta nodes, weights including the surface weight of the chart)."""
        d = len(self.x_lo)
        axes, wts = [], []
        for lo, hi, n in [(a, b, self.nx) for a, b in zip(self.x_lo, self.x_hi)] + \
                         [(a, b, self.nv) for a, b in zip(self.v_lo, self.v_hi)]:
            pts = np.linspace(lo, hi, n)
            w = np.full(n, (hi - lo) / (n - 1))
            w[[0, -1]] *= 0.5
            axes.append(pts)
            wts.append(w)
        mesh = np.meshgrid(*axes, indexing="ij")
        wmesh = np.meshgrid(*wts, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
        v = flat[:, d:]
        return flat[:, :d], stereo_inverse(v), w * surface_weight(v, d)


def continuous_superposition(f: Callable, quadrature: BoxChartQuadrature, eps: float, medium: MediumProfile,
                             s: float, sampling: BeamSampling, **kw) -> SuperpositionEngine:
    """Quadrature of the beam family: weights w_q f(y_q, eta_q) on the quadrature nodes."""
    y, eta, w = quadrature.nodes()
    fv = np.asarray(f(y, eta), dtype=float)
    if np.any(fv < 0):
        raise ValueError("source must be nonnegative")
    atoms = [BeamAtom(float(wq * fq), yq, eq) for yq, eq, wq, fq in zip(y, eta, w, fv) if fq * wq > 0]
    return SuperpositionEngine(atoms, eps, medium, s, sampling, **kw)


# --------------------------------------------------------------------------- simple functions

@dataclass
class SimpleApprox:
    """Cells R_i with averages a_i, the atoms a_i meas(R_i) at cell centres, and the W1 bound."""

    atoms: list[BeamAtom]
    averages: np.ndarray
    measures: np.ndarray
    diameters: np.ndarray
    l1_error: float
    bound: float
    constant: float
    cells_per_axis: tuple[int, int]

    def measure(self) -> PhaseSpaceMeasure:
        return PhaseSpaceMeasure(np.array([a.x for a in self.atoms]), np.array([a.theta for a in self.atoms]),
                                 np.array([a.weight for a in self.atoms]))


def _cell_quadrature(lo, hi, n_per_axis: int, order: int):
    """Gauss nodes in every cell of a uniform tensor grid on [lo, hi]."""
    t, w = np.polynomial.legendre.leggauss(order)
    axes_nodes, axes_w = [], []
    for a, b in zip(lo, hi):
        edges = np.linspace(a, b, n_per_axis + 1)
        h = np.diff(edges)[:, None]
        axes_nodes.append(edges[:-1, None] + 0.5 * h * (t + 1.0))
        axes_w.append(0.5 * h * w)
    return axes_nodes, axes_w


def simple_approx(f: Callable, eps: float, kappa: float, x_lo, x_hi, v_half: float, *, refine: int = 1,
                  order: int = 3, max_cells: int = 200_000, angular_factor: float = 2.0) -> SimpleApprox:
    """Piecewise-constant approximation of f on cells of diameter at most eps^2.

    Cells are uniform boxes in x times uniform boxes in the stereographic chart
    |v_i| <= v_half. A cell's diameter is bounded by its x diagonal plus
    `angular_factor` times its chart diagonal (the chart metric is at most twice
    the Euclidean one). The diameter budget is split evenly. Cell averages use an
    `order`-point Gauss rule per axis; the same rule estimates int |f - g|.
    `refine` multiplies the cell count per axis. The reported bound is
    int |f - g| + kappa sum_i a_i meas(R_i) diam(R_i).
    """
    x_lo = np.asarray(x_lo, float)
    x_hi = np.asarray(x_hi, float)
    d = len(x_lo)
    n = d - 1
    budget = eps * eps
    x_side = float(np.max(x_hi - x_lo))
    nx = int(np.ceil(x_side * np.sqrt(d) / (budget / 2))) * refine
    nv = int(np.ceil(2 * v_half * np.sqrt(n) * angular_factor / (budget / 2))) * refine
    total = nx**d * nv**n
    if total > max_cells:
        raise BudgetInfeasible(total, max_cells)
    xn, xw = _cell_quadrature(x_lo, x_hi, nx, order)
    vn, vw = _cell_quadrature([-v_half] * n, [v_half] * n, nv, order)
    all_nodes = xn + vn
    all_w = xw + vw
    # tensor over (cell index, node index) for each axis
    grids = np.meshgrid(*[a.ravel() for a in all_nodes], indexing="ij")
    wgrids = np.meshgrid(*[a.ravel() for a in all_w], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wq = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    v = pts[:, d:]
    wq = wq * surface_weight(v, d)
    vals = np.asarray(f(pts[:, :d], stereo_inverse(v)), dtype=float)
    shape = []
    for a in all_nodes:
        shape += [a.shape[0], a.shape[1]]
    vals = vals.reshape(shape)
    wq = wq.reshape(shape)
    cell_axes = tuple(range(1, 2 * (2 * d - 1), 2))
    meas = wq.sum(axis=cell_axes)
    mass = (vals * wq).sum(axis=cell_axes)
    avg = np.where(meas > 0, mass / np.where(meas > 0, meas, 1.0), 0.0)
    expand = tuple(slice(None) if k % 2 == 0 else None for k in range(2 * (2 * d - 1)))
    l1 = float(np.sum(np.abs(vals - avg[expand]) * wq))
    hx = (x_hi - x_lo) / nx
    hv = 2 * v_half / nv
    diam = float(np.linalg.norm(hx) + angular_factor * hv * np.sqrt(n))
    centres = [0.5 * (np.linspace(a, b, nx + 1)[1:] + np.linspace(a, b, nx + 1)[:-1]) for a, b in zip(x_lo, x_hi)] + \
              [0.5 * (np.linspace(-v_half, v_half, nv + 1)[1:] + np.linspace(-v_half, v_half, nv + 1)[:-1])] * n
    cmesh = np.meshgrid(*centres, indexing="ij")
    cflat = np.stack([c.ravel() for c in cmesh], axis=1)
    weights = mass.ravel()
    keep = weights > 0
    theta_c = stereo_inverse(cflat[:, d:])
    atoms = [BeamAtom(float(wt), xc, tc) for wt, xc, tc in zip(weights[keep], cflat[keep, :d], theta_c[keep])]
    bound = l1 + kappa * diam * float(weights.sum())
    return SimpleApprox(atoms, avg.ravel()[keep], meas.ravel()[keep], np.full(keep.sum(), diam), l1, bound,
                        bound / (budget * kappa), (nx, nv))


def source_histogram(f: Callable, x_lo, x_hi, v_half: float, nx: int, nv: int, order: int = 3) -> PhaseSpaceMeasure:
    """Atoms of f on a fine uniform grid: one atom per cell carrying the cell integral of f."""
    x_lo = np.asarray(x_lo, float)
    d = len(x_lo)
    n = d - 1
    xn, xw = _cell_quadrature(x_lo, x_hi, nx, order)
    vn, vw = _cell_quadrature([-v_half] * n, [v_half] * n, nv, order)
    grids = np.meshgrid(*[a.ravel() for a in xn + vn], indexing="ij")
    wgrids = np.meshgrid(*[a.ravel() for a in xw + vw], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wq = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1) * surface_weight(pts[:, d:], d)
    vals = np.asarray(f(pts[:, :d], stereo_inverse(pts[:, d:])), dtype=float) * wq
    shape = []
    for a in xn + vn:
        shape += [a.shape[0], a.shape[1]]
    mass = vals.reshape(shape).sum(axis=tuple(range(1, len(shape), 2))).ravel()
    centres = [0.5 * (np.linspace(a, b, nx + 1)[1:] + np.linspace(a, b, nx + 1)[:-1]) for a, b in zip(x_lo, x_hi)] + \
              [0.5 * (np.linspace(-v_half, v_half, nv + 1)[1:] + np.linspace(-v_half, v_half, nv + 1)[:-1])] * n
    cmesh = np.meshgrid(*centres, indexing="ij")
    cflat = np.stack([c.ravel() for c in cmesh], axis=1)
    keep = mass > 0
    return PhaseSpaceMeasure(cflat[keep, :d], stereo_inverse(cflat[keep, d:]), mass[keep])


def write_atoms_csv(path, atoms: Sequence[BeamAtom]) -> None:
    PhaseSpaceMeasure(np.array([a.x for a in atoms]), np.array([a.theta for a in atoms]),
                      np.array([a.weight for a in atoms])).to_csv(path)
