"""Henyey-Greenstein (g, s, m) scattering kernels and fractional angular operators."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, interpolate, special

from .geom_sphere import bracket


class QuadratureFailure(RuntimeError):
    pass


class CoincidentDirections(ValueError):
    pass


class AliasingWarning(RuntimeWarning):
    pass


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere S^{d-1} in R^d."""
    return 2.0 * np.pi ** (d / 2) / special.gamma(d / 2)


@dataclass(frozen=True)
class ScatteringParams:
    g: float
    s: float
    m: float
    delta: float
    eps: float
    d: int = 3

    def __post_init__(self):
        if not -1.0 < self.g < 1.0:
            raise ValueError("g must lie in (-1, 1)")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if self.m <= 0 or self.delta <= 0 or self.eps <= 0:
            raise ValueError("m, delta and eps must be positive")
        if self.d < 2:
            raise ValueError("dimension must be at least 2")

    @classmethod
    def narrow_beam(cls, g: float, s: float, m: float, eps: float, d: int = 3) -> "ScatteringParams":
        """Tie the mean free path to g through (1 - g)^m = eps^{2s} delta."""
        return cls(g=g, s=s, m=m, delta=(1.0 - g) ** m / eps ** (2 * s), eps=eps, d=d)

    @property
    def transport_mfp(self) -> float:
        return self.delta / (1.0 - self.g) ** self.m


def _as_field(value) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return value
    c = float(value)
    return lambda x: np.full(np.shape(x)[:-1], c)


@dataclass(frozen=True)
class MediumProfile:
    """Absorption lam(x), diffusion sigma(x) and kernel amplitude b(x) on R^d.

    Fields accept arrays of shape (..., d) and return shape (...). Scalars are
    promoted to constant fields. The lower bounds and Lipschitz constants are
    declared by the caller and only recorded.
    """

    lam: Callable = 1.0
    sigma: Callable = 1.0
    b: Callable = 1.0
    lam0: float = 1.0
    sigma0: float = 1.0
    lipschitz: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lam", "sigma", "b"):
            object.__setattr__(self, name, _as_field(getattr(self, name)))

    def on_axis(self, y: np.ndarray, eta: np.ndarray):
        """Depth profiles t -> lam(y + t eta), sigma(y + t eta)."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)

        def along(f):
            return lambda t: f(y + np.multiply.outer(np.asarray(t, dtype=float), eta))

        return along(self.lam), along(self.sigma)


def hg_profile(mu, g: float, s: float, m: float, d: int) -> np.ndarray:
    """Angular profile (1-g)^m (1+g)^m / ((1-g)^2 + 2g(1-mu))^{(d-1)/2+s}."""
    mu = np.asarray(mu, dtype=float)
    q = (1.0 - g) ** 2 + 2.0 * g * (1.0 - mu)
    return ((1.0 - g) * (1.0 + g)) ** m / q ** ((d - 1) / 2 + s)


def hg_kernel(x, theta_p, theta, params: ScatteringParams, medium: MediumProfile | None = None):
    """k_g(x, theta', theta) = b(x)/delta * profile(theta . theta')."""
    mu = np.sum(np.asarray(theta_p, dtype=float) * np.asarray(theta, dtype=float), axis=-1)
    b = 1.0 if medium is None else medium.b(np.asarray(x, dtype=float))
    return b / params.delta * hg_profile(mu, params.g, params.s, params.m, params.d)


def _polar_integral(fn, g: float, d: int, rtol: float = 1e-10) -> tuple[float, float]:
    """Integrate fn(cos phi) over S^{d-1} using the polar angle phi about the kernel axis."""
    lo = max(1.0 - abs(g), 1e-12)
    breaks = [p for p in (lo, 10 * lo, 100 * lo, 1000 * lo) if p < np.pi]
    edges = [0.0, *breaks, np.pi]
    total = err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(
            lambda p: fn(np.cos(p)) * np.sin(p) ** (d - 2), a, b, epsabs=0.0, epsrel=rtol, limit=200
        )
        total += val
        err += e
    azim = sphere_area(d - 1) if d > 2 else 2.0
    return azim * total, azim * err


def hg_total_rate(x, params: ScatteringParams, medium: MediumProfile | None = None) -> float:
    """Total scattering rate: integral of k_g over all outgoing directions."""
    p = params
    val, err = _polar_integral(lambda mu: hg_profile(mu, p.g, p.s, p.m, p.d), p.g, p.d)
    if err > 1e-8 * abs(val):
        raise QuadratureFailure(f"angular quadrature error {err:.2e} exceeds 1e-8 relative")
    b = 1.0 if medium is None else float(medium.b(np.asarray(x, dtype=float)))
    return b * val / p.delta


def mean_cosine(g: float, s: float, d: int) -> float:
    """Mean scattering cosine under the normalised angular profile (quadrature)."""
    num, _ = _polar_integral(lambda mu: mu * hg_profile(mu, g, s, 1.0, d), g, d)
    den, _ = _polar_integral(lambda mu: hg_profile(mu, g, s, 1.0, d), g, d)
    return num / den


@lru_cache(maxsize=32)
def _inverse_cdf_table(g: float, s: float, d: int, knots: int = 4096):
    """Monotone spline for u -> phi built from the polar density profile(cos phi) sin^{d-2} phi."""
    lo = max(1.0 - abs(g), 1e-6)
    # geometric spacing near the forward peak, uniform elsewhere
    phi = np.unique(np.concatenate([
        np.geomspace(lo * 1e-3, np.pi, knots // 2),
        np.linspace(0.0, np.pi, knots // 2),
    ]))
    dens = hg_profile(np.cos(phi), g, s, 1.0, d) * np.sin(phi) ** (d - 2)
    cdf = integrate.cumulative_trapezoid(dens, phi, initial=0.0)
    cdf /= cdf[-1]
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return interpolate.PchipInterpolator(cdf[keep], phi[keep])


def sample_scatter_cosine(g: float, s: float, d: int, u) -> np.ndarray:
    """Inverse-CDF sample of the scattering cosine mu for uniform u in [0, 1].

    In d = 3 the density in mu is proportional to ((1-g)^2 + 2g(1-mu))^{-(1+s)} and
    its antiderivative inverts in closed form. Other dimensions use a tabulated
    monotone inverse CDF of the polar angle.
    """
    u = np.asarray(u, dtype=float)
    if d == 3:
        if abs(g) < 1e-10:
            return 2.0 * u - 1.0
        lo = (1.0 + g) ** (-2 * s)
        hi = (1.0 - g) ** (-2 * s)
        q = (lo + u * (hi - lo)) ** (-1.0 / s)
        return np.clip((1.0 + g * g - q) / (2.0 * g), -1.0, 1.0)
    # reversed so that u = 0 maps to mu = -1 as in the closed-form branch
    return np.cos(_inverse_cdf_table(float(g), float(s), int(d))(1.0 - u))


def frac_laplacian_constant(n: int, s: float) -> float:
    """Normalisation c_{n,s} = 4^s Gamma(n/2 + s) / (pi^{n/2} |Gamma(-s)|).

    With it, c_{n,s} p.v. int (f(v) - f(v+z)) |z|^{-n-2s} dz has Fourier symbol |eta|^{2s}.
    """
    return 4.0**s * special.gamma(n / 2 + s) / (np.pi ** (n / 2) * abs(special.gamma(-s)))


def sigma_from_b(b, d: int, s: float, m: float):
    """Diffusion coefficient sigma = 2^{m-2s} b / c_{d-1,s} of the limiting operator."""
    return 2.0 ** (m - 2 * s) * np.asarray(b) / frac_laplacian_constant(d - 1, s)


def b_from_sigma(sigma, d: int, s: float, m: float):
    return np.asarray(sigma) * frac_laplacian_constant(d - 1, s) / 2.0 ** (m - 2 * s)


def _gap(theta_p, theta) -> np.ndarray:
    gap = 1.0 - np.sum(np.asarray(theta_p, dtype=float) * np.asarray(theta, dtype=float), axis=-1)
    if np.any(gap < 1e-14):
        raise CoincidentDirections("limiting kernel is singular for coincident directions")
    return gap


def limiting_kernel(theta_p, theta, eps: float, s: float, m: float, b=1.0) -> np.ndarray:
    """g -> 1 limit 2^{m-(d-1)/2-s} eps^{2s} b (1 - theta.theta')^{-((d-1)/2+s)}."""
    d = np.shape(theta)[-1]
    gap = _gap(theta_p, theta)
    return 2.0 ** (m - (d - 1) / 2 - s) * eps ** (2 * s) * np.asarray(b) * gap ** (-((d - 1) / 2 + s))


def angular_K(theta_p, theta, s: float) -> np.ndarray:
    """Angular part K with limiting_kernel = eps^{2s} sigma K."""
    d = np.shape(theta)[-1]
    gap = _gap(theta_p, theta)
    return frac_laplacian_constant(d - 1, s) * 2.0 ** (s - (d - 1) / 2) * gap ** (-((d - 1) / 2 + s))


def angular_K_stereo(v, w, s: float) -> np.ndarray:
    """Chart form <w>^{-(n-2s)} <v>^{-(n-2s)} |v-w|^{-(n+2s)}, n = d - 1.

    K(theta', theta) dtheta' = c_{n,s} <v>^{2n} angular_K_stereo(v, v') dv'.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    n = v.shape[-1]
    dist = np.linalg.norm(v - w, axis=-1)
    return (bracket(v) * bracket(w)) ** (-(n - 2 * s)) / dist ** (n + 2 * s)


def sphere_constant_exact(d: int, s: float) -> float:
    """Closed form of (-Delta)^s <v>^{-(n-2s)} = C <v>^{-(n+2s)}, n = d - 1 (conformal identity)."""
    n = d - 1
    return 4.0**s * special.gamma((n + 2 * s) / 2) / special.gamma((n - 2 * s) / 2)


@lru_cache(maxsize=64)
def sphere_constant(d: int, s: float) -> float:
    """Zeroth-order constant c_{s,d}: the sphere operator applied to u = 1.

    Evaluated at the chart origin from the singular-integral definition with a
    radial adaptive quadrature, so no closed form is assumed.
    """
    n = d - 1
    p = n - 2 * s
    # p.v. integral of (w(0) - w(z)) |z|^{-n-2s}, w = <z>^{-p}, reduces to a 1-D radial integral
    radial = lambda r: -np.expm1(-0.5 * p * np.log1p(r * r)) * r ** (-1 - 2 * s)
    a, _ = integrate.quad(radial, 0.0, 1.0, epsabs=0.0, epsrel=1e-10, limit=200)
    b, _ = integrate.quad(radial, 1.0, np.inf, epsabs=0.0, epsrel=1e-10, limit=200)
    area = sphere_area(n) if n > 1 else 2.0
    return frac_laplacian_constant(n, s) * area * (a + b)


def euclidean_frac_laplacian(w: np.ndarray, h: float, s: float, pad: int = 2) -> np.ndarray:
    """Apply the Fourier multiplier |eta|^{2s} to samples on a uniform grid with zero padding."""
    w = np.asarray(w, dtype=float)
    shape = w.shape
    big = tuple(pad * n for n in shape)
    freqs = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(n, h) for n in big], indexing="ij", sparse=True)
    symbol = sum(f * f for f in freqs) ** s
    axes = tuple(range(w.ndim))
    out = np.fft.irfftn(np.fft.rfftn(w, big, axes=axes) * symbol[..., : big[-1] // 2 + 1], big, axes=axes)
    return out[tuple(slice(0, n) for n in shape)]


def stereo_grid(n_points: int, h: float, n_dim: int) -> np.ndarray:
    """Centred uniform chart grid, shape (N,)*n_dim + (n_dim,)."""
    axis = (np.arange(n_points) - n_points // 2) * h
    return np.stack(np.meshgrid(*([axis] * n_dim), indexing="ij"), axis=-1)


def sphere_frac_laplacian(u: np.ndarray, h: float, d: int, s: float, pad: int = 2) -> np.ndarray:
    """Sphere fractional Laplacian of chart samples u on a centred uniform grid of spacing h.

    Conjugates the Euclidean multiplier with the weights <v>^{-(d-1-2s)} and
    <v>^{d-1+2s}. Warns when the weighted field carries noticeable energy on the
    outer frame of the grid, where truncation and wrap-around pollute the result.
    """
    u = np.asarray(u, dtype=float)
    n = d - 1
    if u.ndim != n:
        raise ValueError(f"expected a {n}-dimensional chart grid")
    br = bracket(stereo_grid(u.shape[0], h, n))
    w = br ** (-(n - 2 * s)) * u
    frame = np.ones(u.shape, dtype=bool)
    k = max(1, u.shape[0] // 20)
    frame[tuple(slice(k, -k) for _ in range(n))] = False
    total = np.sum(w * w)
    if total > 0 and np.sum(w[frame] ** 2) > 1e-6 * total:
        warnings.warn("weighted field does not decay at the grid boundary", AliasingWarning, stacklevel=2)
    return br ** (n + 2 * s) * euclidean_frac_laplacian(w, h, s, pad)
