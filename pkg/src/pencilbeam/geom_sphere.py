"""Stereographic chart about the north pole, beam coordinates and frame maps.

Directions live on the unit sphere S^{d-1} in R^d with north pole N = e_d.
All functions are vectorised over leading axes; the last axis holds components.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SOUTH_POLE_TOL = 1e-12

# Lower constant of the two-sided comparison between h(v, v') and |v - v'|^2 / 2.
BETA = 1.0 - 0.5 * (1.0 - np.log(1.0 + np.sqrt(2.0)) / np.sqrt(2.0)) ** 2


class SouthPoleError(ValueError):
    """Raised when a direction is too close to the projection's singular point."""


def bracket(v: np.ndarray) -> np.ndarray:
    """Japanese bracket <v> = sqrt(1 + |v|^2) over the last axis."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def north_pole(d: int) -> np.ndarray:
    n = np.zeros(d)
    n[-1] = 1.0
    return n


def stereo_project(theta: np.ndarray) -> np.ndarray:
    """Map unit vectors to R^{d-1}: v = theta' / (1 + theta_d)."""
    theta = np.asarray(theta, dtype=float)
    denom = 1.0 + theta[..., -1]
    if np.any(denom <= SOUTH_POLE_TOL):
        raise SouthPoleError("direction within 1e-12 of the south pole")
    return theta[..., :-1] / denom[..., None]


def stereo_inverse(v: np.ndarray) -> np.ndarray:
    """Inverse chart: theta = (2v, 1 - |v|^2) / <v>^2."""
    v = np.asarray(v, dtype=float)
    r2 = np.sum(v * v, axis=-1)
    b2 = 1.0 + r2
    out = np.empty(v.shape[:-1] + (v.shape[-1] + 1,))
    out[..., :-1] = 2.0 * v / b2[..., None]
    out[..., -1] = (1.0 - r2) / b2
    return out


def surface_weight(v: np.ndarray, d: int) -> np.ndarray:
    """Density of the sphere's surface measure in the chart: 2^{d-1} <v>^{-2(d-1)}."""
    b2 = 1.0 + np.sum(np.asarray(v, dtype=float) ** 2, axis=-1)
    return 2.0 ** (d - 1) / b2 ** (d - 1)


def chord_gap(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """1 - theta.theta' written in chart coordinates: 2|v-w|^2 / (<v>^2 <w>^2)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    diff2 = np.sum((v - w) ** 2, axis=-1)
    return 2.0 * diff2 / ((1.0 + np.sum(v * v, axis=-1)) * (1.0 + np.sum(w * w, axis=-1)))


def beam_h(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """h(v, w) = <v><w> - v.w - 1, evaluated in a cancellation-free form.

    Uses h = |v-w|^2/2 - (<v> - <w>)^2/2 with <v> - <w> = (v-w).(v+w)/(<v> + <w>).
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    diff = v - w
    dbr = np.sum(diff * (v + w), axis=-1) / (bracket(v) + bracket(w))
    return 0.5 * np.sum(diff * diff, axis=-1) - 0.5 * dbr**2


def geodesic(theta: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Great-circle angle between unit vectors, stable for small and large angles."""
    theta = np.asarray(theta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    diff = np.linalg.norm(theta - eta, axis=-1)
    summ = np.linalg.norm(theta + eta, axis=-1)
    return 2.0 * np.arctan2(diff, summ)


def rotation_to_north(eta: np.ndarray) -> np.ndarray:
    """Rotation matrix R with R @ eta = N, acting in the plane span{eta, N}.

    Identity when eta = N. Near eta = -N the plane is ill-defined, so a product of
    two Householder reflections is used instead (still a proper rotation).
    """
    eta = np.asarray(eta, dtype=float)
    eta = eta / np.linalg.norm(eta)
    d = eta.size
    n = north_pole(d)
    c = float(eta @ n)
    if c > -1.0 + 1e-8:
        k = np.outer(n, eta) - np.outer(eta, n)
        return np.eye(d) + k + (k @ k) / (1.0 + c)
    u = eta - n
    u /= np.linalg.norm(u)
    h1 = np.eye(d) - 2.0 * np.outer(u, u)
    e = np.zeros(d)
    e[0] = 1.0
    h2 = np.eye(d) - 2.0 * np.outer(e, e)
    return h2 @ h1


@dataclass(frozen=True)
class FrameMap:
    """Affine beam frame: base point y, axis eta and transversal scale eps."""

    y: np.ndarray
    eta: np.ndarray
    eps: float
    rotation: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.y.size

    def apply(self, x: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(x, theta) -> (X, V) with X = ((2eps)^{-1} transversal, depth), V = S_eta(theta)/eps."""
        z = (np.asarray(x, dtype=float) - self.y) @ self.rotation.T
        X = z.copy()
        X[..., :-1] /= 2.0 * self.eps
        V = stereo_project(np.asarray(theta, dtype=float) @ self.rotation.T) / self.eps
        return X, V

    def invert(self, X: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.array(X, dtype=float, copy=True)
        z[..., :-1] *= 2.0 * self.eps
        x = self.y + z @ self.rotation
        theta = stereo_inverse(self.eps * np.asarray(V, dtype=float)) @ self.rotation
        return x, theta


def frame_map(y: np.ndarray, eta: np.ndarray, eps: float) -> FrameMap:
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    eta = eta / np.linalg.norm(eta)
    return FrameMap(y=y, eta=eta, eps=float(eps), rotation=rotation_to_north(eta))
