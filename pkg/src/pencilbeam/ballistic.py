"""Scattering-free transport: exponential attenuation along straight rays."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

# rays stop once the attenuation factor falls below this
ATTENUATION_FLOOR = 1e-14
_TAU_MAX = -np.log(ATTENUATION_FLOOR)


def _ray_integral(integrand: Callable[[float], float], lam_on_ray: Callable[[float], float], lam0: float,
                  t_max: float = np.inf, breaks: Sequence[float] = (), rtol: float = 1e-10) -> float:
    """int_0^T exp(-int_0^t lam) g(t) dt, integrating (optical depth, value) as an ODE.

    Stops when the optical depth exceeds -log(1e-14) or at t_max. `breaks` lists
    points where g is not smooth; integration restarts there so no kink is skipped.
    """
    step = 0.1 / lam0

    def rhs(t, y):
        return [lam_on_ray(t), np.exp(-y[0]) * integrand(t)]

    def opaque(t, y):
        return y[0] - _TAU_MAX

    opaque.terminal = True
    edges = sorted({0.0, *[b for b in breaks if 0.0 < b < t_max]})
    y = np.zeros(2)
    horizon = t_max if np.isfinite(t_max) else None
    for k, a in enumerate(edges):
        b = edges[k + 1] if k + 1 < len(edges) else horizon
        if b is None:
            # open-ended last piece: integrate in growing chunks until opaque
            t = a
            while True:
                sol = solve_ivp(rhs, (t, t + 200 * step), y, method="RK45", rtol=rtol, atol=1e-14,
                                max_step=step, events=opaque)
                y = sol.y[:, -1]
                if sol.status == 1:
                    return float(y[1])
                t = sol.t[-1]
        else:
            sol = solve_ivp(rhs, (a, b), y, method="RK45", rtol=rtol, atol=1e-14, max_step=step, events=opaque)
            y = sol.y[:, -1]
            if sol.status == 1:
                return float(y[1])
    return float(y[1])


def ballistic_solve(f: Callable, lam: Callable, x, theta, lam0: float, t_max: float = np.inf,
                    breaks: Sequence[float] = ()) -> float:
    """v(x, theta) = int_0^inf exp(-int_0^t lam(x - s theta) ds) f(x - t theta, theta) dt.

    f(y, eta) and lam(y) take single points. `breaks` are ray parameters t where f jumps.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return _ray_integral(lambda t: float(f(x - t * theta, theta)), lambda t: float(lam(x - t * theta)),
                         lam0, t_max, breaks)


def ballistic_point_pairing(psi: Callable, lam: Callable, x0, theta0, lam0: float, t_max: float = np.inf,
                            breaks: Sequence[float] = ()) -> float:
    """Pairing of the point-source solution with psi: int_0^inf exp(-int lam) psi(x0 + t theta0, theta0) dt."""
    x0 = np.asarray(x0, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    return _ray_integral(lambda t: float(psi(x0 + t * theta0, theta0)), lambda t: float(lam(x0 + t * theta0)),
                         lam0, t_max, breaks)


def ballistic_source_pairing(psi: Callable, lam: Callable, nodes_x, nodes_theta, weights, lam0: float) -> float:
    """Pairing for an extended source given by quadrature nodes (y_q, eta_q) and weights w_q f(y_q, eta_q)."""
    return float(sum(w * ballistic_point_pairing(psi, lam, y, e, lam0)
                     for y, e, w in zip(np.asarray(nodes_x), np.asarray(nodes_theta), np.asarray(weights)) if w != 0))
