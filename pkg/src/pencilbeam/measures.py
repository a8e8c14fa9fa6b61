"""Weighted point measures on R^d x S^{d-1}, the common currency of the distance engine."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PhaseSpaceMeasure:
    """Atoms (x_i, theta_i) with nonnegative weights w_i.

    `window` is an optional axis-aligned box (lo, hi) in x; `dropped_mass` records
    mass removed when restricting to it. Histograms are stored by their bin centres.
    """

    x: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    window: tuple[np.ndarray, np.ndarray] | None = None
    dropped_mass: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if not (len(self.x) == len(self.theta) == len(self.w)):
            raise ValueError("x, theta and w must have matching lengths")
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def mass(self) -> float:
        return float(np.sum(self.w))

    def __len__(self) -> int:
        return len(self.w)

    def pair(self, psi) -> float:
        """Integral of psi(x, theta) against the measure."""
        return float(np.sum(np.asarray(psi(self.x, self.theta)) * self.w))

    def scaled(self, c: float) -> "PhaseSpaceMeasure":
        return PhaseSpaceMeasure(self.x, self.theta, c * self.w, self.window, c * self.dropped_mass, dict(self.meta))

    def compressed(self) -> "PhaseSpaceMeasure":
        keep = self.w > 0
        return PhaseSpaceMeasure(self.x[keep], self.theta[keep], self.w[keep], self.window, self.dropped_mass,
                                 dict(self.meta))

    @staticmethod
    def concat(parts: list["PhaseSpaceMeasure"]) -> "PhaseSpaceMeasure":
        return PhaseSpaceMeasure(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.theta for p in parts]),
            np.concatenate([p.w for p in parts]),
            dropped_mass=sum(p.dropped_mass for p in parts),
        )

    @classmethod
    def empty(cls, d: int) -> "PhaseSpaceMeasure":
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0))

    def to_csv(self, path) -> None:
        """Atom list with columns weight, x1..xd, theta1..thetad."""
        d = self.d
        with open(Path(path), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["weight", *[f"x{i + 1}" for i in range(d)], *[f"theta{i + 1}" for i in range(d)]])
            for w, x, t in zip(self.w, self.x, self.theta):
                out.writerow([repr(float(w)), *map(lambda v: repr(float(v)), x), *map(lambda v: repr(float(v)), t)])

    @classmethod
    def from_csv(cls, path) -> "PhaseSpaceMeasure":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d = (data.shape[1] - 1) // 2
        return cls(data[:, 1 : 1 + d], data[:, 1 + d :], data[:, 0])
