"""Piecewise-constant Cameron-Martin controls on [0, T].

A control holds K mode weights on each of M_c time slices; its energy is the
quadrature of half the squared l^2 mode norm in time.  Membership in the
radius-N control ball is 2 * energy <= N.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class Control:
    """Slice edges t_0 = 0 < ... < t_{M_c} = T and coefficients (M_c, K)."""

    edges: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float).reshape(-1).copy()
        c = np.asarray(self.coefficients, dtype=float).copy()
        if c.ndim != 2:
            raise ControlError("coefficients must be a (slices, modes) array")
        if e.size != c.shape[0] + 1:
            raise ControlError("edges must have one more entry than slices")
        if e[0] != 0.0 or np.any(np.diff(e) <= 0):
            raise ControlError("edges must increase strictly from 0")
        e.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "coefficients", c)

    @property
    def n_slices(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_modes(self) -> int:
        return self.coefficients.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.edges[-1])

    @property
    def slice_lengths(self) -> np.ndarray:
        return np.diff(self.edges)

    def energy(self) -> float:
        """Half the time integral of the squared l^2 mode norm."""
        return float(0.5 * np.sum(self.slice_lengths
                                  * np.sum(self.coefficients ** 2, axis=1)))

    def u_norm_timeseries(self) -> np.ndarray:
        """|h|_U on each slice."""
        return np.sqrt(np.sum(self.coefficients ** 2, axis=1))

    def in_ball(self, radius: float) -> bool:
        return 2.0 * self.energy() <= radius

    def slice_index(self, t: float) -> int:
        m = int(np.searchsorted(self.edges, t, side="right") - 1)
        return min(max(m, 0), self.n_slices - 1)

    def at_time(self, t: float) -> np.ndarray:
        return self.coefficients[self.slice_index(t)]

    def with_coefficients(self, coefficients) -> "Control":
        return Control(self.edges, coefficients)

    @staticmethod
    def zero(horizon: float, n_slices: int, n_modes: int) -> "Control":
        edges = np.linspace(0.0, horizon, n_slices + 1)
        return Control(edges, np.zeros((n_slices, n_modes)))

    @staticmethod
    def constant(horizon: float, mode_values, n_slices: int = 1) -> "Control":
        vals = np.asarray(mode_values, dtype=float).reshape(1, -1)
        edges = np.linspace(0.0, horizon, n_slices + 1)
        return Control(edges, np.repeat(vals, n_slices, axis=0))


def cm_norm(h: Control) -> float:
    """The control cost: half the squared L^2([0,T], U) norm."""
    return h.energy()


def save_control(path: str, h: Control):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice", "mode", "value", "t_start", "t_end"])
        for m in range(h.n_slices):
            for k in range(h.n_modes):
                writer.writerow([m + 1, k + 1, repr(float(h.coefficients[m, k])),
                                 repr(float(h.edges[m])), repr(float(h.edges[m + 1]))])


def load_control(path: str) -> Control:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        raise ControlError(f"empty control file {path}")
    n_slices = max(int(r[0]) for r in rows)
    n_modes = max(int(r[1]) for r in rows)
    coeffs = np.zeros((n_slices, n_modes))
    edges = np.zeros(n_slices + 1)
    for r in rows:
        m, k = int(r[0]) - 1, int(r[1]) - 1
        coeffs[m, k] = float(r[2])
        edges[m] = float(r[3])
        edges[m + 1] = float(r[4])
    return Control(edges, coeffs)
