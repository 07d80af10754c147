"""Discrete torus geometry, grid functions and the spectral/difference toolbox.

Everything lives on the uniform collocation grid of the periodic unit box
[0,1]^d with d in {1,2}.  Fields are immutable value arrays on such a grid;
trajectories are time-indexed sequences of fields.  The module provides the
norms (L1, L2, H1, H-1), central-difference gradient/divergence, the heat
semigroup as an exact Fourier multiplier, and the fractional Sobolev-in-time
seminorm used as a compactness diagnostic.

Frequency convention (shared by every module): integer wavenumbers
k in {-N/2, ..., N/2-1}^d with Laplacian symbol -4 pi^2 |k|^2.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class FieldError(ValueError):
    """Invalid grid/field construction or mixed-grid arithmetic."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on [0,1]^d with N points per axis (N even, >= 4)."""

    dimension: int
    points_per_axis: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise FieldError(f"dimension must be 1 or 2, got {self.dimension}")
        n = self.points_per_axis
        if n < 4 or n % 2 != 0:
            raise FieldError(f"points_per_axis must be even and >= 4, got {n}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_axis

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.dimension

    @property
    def size(self) -> int:
        return self.points_per_axis ** self.dimension

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dimension

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer frequencies along one axis in FFT order."""
        n = self.points_per_axis
        return np.fft.fftfreq(n, d=1.0 / n)

    @cached_property
    def ksq(self) -> np.ndarray:
        """|k|^2 on the full frequency grid (FFT layout, shape = grid shape)."""
        k = self.wavenumbers
        if self.dimension == 1:
            return k * k
        kx, ky = np.meshgrid(k, k, indexing="ij")
        return kx * kx + ky * ky

    def coordinates(self):
        """Axis coordinate arrays x_j = j/N (meshgrid for d = 2)."""
        n = self.points_per_axis
        x = np.arange(n) / n
        if self.dimension == 1:
            return (x,)
        return np.meshgrid(x, x, indexing="ij")


@dataclass(frozen=True)
class Field:
    """Real grid function: flat row-major values over the torus grid."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1).copy()
        if v.size != self.grid.size:
            raise FieldError(f"expected {self.grid.size} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise FieldError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def nd(self) -> np.ndarray:
        """Values reshaped to the spatial grid shape."""
        return self.values.reshape(self.grid.shape)

    def _check_same_grid(self, other: "Field"):
        if self.grid != other.grid:
            raise FieldError("fields live on different grids")

    def __add__(self, other: "Field") -> "Field":
        self._check_same_grid(other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        self._check_same_grid(other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.grid, self.values * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed states on a common grid; t_0 = 0 < ... < t_M = T."""

    times: np.ndarray
    states: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1).copy()
        if t.size != len(self.states):
            raise FieldError("times and states length mismatch")
        if t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise FieldError("times must be strictly increasing from 0")
        grid = self.states[0].grid
        for s in self.states:
            if s.grid != grid:
                raise FieldError("trajectory states live on different grids")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def grid(self) -> TorusGrid:
        return self.states[0].grid

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def uniform(self) -> bool:
        dt = np.diff(self.times)
        return bool(np.all(np.abs(dt - dt[0]) <= 1e-12 * dt[0]))

    @property
    def terminal(self) -> Field:
        return self.states[-1]

    def value_array(self) -> np.ndarray:
        """All states stacked as a (M+1, N^d) array."""
        return np.stack([s.values for s in self.states])


# ---------------------------------------------------------------------------
# raw kernels on nd arrays; spatial axes are the trailing `dim` axes so the
# same code serves single fields and path batches
# ---------------------------------------------------------------------------

def _sax(arr: np.ndarray, dim: int, i: int) -> int:
    return arr.ndim - dim + i


def grad_central(arr: np.ndarray, spacing: float, dim: int):
    """Second-order central differences with periodic wrap, one array per axis."""
    out = []
    for i in range(dim):
        ax = _sax(arr, dim, i)
        out.append((np.roll(arr, -1, axis=ax) - np.roll(arr, 1, axis=ax)) / (2.0 * spacing))
    return out


def div_central(comps, spacing: float, dim: int) -> np.ndarray:
    acc = None
    for i, c in enumerate(comps):
        ax = _sax(c, dim, i)
        term = (np.roll(c, -1, axis=ax) - np.roll(c, 1, axis=ax)) / (2.0 * spacing)
        acc = term if acc is None else acc + term
    return acc


def grad_spectral(arr: np.ndarray, grid: TorusGrid):
    """Spectral derivative; exact on band-limited data.  Test oracle only."""
    dim = grid.dimension
    axes = tuple(range(arr.ndim - dim, arr.ndim))
    ah = np.fft.fftn(arr, axes=axes)
    k = grid.wavenumbers
    out = []
    for i in range(dim):
        shape = [1] * arr.ndim
        shape[axes[i]] = k.size
        ki = k.reshape(shape)
        out.append(np.real(np.fft.ifftn(2j * np.pi * ki * ah, axes=axes)))
    return out


def diff_forward(arr: np.ndarray, spacing: float, dim: int, i: int) -> np.ndarray:
    ax = _sax(arr, dim, i)
    return (np.roll(arr, -1, axis=ax) - arr) / spacing


def diff_backward(arr: np.ndarray, spacing: float, dim: int, i: int) -> np.ndarray:
    ax = _sax(arr, dim, i)
    return (arr - np.roll(arr, 1, axis=ax)) / spacing


def face_average(arr: np.ndarray, dim: int, i: int) -> np.ndarray:
    """Arithmetic mean onto faces; face j+1/2 stored at index j."""
    ax = _sax(arr, dim, i)
    return 0.5 * (arr + np.roll(arr, -1, axis=ax))


def face_average_adjoint(arr: np.ndarray, dim: int, i: int) -> np.ndarray:
    ax = _sax(arr, dim, i)
    return 0.5 * (arr + np.roll(arr, 1, axis=ax))


def div_a_grad(a: np.ndarray, arr: np.ndarray, spacing: float, dim: int) -> np.ndarray:
    """Conservative flux form sum_i D-( avg(a) D+ u ) with scalar coefficient a.

    Symmetric and negative semidefinite for a > 0; its discrete integration by
    parts against the forward-difference gradient is exact.
    """
    acc = None
    for i in range(dim):
        flux = face_average(a, dim, i) * diff_forward(arr, spacing, dim, i)
        term = diff_backward(flux, spacing, dim, i)
        acc = term if acc is None else acc + term
    return acc


def fourier(arr: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Normalized Fourier coefficients (constant field 1 -> coefficient 1 at k=0)."""
    dim = grid.dimension
    axes = tuple(range(arr.ndim - dim, arr.ndim))
    return np.fft.fftn(arr, axes=axes) / grid.size


def apply_multiplier(arr: np.ndarray, mult: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Apply a real symmetric Fourier multiplier (FFT layout) to trailing axes."""
    dim = grid.dimension
    axes = tuple(range(arr.ndim - dim, arr.ndim))
    return np.real(np.fft.ifftn(np.fft.fftn(arr, axes=axes) * mult, axes=axes))


def heat_multiplier(grid: TorusGrid, r: float) -> np.ndarray:
    return np.exp(-4.0 * np.pi ** 2 * grid.ksq * r)


# ---------------------------------------------------------------------------
# norms and public operators
# ---------------------------------------------------------------------------

def norm_l2(f: Field) -> float:
    v = f.values
    return float(np.sqrt(f.grid.cell_volume * np.dot(v, v)))


def norm_l1(f: Field) -> float:
    return float(f.grid.cell_volume * np.sum(np.abs(f.values)))


def norm_h1(f: Field) -> float:
    """sqrt(L2^2 + sum_i ||central gradient_i||_L2^2)."""
    g = f.grid
    total = g.cell_volume * np.dot(f.values, f.values)
    for comp in grad_central(f.nd(), g.spacing, g.dimension):
        c = comp.reshape(-1)
        total += g.cell_volume * np.dot(c, c)
    return float(np.sqrt(total))


def norm_h_neg1(f: Field) -> float:
    """Dual Sobolev norm via the multiplier (1 + 4 pi^2 |k|^2)^(-1) on coefficients."""
    g = f.grid
    fh = fourier(f.nd(), g)
    w = 1.0 / (1.0 + 4.0 * np.pi ** 2 * g.ksq)
    return float(np.sqrt(np.sum(w * np.abs(fh) ** 2)))


_NORMS = {"l2": norm_l2, "l1": norm_l1, "h1": norm_h1, "h-1": norm_h_neg1}


def norm_by_name(name: str):
    try:
        return _NORMS[name.lower()]
    except KeyError:
        raise FieldError(f"unknown norm kind {name!r}; choose from {sorted(_NORMS)}")


def gradient(f: Field):
    """Central-difference gradient, one Field per axis."""
    comps = grad_central(f.nd(), f.grid.spacing, f.grid.dimension)
    return tuple(Field(f.grid, c.reshape(-1)) for c in comps)


def divergence(comps) -> Field:
    comps = tuple(comps)
    grid = comps[0].grid
    for c in comps:
        if c.grid != grid:
            raise FieldError("divergence components live on different grids")
    if len(comps) != grid.dimension:
        raise FieldError("component count must equal the grid dimension")
    arr = div_central([c.nd() for c in comps], grid.spacing, grid.dimension)
    return Field(grid, arr.reshape(-1))


def heat_semigroup(f: Field, r: float) -> Field:
    """Heat flow for time r as the exact Fourier multiplier exp(-4 pi^2 |k|^2 r).

    Mass preserving, an L2 contraction for every r >= 0, and range preserving
    up to spectral truncation effects once r is moderate relative to the grid.
    """
    if r < 0:
        raise FieldError(f"heat semigroup needs r >= 0, got {r}")
    if r == 0.0:
        return f
    out = apply_multiplier(f.nd(), heat_multiplier(f.grid, r), f.grid)
    return Field(f.grid, out.reshape(-1))


def w_alpha_seminorm(tr: Trajectory, alpha: float, p: float, norm_kind: str = "H") -> float:
    """Fractional Sobolev-in-time norm of a trajectory (boundedness diagnostic).

    Discrete double Riemann sum of ||u(t)-u(s)||^p / |t-s|^(1+alpha p) over
    off-diagonal cells plus the left-rule integral of ||u(t)||^p; returns the
    p-th root.  norm_kind is "H" (the L2 space norm) or "H-1".
    """
    if not 0.0 < alpha < 1.0:
        raise FieldError(f"alpha must lie in (0,1), got {alpha}")
    if p < 1:
        raise FieldError(f"p must be >= 1, got {p}")
    if len(tr.states) < 3:
        raise FieldError("need at least two time intervals")
    kind = norm_kind.lower()
    if kind == "h":
        norm = norm_l2
    elif kind in ("h-1", "h^-1"):
        norm = norm_h_neg1
    else:
        raise FieldError(f"norm_kind must be 'H' or 'H-1', got {norm_kind!r}")
    t = tr.times
    dt = np.diff(t)
    m = dt.size
    vals = np.array([norm(s) for s in tr.states[:m]])
    total = float(np.sum(dt * vals ** p))
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            diff = norm(tr.states[i] - tr.states[j])
            total += dt[i] * dt[j] * diff ** p / abs(t[i] - t[j]) ** (1.0 + alpha * p)
    return float(total ** (1.0 / p))


def spatial_mean(f: Field) -> float:
    return float(np.mean(f.values))


def random_band_limited(grid: TorusGrid, kmax: int, rng: np.random.Generator,
                        scale: float = 1.0) -> Field:
    """Random real field supported on wavenumbers |k_i| <= kmax."""
    coef = np.zeros(grid.shape, dtype=complex)
    k = grid.wavenumbers
    if grid.dimension == 1:
        mask = np.abs(k) <= kmax
    else:
        kx, ky = np.meshgrid(k, k, indexing="ij")
        mask = (np.abs(kx) <= kmax) & (np.abs(ky) <= kmax)
    coef[mask] = rng.standard_normal(int(mask.sum())) + 1j * rng.standard_normal(int(mask.sum()))
    vals = np.real(np.fft.ifftn(coef)) * scale
    return Field(grid, vals.reshape(-1))


# ---------------------------------------------------------------------------
# snapshot files: header line "d N t" then N^d values, one per line
# ---------------------------------------------------------------------------

def save_field(path: str, f: Field, t: float = 0.0):
    with open(path, "w") as fh:
        fh.write(f"{f.grid.dimension} {f.grid.points_per_axis} {repr(float(t))}\n")
        for v in f.values:
            fh.write(repr(float(v)) + "\n")


def load_field(path: str):
    """Read a snapshot file; returns (Field, t)."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise FieldError(f"malformed snapshot header in {path}")
        d, n, t = int(header[0]), int(header[1]), float(header[2])
        vals = np.array([float(line) for line in fh if line.strip()])
    return Field(TorusGrid(d, n), vals), t


def save_trajectory(directory: str, tr: Trajectory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "times.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "time"])
        for i, t in enumerate(tr.times):
            writer.writerow([i, repr(float(t))])
    for i, (t, s) in enumerate(zip(tr.times, tr.states)):
        save_field(os.path.join(directory, f"state_{i:06d}.snap"), s, t)


def load_trajectory(directory: str) -> Trajectory:
    with open(os.path.join(directory, "times.csv")) as fh:
        rows = list(csv.reader(fh))[1:]
    times = np.array([float(r[1]) for r in rows])
    states = []
    for i in range(times.size):
        f, _ = load_field(os.path.join(directory, f"state_{i:06d}.snap"))
        states.append(f)
    return Trajectory(times, tuple(states))
