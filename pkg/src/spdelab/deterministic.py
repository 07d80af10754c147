"""Time integration of the controlled convection-diffusion equation.

One step freezes the diffusion coefficient at the current state, treats the
resulting symmetric positive definite diffusion operator implicitly and the
flux/control (and, in the stochastic module, noise) terms explicitly:

    (I - dt L_{a(u^n)}) u^{n+1} = u^n + dt (-div B(u^n) + sigma(u^n) h_n)

L_a is the conservative face-form operator sum_i D-( avg(a) D+ . ), whose
discrete integration by parts is exact; the flux divergence uses central
differences, which sum to zero over the torus so the spatial mean moves only
through the control/noise terms.  With regularization r > 0 the frozen
coefficient is heat-smoothed before assembly.

The kernel operates on raw arrays whose trailing axes are spatial, so a batch
of independent paths advances with identical per-path arithmetic (used by the
Monte Carlo layer); a single trajectory is the batch-of-one case.  Constant
diffusion unlocks an exact circulant (FFT) solve; otherwise the SPD system is
solved by conjugate gradients to the configured tolerance, columnwise
independent so per-path results do not depend on batch composition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .controls import Control, ControlError
from .coefficients import (CoefficientSet, sigma_combination)
from .fields import (Field, Trajectory, TorusGrid, apply_multiplier, div_central,
                     diff_backward, diff_forward, face_average, fourier,
                     grad_central, heat_multiplier, norm_h1, norm_l2)

BLOWUP_THRESHOLD = 1e6


class LinearSolveError(RuntimeError):
    pass


class BlowUpError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Step size, horizon, regularization r (r = 0: plain skeleton equation;
    r > 0: heat-smoothed diffusion coefficient) and linear-solve controls."""

    dt: float
    horizon: float
    regularization: float = 0.0
    tol_lin: float = 1e-10
    max_lin_iter: int = 2000

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-12 * max(1.0, ratio):
            raise ValueError(f"horizon/dt = {ratio} is not an integer")
        if not 0.0 < self.tol_lin <= 1e-4:
            raise ValueError("tol_lin must lie in (0, 1e-4]")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def default_dt(grid: TorusGrid, coeffs: CoefficientSet, horizon: float) -> float:
    """CFL-style default: dt <= min(spacing / (2 sup|B'|), horizon/256)."""
    dt = horizon / 256.0
    lb = coeffs.flux.derivative_bound
    if lb > 0:
        dt = min(dt, grid.spacing / (2.0 * lb))
    steps = int(math.ceil(horizon / dt - 1e-12))
    return horizon / steps


class SolverContext:
    """Per-(grid, coefficients, config) precomputation for the stepping kernel."""

    def __init__(self, grid: TorusGrid, coeffs: CoefficientSet, cfg: SolverConfig):
        if coeffs.dimension != grid.dimension:
            raise ValueError("coefficient dimension does not match the grid")
        self.grid = grid
        self.coeffs = coeffs
        self.cfg = cfg
        self.dim = grid.dimension
        self.spacing = grid.spacing
        self.dt = cfg.dt
        self.smooth_mult = (heat_multiplier(grid, cfg.regularization)
                            if cfg.regularization > 0 else None)
        self.inv_symbol = None
        if coeffs.diffusion.is_constant:
            n = grid.points_per_axis
            k = grid.wavenumbers
            sym_axis = (2.0 * n * np.sin(np.pi * k / n)) ** 2
            if self.dim == 1:
                lam = sym_axis
            else:
                lam = sym_axis[:, None] + sym_axis[None, :]
            self.inv_symbol = 1.0 / (1.0 + self.dt * coeffs.diffusion.constant_value * lam)

    # -- pieces reused by the adjoint ------------------------------------

    def frozen_coefficient(self, u: np.ndarray) -> np.ndarray:
        """Diffusion coefficient frozen at u, heat-smoothed when r > 0."""
        a = self.coeffs.diffusion.evaluate(u)
        if self.smooth_mult is not None and not self.coeffs.diffusion.is_constant:
            a = apply_multiplier(a, self.smooth_mult, self.grid)
        return a

    def apply_system(self, a: np.ndarray, v: np.ndarray) -> np.ndarray:
        """(I - dt L_a) v with the conservative face form."""
        out = v.copy()
        for i in range(self.dim):
            flux = face_average(a, self.dim, i) * diff_forward(v, self.spacing, self.dim, i)
            out = out - self.dt * diff_backward(flux, self.spacing, self.dim, i)
        return out

    def solve_system(self, a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        if self.inv_symbol is not None:
            return apply_multiplier(rhs, self.inv_symbol, self.grid)
        return _cg(lambda v: self.apply_system(a, v), rhs, self.dim,
                   self.cfg.tol_lin, self.cfg.max_lin_iter)

    def explicit_drift(self, u: np.ndarray, h_modes) -> np.ndarray:
        """-div B(u) + sigma(u) h, evaluated at the current state."""
        drift = np.zeros_like(u)
        flux = self.coeffs.flux
        if not flux.is_zero:
            comps = [fn(u) for fn in flux.components]
            drift = drift - div_central(comps, self.spacing, self.dim)
        if h_modes is not None and float(np.max(np.abs(h_modes))) > 0.0:
            drift = drift + sigma_combination(self.coeffs.noise, u,
                                              np.asarray(h_modes, dtype=float))
        return drift

    def advance(self, u: np.ndarray, h_modes=None, noise: np.ndarray = None) -> np.ndarray:
        """One IMEX step; noise (already scaled) is added to the explicit side."""
        rhs = u + self.dt * self.explicit_drift(u, h_modes)
        if noise is not None:
            rhs = rhs + noise
        a = None if self.inv_symbol is not None else self.frozen_coefficient(u)
        return self.solve_system(a, rhs)


def _cg(apply_op, b: np.ndarray, dim: int, tol: float, maxiter: int) -> np.ndarray:
    """Conjugate gradients, columnwise independent over leading batch axes.

    Converged columns freeze, so every column reproduces the batch-of-one
    iteration exactly.  Relative residual tolerance.
    """
    axes = tuple(range(b.ndim - dim, b.ndim))
    x = b.copy()
    r = b - apply_op(x)
    p = r.copy()
    rs = np.sum(r * r, axis=axes, keepdims=True)
    tol2 = tol * tol * np.maximum(np.sum(b * b, axis=axes, keepdims=True), 1e-300)
    active = rs > tol2
    for _ in range(maxiter):
        if not np.any(active):
            return x
        ap = apply_op(p)
        pap = np.sum(p * ap, axis=axes, keepdims=True)
        alpha = np.where(active, rs / np.where(pap > 0, pap, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.sum(r * r, axis=axes, keepdims=True)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = np.where(active, r + beta * p, p)
        rs = np.where(active, rs_new, rs)
        active = active & (rs > tol2)
    raise LinearSolveError(f"conjugate gradients did not reach tol {tol} "
                           f"within {maxiter} iterations")


# ---------------------------------------------------------------------------
# public stepping / solving
# ---------------------------------------------------------------------------

def step(u: Field, h_t, coeffs: CoefficientSet, cfg: SolverConfig) -> Field:
    """One IMEX step from u with control mode weights h_t (length K or None)."""
    ctx = SolverContext(u.grid, coeffs, cfg)
    out = ctx.advance(u.nd(), h_modes=h_t)
    return Field(u.grid, out.reshape(-1))


def control_rows(h: Control, cfg: SolverConfig) -> np.ndarray:
    """Per-step control coefficients (left-endpoint alignment), shape (M, K)."""
    if h is None:
        return None
    if h.horizon < cfg.horizon - 1e-12:
        raise ControlError("control horizon shorter than the solver horizon")
    if float(np.min(h.slice_lengths)) < cfg.dt - 1e-12:
        raise ControlError("every control slice must span at least one step")
    t_left = np.arange(cfg.n_steps) * cfg.dt
    idx = np.clip(np.searchsorted(h.edges, t_left, side="right") - 1, 0, h.n_slices - 1)
    return h.coefficients[idx]


def solve(u0: Field, h, coeffs: CoefficientSet, cfg: SolverConfig) -> Trajectory:
    """Integrate the controlled equation; returns the full trajectory.

    Aborts with BlowUpError once the L2 norm passes 1e6 (mis-set CFL shows up
    as a fast exponential, not as NaNs downstream).
    """
    ctx = SolverContext(u0.grid, coeffs, cfg)
    rows = control_rows(h, cfg)
    u = u0.nd().astype(float)
    states = [u0]
    times = [0.0]
    guard = BLOWUP_THRESHOLD ** 2 / u0.grid.cell_volume
    for n in range(cfg.n_steps):
        u = ctx.advance(u, h_modes=None if rows is None else rows[n])
        if float(np.sum(u * u)) > guard:
            raise BlowUpError(f"L2 norm exceeded {BLOWUP_THRESHOLD:g} at step {n + 1}")
        states.append(Field(u0.grid, u.reshape(-1)))
        times.append((n + 1) * cfg.dt)
    times = np.array(times)
    times[-1] = cfg.horizon
    return Trajectory(times, tuple(states))


def solve_regularized_family(u0: Field, h, coeffs: CoefficientSet, cfg: SolverConfig,
                             r_list) -> list:
    """One trajectory per smoothing level, shared grid and dt; r_list decreasing."""
    r_list = [float(r) for r in r_list]
    if any(r < 0 for r in r_list):
        raise ValueError("regularization levels must be >= 0")
    if any(b >= a for a, b in zip(r_list, r_list[1:])) and len(r_list) > 1:
        if not all(b < a for a, b in zip(r_list, r_list[1:])):
            raise ValueError("r_list must decrease strictly")
    return [solve(u0, h, coeffs, replace(cfg, regularization=r)) for r in r_list]


# ---------------------------------------------------------------------------
# energy accounting and weak-form residual
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyReport:
    """sup-t energy, H1 dissipation integral and the certified Gronwall envelope.

    margin = envelope - (sup + delta1 * integral); reported even when negative.
    """

    sup_energy: float
    h1_integral: float
    envelope: float
    delta1: float
    c_energy: float
    margin: float

    def row(self):
        return (self.sup_energy, self.h1_integral, self.envelope,
                self.delta1, self.c_energy, self.margin)


def energy_report(tr: Trajectory, h, coeffs: CoefficientSet,
                  cfg: SolverConfig) -> EnergyReport:
    consts = coeffs.certified()
    sup_e = max(norm_l2(s) ** 2 for s in tr.states)
    h1sq = np.array([norm_h1(s) ** 2 for s in tr.states])
    integral = float(np.trapezoid(h1sq, tr.times))
    t_end = tr.horizon
    if h is None:
        int_h = 0.0
    else:
        int_h = float(np.sum(h.slice_lengths * h.u_norm_timeseries()))
    c = consts.c_energy
    u0sq = norm_l2(tr.states[0]) ** 2
    envelope = (u0sq + c * t_end + c * int_h) * math.exp(c * (t_end + int_h))
    margin = envelope - (sup_e + consts.delta1 * integral)
    return EnergyReport(sup_e, integral, envelope, consts.delta1, c, margin)


def weak_form_residual(tr: Trajectory, phi: Field, h, coeffs: CoefficientSet,
                       cfg: SolverConfig = None) -> float:
    """Max over t of the tested-equation defect with left-endpoint quadrature.

    The spatial pairings reuse the scheme's discrete operators (central flux
    pairing, face-form diffusion pairing), so the residual isolates the time
    discretization and halves with dt.  phi must be band-limited to
    |k_i| <= N/4.
    """
    grid = tr.grid
    if phi.grid != grid:
        raise ValueError("test function lives on a different grid")
    _require_band_limited(phi)
    dim, sp, w = grid.dimension, grid.spacing, grid.cell_volume
    reg = 0.0 if cfg is None else cfg.regularization
    smooth = heat_multiplier(grid, reg) if reg > 0 else None

    phi_nd = phi.nd()
    grad_phi_c = grad_central(phi_nd, sp, dim)
    grad_phi_f = [diff_forward(phi_nd, sp, dim, i) for i in range(dim)]

    t = tr.times
    base = float(np.dot(tr.states[0].values, phi.values)) * w
    acc = 0.0
    worst = 0.0
    for n, state in enumerate(tr.states):
        lhs = float(np.dot(state.values, phi.values)) * w
        worst = max(worst, abs(lhs - base - acc))
        if n == len(tr.states) - 1:
            break
        dt_n = float(t[n + 1] - t[n])
        u = state.nd()
        rate = 0.0
        if not coeffs.flux.is_zero:
            for i in range(dim):
                rate += float(np.sum(coeffs.flux.components[i](u) * grad_phi_c[i])) * w
        a = coeffs.diffusion.evaluate(u)
        if smooth is not None and not coeffs.diffusion.is_constant:
            a = apply_multiplier(a, smooth, grid)
        for i in range(dim):
            flux = face_average(a, dim, i) * diff_forward(u, sp, dim, i)
            rate -= float(np.sum(flux * grad_phi_f[i])) * w
        if h is not None:
            hk = h.at_time(float(t[n]))
            if float(np.max(np.abs(hk))) > 0.0:
                sig = sigma_combination(coeffs.noise, u, hk)
                rate += float(np.sum(sig * phi_nd)) * w
        acc += dt_n * rate
    return worst


def _require_band_limited(phi: Field):
    grid = phi.grid
    fh = fourier(phi.nd(), grid)
    k = grid.wavenumbers
    kmax = grid.points_per_axis // 4
    if grid.dimension == 1:
        mask = np.abs(k) > kmax
    else:
        kx, ky = np.meshgrid(k, k, indexing="ij")
        mask = (np.abs(kx) > kmax) | (np.abs(ky) > kmax)
    tail = float(np.sum(np.abs(fh[mask]) ** 2))
    total = float(np.sum(np.abs(fh) ** 2))
    if total > 0 and tail > 1e-20 * total:
        raise ValueError("test function must be band-limited to |k| <= N/4")
