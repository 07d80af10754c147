"""Action minimization over controls: events, discrete adjoints, rate estimates.

The rate of an event is estimated by minimizing the control cost plus a
quadratic penalty on the distance to the event set (a terminal ball or a
path tube),

    J(h) = cm_norm(h) + (1/2 lambda) * max(0, dist(h) - radius)^2,

with continuation over decreasing penalty weights.  The gradient
differentiates the exact discrete forward scheme, including the
frozen-coefficient implicit solve, so finite-difference checks are strict.
Every iterate whose raw distance is within the event radius is a feasible
candidate; the estimate returns the cheapest one (after a scalar feasibility
polish along the final ray), or the infinity convention when no feasible
control was found within budget.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .controls import Control, cm_norm
from .coefficients import (CoefficientSet, sigma_combination,
                           sigma_derivative_combination)
from .deterministic import SolverConfig, SolverContext, control_rows, solve
from .fields import (Field, Trajectory, diff_forward, face_average_adjoint,
                     grad_central)


class EventError(ValueError):
    pass


def skeleton_map(h, coeffs: CoefficientSet, cfg: SolverConfig, u0: Field) -> Trajectory:
    """Control-to-trajectory solution map of the skeleton equation."""
    return solve(u0, h, coeffs, cfg)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    """Terminal ball around a target field, or a sup-in-time tube around a
    target trajectory; radius in the chosen norm (L2 default, H-1 optional)."""

    kind: str
    target: object
    radius: float
    norm_kind: str = "l2"

    def __post_init__(self):
        if self.kind not in ("terminal_ball", "path_tube"):
            raise EventError(f"unknown event kind {self.kind!r}")
        if self.radius <= 0 and not math.isinf(self.radius):
            raise EventError("radius must be positive (inf = whole space)")
        if self.norm_kind.lower() not in ("l2", "h-1"):
            raise EventError("event norm must be 'l2' or 'h-1'")
        if self.kind == "terminal_ball" and not isinstance(self.target, Field):
            raise EventError("terminal_ball needs a Field target")
        if self.kind == "path_tube" and not isinstance(self.target, Trajectory):
            raise EventError("path_tube needs a Trajectory target")

    @property
    def grid(self):
        return self.target.grid

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(self.norm_kind.lower().encode())
        h.update(repr(float(self.radius)).encode())
        if isinstance(self.target, Field):
            h.update(self.target.values.tobytes())
        else:
            h.update(self.target.times.tobytes())
            for s in self.target.states:
                h.update(s.values.tobytes())
        return h.hexdigest()


def _norm_weight(grid, norm_kind: str):
    """Fourier multiplier of the squared norm; None selects the direct L2 path."""
    if norm_kind.lower() == "l2":
        return None
    return 1.0 / (1.0 + 4.0 * np.pi ** 2 * grid.ksq)


def weighted_norm(q: np.ndarray, grid, weight) -> np.ndarray:
    """Norm of trailing-spatial-axes blocks; returns per-path values."""
    axes = tuple(range(q.ndim - grid.dimension, q.ndim))
    if weight is None:
        return np.sqrt(grid.cell_volume * np.sum(q * q, axis=axes))
    qh = np.fft.fftn(q, axes=axes) / grid.size
    return np.sqrt(np.sum(weight * np.abs(qh) ** 2, axis=axes))


def weighted_norm_gradient(q: np.ndarray, grid, weight) -> np.ndarray:
    """Euclidean gradient of the squared norm."""
    if weight is None:
        return 2.0 * grid.cell_volume * q
    axes = tuple(range(q.ndim - grid.dimension, q.ndim))
    qh = np.fft.fftn(q, axes=axes)
    return (2.0 / grid.size) * np.real(np.fft.ifftn(weight * qh, axes=axes))


def event_distance(ev: EventSpec, tr: Trajectory) -> float:
    """Raw distance of a trajectory to the event target (not hinged)."""
    w = _norm_weight(ev.grid, ev.norm_kind)
    if ev.kind == "terminal_ball":
        q = tr.terminal.nd() - ev.target.nd()
        return float(weighted_norm(q, ev.grid, w))
    _check_tube_alignment(ev, tr.times)
    dists = [float(weighted_norm(s.nd() - y.nd(), ev.grid, w))
             for s, y in zip(tr.states, ev.target.states)]
    return max(dists)


def event_hit(ev: EventSpec, tr: Trajectory) -> bool:
    if math.isinf(ev.radius):
        return True
    return event_distance(ev, tr) <= ev.radius


def _check_tube_alignment(ev: EventSpec, times: np.ndarray):
    ty = ev.target.times
    if ty.size != times.size or float(np.max(np.abs(ty - times))) > 1e-9:
        raise EventError("tube target must share the solver time grid")


# ---------------------------------------------------------------------------
# penalized objective and its discrete adjoint
# ---------------------------------------------------------------------------

def _forward_states(h: Control, coeffs, cfg, u0: Field):
    """Full forward pass on raw arrays; returns (states, ctx, slice index per step)."""
    ctx = SolverContext(u0.grid, coeffs, cfg)
    rows = control_rows(h, cfg)
    t_left = np.arange(cfg.n_steps) * cfg.dt
    idx = np.clip(np.searchsorted(h.edges, t_left, side="right") - 1,
                  0, h.n_slices - 1)
    states = [u0.nd().astype(float)]
    u = states[0]
    for n in range(cfg.n_steps):
        u = ctx.advance(u, h_modes=rows[n])
        states.append(u)
    return states, ctx, idx


def _event_terms(ev: EventSpec, states, grid):
    """(distance, seed step index, seed direction d(dist)/d(state)) at the active state."""
    w = _norm_weight(grid, ev.norm_kind)
    if ev.kind == "terminal_ball":
        q = states[-1] - ev.target.nd()
        dist = float(weighted_norm(q, grid, w))
        return dist, len(states) - 1, q, w
    dists = [float(weighted_norm(s - y.nd(), grid, w))
             for s, y in zip(states, ev.target.states)]
    n_star = int(np.argmax(dists))
    q = states[n_star] - ev.target.states[n_star].nd()
    return dists[n_star], n_star, q, w


def penalized_objective(h: Control, ev: EventSpec, lam: float,
                        coeffs: CoefficientSet, cfg: SolverConfig, u0: Field):
    """Objective value only; returns (total, cm, distance)."""
    states, ctx, _ = _forward_states(h, coeffs, cfg, u0)
    if ev.kind == "path_tube":
        _check_tube_alignment(ev, np.arange(len(states)) * cfg.dt)
    dist, _, _, _ = _event_terms(ev, states, u0.grid)
    cm = cm_norm(h)
    hinge = max(0.0, dist - ev.radius) if not math.isinf(ev.radius) else 0.0
    return cm + hinge * hinge / (2.0 * lam), cm, dist


def adjoint_gradient(h: Control, ev: EventSpec, lam: float,
                     coeffs: CoefficientSet, cfg: SolverConfig, u0: Field):
    """Gradient of the penalized objective w.r.t. the control coefficients.

    Differentiates the discrete scheme exactly (implicit solve included);
    returns (gradient array shaped like h.coefficients, total, cm, distance).
    """
    states, ctx, idx = _forward_states(h, coeffs, cfg, u0)
    grid = u0.grid
    dim, dt, sp = ctx.dim, ctx.dt, ctx.spacing
    dist, n_star, q, w = _event_terms(ev, states, grid)
    cm = cm_norm(h)
    hinge = max(0.0, dist - ev.radius) if not math.isinf(ev.radius) else 0.0
    total = cm + hinge * hinge / (2.0 * lam)

    grad = h.slice_lengths[:, None] * h.coefficients
    if hinge == 0.0:
        return grad, total, cm, dist

    seeds = {n_star: (hinge / lam) * weighted_norm_gradient(q, grid, w) / (2.0 * dist)}
    lam_state = np.zeros_like(states[0])
    if cfg.n_steps in seeds:
        lam_state = lam_state + seeds[cfg.n_steps]

    noise = coeffs.noise
    diffusion = coeffs.diffusion
    flux = coeffs.flux
    for n in range(cfg.n_steps - 1, -1, -1):
        s = states[n]
        v = states[n + 1]
        a = None if ctx.inv_symbol is not None else ctx.frozen_coefficient(s)
        wvec = ctx.solve_system(a, lam_state)
        hk = h.coefficients[idx[n]]
        for k, fn in enumerate(noise.modes):
            grad[idx[n], k] += dt * float(np.sum(fn(s) * wvec))
        lam_state = wvec.copy()
        if not flux.is_zero:
            dw = grad_central(wvec, sp, dim)
            for i in range(dim):
                lam_state = lam_state + dt * flux.derivatives[i](s) * dw[i]
        if float(np.max(np.abs(hk))) > 0.0 and not noise.state_independent:
            lam_state = lam_state + dt * sigma_derivative_combination(noise, s, hk) * wvec
        if not diffusion.is_constant:
            z = None
            for i in range(dim):
                prod = diff_forward(v, sp, dim, i) * diff_forward(wvec, sp, dim, i)
                term = face_average_adjoint(prod, dim, i)
                z = term if z is None else z + term
            if ctx.smooth_mult is not None:
                from .fields import apply_multiplier
                z = apply_multiplier(z, ctx.smooth_mult, grid)
            lam_state = lam_state - dt * diffusion.evaluate_derivative(s) * z
        if n in seeds:
            lam_state = lam_state + seeds[n]
    return grad, total, cm, dist


# ---------------------------------------------------------------------------
# minimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MinimizeOptions:
    lambda0: float = 0.02
    n_stages: int = 3
    stage_shrink: float = 4.0
    budget: int = 500
    gtol: float = 1e-9
    armijo: float = 1e-4
    max_backtracks: int = 40
    step_init: float = 1.0
    n_starts: int = 1
    start_scale: float = 0.1
    seed: int = 0
    polish: bool = True


@dataclass(frozen=True)
class RateEstimate:
    """Outcome of one rate minimization.

    value is the control cost of the returned feasible control (math.inf with
    feasible=False when no control reached the event within budget); the raw
    feasibility gap (distance to the target, never hidden) is always reported.
    """

    value: float
    control: Control
    penalty_weight: float
    iterations: int
    grad_norm: float
    gap: float
    feasible: bool
    converged: bool
    stage_gaps: tuple
    local_minima: tuple = ()

    @property
    def event_radius_met(self) -> bool:
        return self.feasible


def minimize_rate(ev: EventSpec, init: Control, coeffs: CoefficientSet,
                  cfg: SolverConfig, u0: Field,
                  opts: MinimizeOptions = MinimizeOptions()) -> RateEstimate:
    """Penalized gradient descent with backtracking and penalty continuation.

    Deterministic for fixed inputs; multi-start (opts.n_starts > 1) explores
    the nonconvex landscape from seeded random initializations and reports
    every local minimum found.
    """
    rng = np.random.default_rng(opts.seed)
    lambdas = [opts.lambda0 / opts.stage_shrink ** s for s in range(opts.n_stages)]
    all_candidates = []
    per_start = []
    total_iters = 0
    exhausted = False
    last_gnorm = math.inf
    last_gap = math.inf
    stage_gaps_first = None

    for start in range(opts.n_starts):
        if start == 0:
            h = init
        else:
            pert = opts.start_scale * rng.standard_normal(init.coefficients.shape)
            h = init.with_coefficients(init.coefficients + pert)
        best_here = None
        stage_gaps = []
        stepsize = opts.step_init
        for lam in lambdas:
            gap = math.inf
            stage_done = False
            for it in range(opts.budget + 1):
                grad, total, cm, dist = adjoint_gradient(h, ev, lam, coeffs, cfg, u0)
                gap = dist
                if dist <= ev.radius:
                    cand = (cm, h)
                    all_candidates.append(cand)
                    if best_here is None or cm < best_here[0]:
                        best_here = cand
                gnorm = float(np.sqrt(np.sum(grad * grad)))
                last_gnorm = gnorm
                if gnorm <= opts.gtol:
                    stage_done = True
                    break
                if it == opts.budget:
                    break
                accepted = False
                s = stepsize
                for _ in range(opts.max_backtracks):
                    h_try = h.with_coefficients(h.coefficients - s * grad)
                    j_try, _, _ = penalized_objective(h_try, ev, lam, coeffs, cfg, u0)
                    if j_try <= total - opts.armijo * s * gnorm * gnorm:
                        accepted = True
                        break
                    s *= 0.5
                total_iters += 1
                if not accepted:
                    # no descent step exists at line-search resolution
                    stage_done = True
                    break
                h = h_try
                stepsize = min(2.0 * s, 1e6)
            if not stage_done:
                exhausted = True
            stage_gaps.append(gap)
        last_gap = stage_gaps[-1]
        if stage_gaps_first is None:
            stage_gaps_first = tuple(stage_gaps)
        if opts.polish and not math.isinf(ev.radius):
            polished = _feasibility_polish(h, ev, coeffs, cfg, u0)
            if polished is not None:
                all_candidates.append(polished)
                if best_here is None or polished[0] < best_here[0]:
                    best_here = polished
        per_start.append(best_here if best_here is not None else (math.inf, h))

    local = tuple(sorted(round(v, 12) for v, _ in per_start))
    feasible = [c for c in all_candidates if c[0] < math.inf]
    if feasible:
        value, argmin = min(feasible, key=lambda c: c[0])
        gap = event_distance(ev, solve(u0, argmin, coeffs, cfg))
        return RateEstimate(value=value, control=argmin,
                            penalty_weight=lambdas[-1], iterations=total_iters,
                            grad_norm=last_gnorm, gap=gap, feasible=True,
                            converged=not exhausted, stage_gaps=stage_gaps_first,
                            local_minima=local)
    return RateEstimate(value=math.inf, control=init, penalty_weight=lambdas[-1],
                        iterations=total_iters, grad_norm=last_gnorm,
                        gap=last_gap, feasible=False, converged=not exhausted,
                        stage_gaps=stage_gaps_first, local_minima=local)


def _feasibility_polish(h: Control, ev: EventSpec, coeffs, cfg, u0: Field,
                        bisections: int = 40):
    """Cheapest feasible point on the ray tau * h (forward solves only)."""

    def gap_at(tau: float) -> float:
        hc = h.with_coefficients(tau * h.coefficients)
        return event_distance(ev, solve(u0, hc, coeffs, cfg))

    if float(np.max(np.abs(h.coefficients))) == 0.0:
        return (0.0, h) if gap_at(0.0) <= ev.radius else None
    hi = 1.0
    if gap_at(hi) > ev.radius:
        found = False
        for _ in range(12):
            hi *= 1.25
            if gap_at(hi) <= ev.radius:
                found = True
                break
        if not found:
            return None
    lo = 0.0
    if gap_at(lo) <= ev.radius:
        hi = 0.0
    else:
        for _ in range(bisections):
            mid = 0.5 * (lo + hi)
            if gap_at(mid) <= ev.radius:
                hi = mid
            else:
                lo = mid
    h_best = h.with_coefficients(hi * h.coefficients)
    return (cm_norm(h_best), h_best)
