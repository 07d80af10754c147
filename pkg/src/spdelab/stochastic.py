"""Sample-path simulation with reproducible truncated cylindrical noise.

Noise: K independent scalar Brownian motions, one per noise mode.  Each path
owns a counter-based random stream keyed by (master seed, stream index), so
the increment at (seed, stream, step, mode) never depends on how many paths
run, in which order, or on which thread.  The time stepping is the IMEX
kernel of the deterministic module with the Euler-Maruyama noise term added
to the explicit side; with epsilon = 0 a path reproduces the deterministic
solution bit for bit.

Batches of paths advance together (columnwise-independent linear algebra),
which keeps ensembles cheap without breaking per-path determinism.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .controls import Control
from .coefficients import CoefficientSet, sigma_combination
from .deterministic import (BLOWUP_THRESHOLD, BlowUpError, SolverConfig,
                            SolverContext, control_rows)
from .fields import Field, Trajectory, grad_central, norm_l2


@dataclass(frozen=True)
class NoiseDriver:
    """Reproducible per-(stream, step, mode) Brownian increments ~ N(0, dt)."""

    n_modes: int
    master_seed: int
    dt: float

    def increments(self, stream: int, n_steps: int) -> np.ndarray:
        """Increment table of shape (n_steps, K), deterministic in (seed, stream)."""
        key = np.array([self.master_seed, stream], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return math.sqrt(self.dt) * gen.standard_normal((n_steps, self.n_modes))

    def increment_block(self, streams, n_steps: int) -> np.ndarray:
        """Stacked increments for a list of streams, shape (P, n_steps, K)."""
        return np.stack([self.increments(s, n_steps) for s in streams])


def simulate(u0: Field, eps: float, coeffs: CoefficientSet, cfg: SolverConfig,
             driver: NoiseDriver, stream: int = 0) -> Trajectory:
    """One sample path of the small-noise equation (noise amplitude sqrt(eps))."""
    return simulate_controlled(u0, eps, None, coeffs, cfg, driver, stream)


def simulate_controlled(u0: Field, eps: float, h, coeffs: CoefficientSet,
                        cfg: SolverConfig, driver: NoiseDriver,
                        stream: int = 0) -> Trajectory:
    """Sample path with both the sqrt(eps) noise and the drift sigma(u) h(t)."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    ctx = SolverContext(u0.grid, coeffs, cfg)
    rows = control_rows(h, cfg)
    m = cfg.n_steps
    dw = driver.increments(stream, m) if eps > 0 else None
    root_eps = math.sqrt(eps)
    u = u0.nd().astype(float)
    states = [u0]
    times = [0.0]
    guard = BLOWUP_THRESHOLD ** 2 / u0.grid.cell_volume
    for n in range(m):
        noise = None
        if dw is not None:
            noise = root_eps * sigma_combination(coeffs.noise, u, dw[n])
        u = ctx.advance(u, h_modes=None if rows is None else rows[n], noise=noise)
        if float(np.sum(u * u)) > guard:
            raise BlowUpError(f"L2 norm exceeded {BLOWUP_THRESHOLD:g} at step {n + 1}")
        states.append(Field(u0.grid, u.reshape(-1)))
        times.append((n + 1) * cfg.dt)
    times = np.array(times)
    times[-1] = cfg.horizon
    return Trajectory(times, tuple(states))


# ---------------------------------------------------------------------------
# batched path evolution
# ---------------------------------------------------------------------------

class PathAccumulator:
    """Per-path running functionals over a batch evolution."""

    def __init__(self, ctx: SolverContext, u0_nd: np.ndarray, n_paths: int):
        self.ctx = ctx
        self.w = ctx.grid.cell_volume
        self.axes = tuple(range(1, 1 + ctx.dim))
        self.sup_sq = np.full(n_paths, self._l2sq(np.broadcast_to(
            u0_nd, (n_paths,) + u0_nd.shape)))
        self.h1_prev = self._h1sq(np.broadcast_to(u0_nd, (n_paths,) + u0_nd.shape))
        self.h1_integral = np.zeros(n_paths)

    def _l2sq(self, u):
        return self.w * np.sum(u * u, axis=self.axes)

    def _h1sq(self, u):
        total = np.sum(u * u, axis=self.axes)
        for g in grad_central(u, self.ctx.spacing, self.ctx.dim):
            total = total + np.sum(g * g, axis=self.axes)
        return self.w * total

    def update(self, u):
        self.sup_sq = np.maximum(self.sup_sq, self._l2sq(u))
        h1 = self._h1sq(u)
        self.h1_integral += 0.5 * self.ctx.dt * (self.h1_prev + h1)
        self.h1_prev = h1


def evolve_batch(u0: Field, eps: float, h, coeffs: CoefficientSet, cfg: SolverConfig,
                 driver: NoiseDriver, streams, observer=None,
                 accumulate_energy: bool = False):
    """Advance all streams together; returns (terminal block, PathAccumulator).

    observer(step_index, state_block) is called after every step when given
    (used for running event distances); the state block has shape
    (P,) + spatial shape.
    """
    streams = list(streams)
    ctx = SolverContext(u0.grid, coeffs, cfg)
    rows = control_rows(h, cfg)
    m = cfg.n_steps
    p = len(streams)
    u = np.broadcast_to(u0.nd(), (p,) + u0.grid.shape).astype(float)
    dw = driver.increment_block(streams, m) if eps > 0 else None
    root_eps = math.sqrt(eps)
    acc = PathAccumulator(ctx, u0.nd(), p) if accumulate_energy else None
    guard = BLOWUP_THRESHOLD ** 2 / u0.grid.cell_volume
    for n in range(m):
        noise = None
        if dw is not None:
            noise = root_eps * sigma_combination(coeffs.noise, u, dw[:, n, :])
        u = ctx.advance(u, h_modes=None if rows is None else rows[n], noise=noise)
        if float(np.max(np.sum(u * u, axis=tuple(range(1, u.ndim))))) > guard:
            raise BlowUpError(f"L2 norm exceeded {BLOWUP_THRESHOLD:g} at step {n + 1}")
        if acc is not None:
            acc.update(u)
        if observer is not None:
            observer(n, u)
    return u, acc


def _chunked(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def map_path_chunks(fn, streams, threads: int = 1, chunk: int = 2048):
    """Apply fn to chunks of streams, in order; threads only change scheduling."""
    chunks = list(_chunked(list(streams), chunk))
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleStats:
    n_paths: int
    mean_sup_energy: float
    se_sup_energy: float
    mean_h1_integral: float
    se_h1_integral: float
    moment_orders: tuple
    moment_means: tuple
    moment_ses: tuple


def ensemble(u0: Field, eps: float, h, coeffs: CoefficientSet, cfg: SolverConfig,
             driver: NoiseDriver, streams, p_list=(2,), threads: int = 1):
    """Per-path energy functionals and their ensemble statistics.

    Returns (EnsembleStats, rows) where rows hold one tuple per path:
    (stream, sup-energy, H1 integral, sup ||u||^{2p} for each requested p).
    Results are deterministic in the stream set, independent of chunking,
    thread count or evaluation order.
    """
    streams = list(streams)
    if len(streams) < 2:
        raise ValueError("need at least two paths")
    p_list = tuple(int(p) for p in p_list)

    def run(chunk):
        _, acc = evolve_batch(u0, eps, h, coeffs, cfg, driver, chunk,
                              accumulate_energy=True)
        return acc.sup_sq, acc.h1_integral

    parts = map_path_chunks(run, streams, threads=threads)
    sup_sq = np.concatenate([p[0] for p in parts])
    h1int = np.concatenate([p[1] for p in parts])
    rows = []
    for i, s in enumerate(streams):
        rows.append((s, float(sup_sq[i]), float(h1int[i]),
                     *[float(sup_sq[i] ** p) for p in p_list]))
    stats = EnsembleStats(
        n_paths=len(streams),
        mean_sup_energy=float(np.mean(sup_sq)),
        se_sup_energy=_se(sup_sq),
        mean_h1_integral=float(np.mean(h1int)),
        se_h1_integral=_se(h1int),
        moment_orders=p_list,
        moment_means=tuple(float(np.mean(sup_sq ** p)) for p in p_list),
        moment_ses=tuple(_se(sup_sq ** p) for p in p_list),
    )
    return stats, rows


def _se(x: np.ndarray) -> float:
    n = x.size
    if n < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(n))
