"""Coefficient models for the convection-diffusion system and their validation.

A coefficient set bundles the flux B (componentwise C^1 with bounded
derivative), the diffusion matrix A (symmetric, uniformly elliptic and
bounded: delta I <= A <= C I, Lipschitz entries) and the noise mode family
sigma_k (square-summable Lipschitz constants, linear growth).  The validator
samples every declared inequality and reports worst-case margins; it also
certifies the explicit constants used by the energy and contraction
envelopes, derived once from the declared bounds by a fixed Young-inequality
chain and then frozen.

Also here: the heat-smoothed diffusion A_r = P_r(A(u)) and the family of
smooth even approximations of |x| that drives the L1 uniqueness estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .fields import Field, TorusGrid, apply_multiplier, heat_multiplier


class CoefficientError(ValueError):
    """Malformed coefficient declarations or mismatched noise dimensions."""


@dataclass(frozen=True)
class FluxSpec:
    """Flux components B_i: R -> R with derivatives and a declared sup|B_i'|."""

    components: tuple          # callables, vectorized over arrays
    derivatives: tuple
    derivative_bound: float
    values_at_zero: tuple = None

    def __post_init__(self):
        if len(self.components) != len(self.derivatives):
            raise CoefficientError("flux components/derivatives length mismatch")
        if self.values_at_zero is None:
            object.__setattr__(self, "values_at_zero",
                               tuple(float(fn(np.zeros(1))[0]) for fn in self.components))

    @property
    def dimension(self) -> int:
        return len(self.components)

    @property
    def is_zero(self) -> bool:
        return self.derivative_bound == 0.0 and all(v == 0.0 for v in self.values_at_zero)


@dataclass(frozen=True)
class DiffusionSpec:
    """Diffusion matrix entries A_ij: R -> R with ellipticity window [delta, C].

    Only diagonal matrices of the form a(y) I are constructed by the built-in
    library; `scalar` / `scalar_derivative` carry that common entry.  A
    constant scalar (constant_value set) unlocks the exact circulant solver.
    """

    dimension: int
    scalar: object             # callable a(y)
    scalar_derivative: object
    ellipticity: float         # delta
    bound: float               # C
    lipschitz: float
    constant_value: float = None

    def __post_init__(self):
        if self.ellipticity <= 0 or self.bound < self.ellipticity:
            raise CoefficientError("need 0 < delta <= C")

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        if self.is_constant:
            return np.full_like(u, self.constant_value)
        return self.scalar(u)

    def evaluate_derivative(self, u: np.ndarray) -> np.ndarray:
        if self.is_constant:
            return np.zeros_like(u)
        return self.scalar_derivative(u)


@dataclass(frozen=True)
class NoiseSpec:
    """Truncated cylindrical noise family sigma_k: R -> R, k = 1..K.

    The noise space is l^2 truncated to K coordinates; |h|_U is the Euclidean
    norm of the mode vector.  Declared constants: sum of squared per-mode
    Lipschitz constants (lipschitz_sum) and the linear-growth constant in
    sum_k sigma_k(y)^2 <= growth (1 + y^2).
    """

    modes: tuple               # callables sigma_k(y)
    mode_derivatives: tuple
    mode_lipschitz: tuple
    lipschitz_sum: float
    growth: float
    state_independent: bool = False

    def __post_init__(self):
        k = len(self.modes)
        if len(self.mode_derivatives) != k or len(self.mode_lipschitz) != k:
            raise CoefficientError("noise mode arrays must share one length")

    @property
    def n_modes(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class CertifiedConstants:
    """Envelope constants frozen from the declared bounds.

    delta1 is the certified coercivity (half the ellipticity floor), c_energy
    the Gronwall-envelope constant from the Young chain (with a fixed x2
    safety factor covering the explicit-in-time terms of the scheme), c_l1
    the L1-contraction rate: the noise Lipschitz part plus unit slack.
    """

    delta1: float
    c_energy: float
    c_l1: float


@dataclass(frozen=True)
class CoefficientSet:
    name: str
    flux: FluxSpec
    diffusion: DiffusionSpec
    noise: NoiseSpec

    def __post_init__(self):
        if self.flux.dimension != self.diffusion.dimension:
            raise CoefficientError("flux and diffusion dimension mismatch")

    @property
    def dimension(self) -> int:
        return self.diffusion.dimension

    def certified(self) -> CertifiedConstants:
        d = self.dimension
        delta = self.diffusion.ellipticity
        b0sq = sum(v * v for v in self.flux.values_at_zero)
        lb = self.flux.derivative_bound
        root_growth = math.sqrt(self.noise.growth)
        a = (2.0 / delta) * b0sq
        b = 0.75 * delta + (2.0 * d / delta) * lb ** 2
        c = 0.5 * root_growth
        e = 1.5 * root_growth
        c_energy = 2.0 * max(2.0 * a, 2.0 * b, 2.0 * c, 2.0 * e, delta)
        c_l1 = math.sqrt(self.noise.lipschitz_sum) + 1.0
        return CertifiedConstants(delta1=0.5 * delta, c_energy=c_energy, c_l1=c_l1)


# ---------------------------------------------------------------------------
# built-in library
# ---------------------------------------------------------------------------

def builtin_linear(delta: float = 0.5, n_modes: int = 8, noise_amp: float = 1.0,
                   dimension: int = 1) -> CoefficientSet:
    """Linear test case: A = delta I, B = 0, additive modes sigma_k = amp/k.

    Admits closed-form oracles; the diffusion is constant so the implicit
    solve is an exact circulant inversion.
    """
    zero = lambda y: np.zeros_like(y)
    flux = FluxSpec(components=(zero,) * dimension, derivatives=(zero,) * dimension,
                    derivative_bound=0.0)
    diff = DiffusionSpec(dimension=dimension,
                         scalar=lambda y, d=delta: np.full_like(y, d),
                         scalar_derivative=zero,
                         ellipticity=delta, bound=delta, lipschitz=0.0,
                         constant_value=delta)
    amps = [noise_amp / k for k in range(1, n_modes + 1)]
    modes = tuple((lambda y, a=a: np.full_like(y, a)) for a in amps)
    derivs = (zero,) * n_modes
    growth = sum(a * a for a in amps)
    noise = NoiseSpec(modes=modes, mode_derivatives=derivs,
                      mode_lipschitz=(0.0,) * n_modes,
                      lipschitz_sum=0.0, growth=growth, state_independent=True)
    return CoefficientSet("linear", flux, diff, noise)


def builtin_quasilinear(flux_scale: float = 1.0, n_modes: int = 8,
                        noise_amp: float = 1.0, dimension: int = 1) -> CoefficientSet:
    """Quasilinear case: A(y) = (1 + sin(y)/2) I, B_i = beta_i arctan,
    sigma_k(y) = (amp/k)(1 + sin y).  Exercises every declared inequality."""
    betas = tuple(flux_scale / (i + 1) for i in range(dimension))
    comps = tuple((lambda y, b=b: b * np.arctan(y)) for b in betas)
    derivs = tuple((lambda y, b=b: b / (1.0 + y * y)) for b in betas)
    flux = FluxSpec(components=comps, derivatives=derivs,
                    derivative_bound=max(betas))
    diff = DiffusionSpec(dimension=dimension,
                         scalar=lambda y: 1.0 + 0.5 * np.sin(y),
                         scalar_derivative=lambda y: 0.5 * np.cos(y),
                         ellipticity=0.5, bound=1.5, lipschitz=0.5)
    amps = [noise_amp / k for k in range(1, n_modes + 1)]
    modes = tuple((lambda y, a=a: a * (1.0 + np.sin(y))) for a in amps)
    mderivs = tuple((lambda y, a=a: a * np.cos(y)) for a in amps)
    lip_sum = sum(a * a for a in amps)
    growth = 4.0 * sum(a * a for a in amps)   # (1+sin y)^2 <= 4 <= 4(1+y^2)
    noise = NoiseSpec(modes=modes, mode_derivatives=mderivs,
                      mode_lipschitz=tuple(amps),
                      lipschitz_sum=lip_sum, growth=growth)
    return CoefficientSet("quasilinear", flux, diff, noise)


BUILTINS = {"linear": builtin_linear, "quasilinear": builtin_quasilinear}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    margin: float
    passed: bool


@dataclass(frozen=True)
class ValidationReport:
    coefficient_name: str
    checks: tuple
    constants: CertifiedConstants

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def rows(self):
        return [(c.name, c.margin, int(c.passed)) for c in self.checks]


def validate_hypothesis_h(flux: FluxSpec, diffusion: DiffusionSpec, noise: NoiseSpec,
                          value_range=(-5.0, 5.0), samples: int = 500,
                          name: str = "custom") -> ValidationReport:
    """Sample every declared inequality over value_range; margins >= 0 pass.

    A violated bound yields a failing report, never an exception.
    """
    if samples < 100:
        raise CoefficientError("need at least 100 samples")
    y = np.linspace(value_range[0], value_range[1], samples)
    checks = []

    worst = 0.0
    for i, dfn in enumerate(flux.derivatives):
        worst = max(worst, float(np.max(np.abs(dfn(y)))))
    checks.append(_check("flux_derivative_bound", flux.derivative_bound - worst))

    a = diffusion.evaluate(y)
    checks.append(_check("diffusion_lower", float(np.min(a)) - diffusion.ellipticity))
    checks.append(_check("diffusion_upper", diffusion.bound - float(np.max(a))))
    da = diffusion.evaluate_derivative(y)
    checks.append(_check("diffusion_lipschitz",
                         diffusion.lipschitz - float(np.max(np.abs(da)))))

    lip_sq = sum(l * l for l in noise.mode_lipschitz)
    checks.append(_check("noise_lipschitz_sum", noise.lipschitz_sum - lip_sq))
    sq = np.zeros_like(y)
    for fn in noise.modes:
        s = fn(y)
        sq = sq + s * s
    growth_margin = float(np.min(noise.growth * (1.0 + y * y) - sq))
    checks.append(_check("noise_growth", growth_margin))

    coeffs = CoefficientSet(name, flux, diffusion, noise)
    return ValidationReport(name, tuple(checks), coeffs.certified())


def validate_set(coeffs: CoefficientSet, value_range=(-5.0, 5.0),
                 samples: int = 500) -> ValidationReport:
    return validate_hypothesis_h(coeffs.flux, coeffs.diffusion, coeffs.noise,
                                 value_range, samples, name=coeffs.name)


def _check(name: str, margin: float) -> CheckResult:
    return CheckResult(name, float(margin), bool(margin >= 0.0))


# ---------------------------------------------------------------------------
# smoothed diffusion and noise application
# ---------------------------------------------------------------------------

def smoothed_diffusion(diffusion: DiffusionSpec, u: Field, r: float):
    """Entrywise heat smoothing of A(u); returns the d x d grid of Fields.

    The smoothing is an averaging, so the pointwise ellipticity window
    survives (up to spectral truncation at the 1e-10 level).
    """
    if r < 0:
        raise CoefficientError(f"need r >= 0, got {r}")
    grid = u.grid
    d = diffusion.dimension
    if d != grid.dimension:
        raise CoefficientError("diffusion dimension does not match the grid")
    entry = diffusion.evaluate(u.nd())
    if r > 0 and not diffusion.is_constant:
        entry = apply_multiplier(entry, heat_multiplier(grid, r), grid)
    rows = []
    zero = None
    for i in range(d):
        cols = []
        for j in range(d):
            if i == j:
                cols.append(Field(grid, entry.reshape(-1)))
            else:
                if zero is None:
                    zero = Field(grid, np.zeros(grid.size))
                cols.append(zero)
        rows.append(tuple(cols))
    return tuple(rows)


def apply_sigma(noise: NoiseSpec, u: Field, h_modes) -> Field:
    """Pointwise sum_k sigma_k(u(x)) h_k."""
    h = np.asarray(h_modes, dtype=float).reshape(-1)
    if h.size != noise.n_modes:
        raise CoefficientError(f"expected {noise.n_modes} mode weights, got {h.size}")
    out = sigma_combination(noise, u.values, h)
    return Field(u.grid, out)


def sigma_combination(noise: NoiseSpec, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Raw-array version of apply_sigma; h broadcast against leading axes of u.

    h has shape (K,) or batch_shape + (K,); u has batch_shape + spatial shape.
    """
    out = np.zeros_like(u)
    for k, fn in enumerate(noise.modes):
        hk = h[..., k]
        if np.ndim(hk) > 0:
            hk = hk.reshape(hk.shape + (1,) * (u.ndim - hk.ndim))
        if float(np.max(np.abs(hk))) == 0.0:
            continue
        out = out + fn(u) * hk
    return out


def sigma_derivative_combination(noise: NoiseSpec, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Pointwise sum_k sigma_k'(u) h_k (used by the discrete adjoint)."""
    out = np.zeros_like(u)
    if noise.state_independent:
        return out
    for k, dfn in enumerate(noise.mode_derivatives):
        hk = float(h[k])
        if hk == 0.0:
            continue
        out = out + dfn(u) * hk
    return out


# ---------------------------------------------------------------------------
# smooth approximations of |x|
# ---------------------------------------------------------------------------

def breakpoint(n: int) -> float:
    """a_n = exp(-n(n+1)/2), forced by the log-mass condition on (a_n, a_{n-1})."""
    return math.exp(-0.5 * n * (n + 1))


@dataclass(frozen=True)
class PhiFamily:
    """Smooth even convex approximation of |x| with curvature <= 2/(n|x|).

    The weight psi_n is c_n/u on the plateau [a_n(1+theta), a_{n-1}(1-theta)]
    with linear ramps vanishing strictly inside (a_n, a_{n-1}); c_n normalizes
    the total mass to one.  phi_n integrates the cumulative weight from zero,
    so phi_n(0) = phi_n'(0) = 0 and phi_n' = sign(x) once |x| >= a_{n-1}.
    """

    n: int
    theta: float = 1e-3
    # derived geometry, filled in __post_init__
    a_lo: float = field(default=0.0, compare=False)
    a_hi: float = field(default=0.0, compare=False)
    ramp_lo: float = field(default=0.0, compare=False)
    ramp_hi: float = field(default=0.0, compare=False)
    plateau_lo: float = field(default=0.0, compare=False)
    plateau_hi: float = field(default=0.0, compare=False)
    c_n: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise CoefficientError(f"need n >= 1, got {self.n}")
        a_lo, a_hi = breakpoint(self.n), breakpoint(self.n - 1)
        th = self.theta
        ramp_lo = a_lo * (1.0 + 0.5 * th)      # ramps vanish strictly inside
        plateau_lo = a_lo * (1.0 + th)
        plateau_hi = a_hi * (1.0 - th)
        ramp_hi = a_hi * (1.0 - 0.5 * th)
        mass = (math.log(plateau_hi / plateau_lo)
                + (plateau_lo - ramp_lo) / (2.0 * plateau_lo)
                + (ramp_hi - plateau_hi) / (2.0 * plateau_hi))
        c_n = 1.0 / mass
        if c_n > 2.0 / self.n:
            raise CoefficientError("normalization violates the curvature bound")
        for key, val in (("a_lo", a_lo), ("a_hi", a_hi), ("ramp_lo", ramp_lo),
                         ("ramp_hi", ramp_hi), ("plateau_lo", plateau_lo),
                         ("plateau_hi", plateau_hi), ("c_n", c_n)):
            object.__setattr__(self, key, val)

    def psi(self, u):
        """Weight function: continuous, supported in (a_n, a_{n-1})."""
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        on_lo = (u >= self.ramp_lo) & (u < self.plateau_lo)
        out[on_lo] = (self.c_n / self.plateau_lo) * (u[on_lo] - self.ramp_lo) \
            / (self.plateau_lo - self.ramp_lo)
        mid = (u >= self.plateau_lo) & (u <= self.plateau_hi)
        out[mid] = self.c_n / u[mid]
        on_hi = (u > self.plateau_hi) & (u <= self.ramp_hi)
        out[on_hi] = (self.c_n / self.plateau_hi) * (self.ramp_hi - u[on_hi]) \
            / (self.ramp_hi - self.plateau_hi)
        return out

    def psi_cumulative(self, y: float) -> float:
        """Closed-form integral of psi from 0 to y."""
        if y <= self.ramp_lo:
            return 0.0
        total = 0.0
        w_lo = self.plateau_lo - self.ramp_lo
        if y < self.plateau_lo:
            return (self.c_n / self.plateau_lo) * (y - self.ramp_lo) ** 2 / (2.0 * w_lo)
        total += 0.5 * w_lo * (self.c_n / self.plateau_lo)
        if y <= self.plateau_hi:
            return total + self.c_n * math.log(y / self.plateau_lo)
        total += self.c_n * math.log(self.plateau_hi / self.plateau_lo)
        w_hi = self.ramp_hi - self.plateau_hi
        if y < self.ramp_hi:
            peak = self.c_n / self.plateau_hi
            return total + peak * (w_hi ** 2 - (self.ramp_hi - y) ** 2) / (2.0 * w_hi)
        return 1.0

    def value(self, x: float) -> float:
        """phi_n(x): adaptive quadrature of the cumulative weight, abs tol 1e-9."""
        ax = abs(float(x))
        if ax <= self.ramp_lo:
            return 0.0
        pts = [p for p in (self.ramp_lo, self.plateau_lo, self.plateau_hi, self.ramp_hi)
               if p < ax]
        val, _ = quad(self.psi_cumulative, 0.0, ax, points=pts or None,
                      epsabs=1e-9, limit=200)
        return float(val)

    def derivative(self, x: float) -> float:
        x = float(x)
        return math.copysign(1.0, x) * self.psi_cumulative(abs(x)) if x != 0.0 else 0.0

    def second_derivative(self, x: float) -> float:
        return float(self.psi(np.array([abs(float(x))]))[0])


def phi_family(n: int, theta: float = 1e-3) -> PhiFamily:
    return PhiFamily(n=n, theta=theta)
