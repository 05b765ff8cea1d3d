"""
Phase-space data model of the Cartan-Randers system.

Every factor k of the configuration space carries an 8-block
u_k = (x^0..x^3, y^0..y^3) of positions and velocities and an 8-block p_k of
conjugate momenta. Vectors of length 8N concatenate the factor blocks in
order. All kernels accept a leading batch axis, so the same code evaluates a
single PhaseState or a whole ensemble stored as (count, 8N) arrays.
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConstraintViolationError,
    DimensionError,
    InputError,
    ProjectionUndefinedError,
)

BLOCK = 8
PHASE_BLOCK = 16
DEFAULT_SPHERE_RADIUS = 1.0

BETA_VARIANTS = ("constant", "rotational", "contraction", "sigma_contraction", "blended")
BETA_MODES = ("raw", "squashed")


def _blocks(v: np.ndarray, width: int = BLOCK) -> np.ndarray:
    return v.reshape(v.shape[:-1] + (-1, width))


def _as_float_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 0:
        raise DimensionError(f"{name} must be a vector, got a scalar")
    return arr


def _scalar_or_array(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def apply_block_matrix(matrix: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Applies an 8x8 matrix to every factor block of v.

    The product is accumulated column by column instead of through BLAS so each
    row of a batch is computed identically whatever the batch size.
    """
    vb = _blocks(v)
    out = np.zeros_like(vb)
    for j in range(BLOCK):
        out += matrix[:, j] * vb[..., j:j + 1]
    return out.reshape(v.shape)


# --- Measure -------------------------------------------------------------

def _phase_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(PHASE_BLOCK, float(arr))
    if arr.shape != (PHASE_BLOCK,):
        raise DimensionError(f"measure {name} must be a scalar or 16 entries, got shape {arr.shape}")
    return arr.copy()


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """Product Gaussian: every factor's 16-block (u_k, p_k) is N(mean, diag(sigma^2))."""
    mean: np.ndarray = field(default_factory=lambda: np.zeros(PHASE_BLOCK))
    sigma: np.ndarray = field(default_factory=lambda: np.ones(PHASE_BLOCK))
    kind: str = "product_gaussian"

    def __post_init__(self):
        mean = _phase_vector(self.mean, "mean")
        sigma = _phase_vector(self.sigma, "sigma")
        if self.kind != "product_gaussian":
            raise InputError(f"Unsupported measure kind: {self.kind}")
        if not np.all(np.isfinite(mean)):
            raise InputError("measure mean must be finite")
        if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
            raise InputError("measure sigma must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def standard(cls) -> "MeasureSpec":
        return cls()

    def with_position_mean(self, position: Sequence[float]) -> "MeasureSpec":
        mean = self.mean.copy()
        mean[0:4] = np.asarray(position, dtype=float)
        return replace(self, mean=mean)


# --- Phase state ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhaseState:
    u: np.ndarray
    p: np.ndarray
    t: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        u = _as_float_array(self.u, "u")
        p = _as_float_array(self.p, "p")
        if u.ndim != 1 or p.ndim != 1:
            raise DimensionError("PhaseState vectors must be one-dimensional")
        if u.shape != p.shape or u.size == 0 or u.size % BLOCK:
            raise DimensionError(
                f"u and p must have the same length 8N, got {u.size} and {p.size}"
            )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p))):
            raise InputError("PhaseState entries must be finite")
        if not (math.isfinite(self.t) and math.isfinite(self.tau)):
            raise InputError("PhaseState times must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n_factors(self) -> int:
        return self.u.size // BLOCK

    def vector(self) -> np.ndarray:
        """The 16N phase vector (u, p)."""
        return np.concatenate([self.u, self.p])

    def evolve(self, **changes) -> "PhaseState":
        return replace(self, **changes)


# --- beta field catalog --------------------------------------------------

@dataclass(frozen=True)
class WeightSchedule:
    """Time-dependent blend weight: constant, ramp in t, or cosine in tau."""
    kind: str = "constant"
    value: float = 1.0
    slope: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "ramp", "cosine"):
            raise InputError(f"Unknown weight schedule kind: {self.kind}")

    def __call__(self, t: float, tau: float) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "ramp":
            return self.value + self.slope * t
        return self.value + self.amplitude * math.cos(self.omega * tau + self.phase)


@dataclass(frozen=True, eq=False)
class BetaFieldSpec:
    variant: str
    mode: str = "squashed"
    c: Optional[np.ndarray] = None
    generator: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None
    rate: float = 0.0
    tube_radius: float = 0.0
    sphere_radius: float = DEFAULT_SPHERE_RADIUS
    components: Tuple[Tuple[WeightSchedule, "BetaFieldSpec"], ...] = ()

    def __post_init__(self):
        if self.variant not in BETA_VARIANTS:
            raise InputError(f"Unknown beta variant '{self.variant}', expected one of {BETA_VARIANTS}")
        if self.mode not in BETA_MODES:
            raise InputError(f"Unknown beta mode '{self.mode}', expected one of {BETA_MODES}")
        if self.variant == "constant":
            if self.c is None:
                raise InputError("constant beta requires 'c'")
            object.__setattr__(self, "c", _as_float_array(self.c, "c"))
        elif self.variant == "rotational":
            gen = np.array(self.generator, dtype=float)
            if gen.shape != (BLOCK, BLOCK):
                raise DimensionError(f"rotational generator must be 8x8, got {gen.shape}")
            scale = max(1.0, float(np.max(np.abs(gen))))
            if np.max(np.abs(gen + gen.T)) > 1e-12 * scale:
                raise InputError("rotational generator must be antisymmetric")
            object.__setattr__(self, "generator", gen)
        elif self.variant in ("contraction", "sigma_contraction"):
            if not self.rate > 0:
                raise InputError(f"{self.variant} beta requires a positive rate")
            if self.variant == "contraction" and self.anchor is not None:
                object.__setattr__(self, "anchor", _as_float_array(self.anchor, "anchor"))
            if self.variant == "sigma_contraction":
                if not self.tube_radius > 0:
                    raise InputError("sigma_contraction beta requires a positive tube_radius")
                if not self.sphere_radius > 0:
                    raise InputError("sphere_radius must be positive")
        elif self.variant == "blended":
            if not self.components:
                raise InputError("blended beta requires at least one component")
            object.__setattr__(self, "components", tuple(
                (weight, sub) for weight, sub in self.components
            ))

    @classmethod
    def constant(cls, c, mode: str = "squashed") -> "BetaFieldSpec":
        return cls(variant="constant", mode=mode, c=c)

    @classmethod
    def rotational(cls, generator, mode: str = "squashed") -> "BetaFieldSpec":
        return cls(variant="rotational", mode=mode, generator=generator)

    @classmethod
    def contraction(cls, rate: float, anchor=None, mode: str = "squashed") -> "BetaFieldSpec":
        return cls(variant="contraction", mode=mode, rate=rate, anchor=anchor)

    @classmethod
    def sigma_contraction(cls, rate: float, tube_radius: float, mode: str = "squashed",
                          sphere_radius: float = DEFAULT_SPHERE_RADIUS) -> "BetaFieldSpec":
        return cls(variant="sigma_contraction", mode=mode, rate=rate,
                   tube_radius=tube_radius, sphere_radius=sphere_radius)

    @classmethod
    def blended(cls, components, mode: str = "squashed") -> "BetaFieldSpec":
        return cls(variant="blended", mode=mode, components=tuple(components))

    def check_dimension(self, dim: int):
        if self.variant == "constant" and self.c.size != dim:
            raise DimensionError(f"constant beta has length {self.c.size}, expected {dim}")
        if self.variant == "contraction" and self.anchor is not None and self.anchor.size != dim:
            raise DimensionError(f"contraction anchor has length {self.anchor.size}, expected {dim}")
        for _, sub in self.components:
            sub.check_dimension(dim)


# --- Regime schedule -----------------------------------------------------

class Regime(str, Enum):
    ERGODIC = "ergodic"
    CONCENTRATION = "concentration"
    EXPANSION = "expansion"


@dataclass(frozen=True)
class Cycle:
    ergodic: float = 0.0
    concentration: float = 0.0
    expansion: float = 0.0

    def __post_init__(self):
        for name in ("ergodic", "concentration", "expansion"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise InputError(f"cycle duration '{name}' must be a nonnegative real")

    @property
    def total(self) -> float:
        return self.ergodic + self.concentration + self.expansion


@dataclass(frozen=True, eq=False)
class RegimeSchedule:
    cycles: Tuple[Cycle, ...] = ()
    concentration_rate: float = 1.0
    expansion_rate: float = 1.0
    shear_strength: float = 0.5
    rotation_rate: float = 1.0
    target: str = "anchor"
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if self.target not in ("anchor", "sigma"):
            raise InputError(f"concentration target must be 'anchor' or 'sigma', got '{self.target}'")
        if self.concentration_rate < 0 or self.expansion_rate < 0:
            raise InputError("regime rates must be nonnegative")
        if self.anchor is not None:
            object.__setattr__(self, "anchor", _as_float_array(self.anchor, "anchor"))

    @property
    def total_duration(self) -> float:
        return math.fsum(c.total for c in self.cycles)

    @property
    def is_identity(self) -> bool:
        return self.total_duration == 0.0

    def segments(self) -> List[Tuple[Regime, float, float]]:
        """(regime, start, end) for every nonzero-duration phase, in schedule order."""
        out = []
        start = 0.0
        for cycle in self.cycles:
            for regime, duration in (
                (Regime.ERGODIC, cycle.ergodic),
                (Regime.CONCENTRATION, cycle.concentration),
                (Regime.EXPANSION, cycle.expansion),
            ):
                if duration > 0:
                    out.append((regime, start, start + duration))
                    start += duration
        return out

    def regime_at(self, t: float) -> Optional[Tuple[Regime, float]]:
        """Regime active at internal time t and the end of its segment, None past the end."""
        for regime, start, end in self.segments():
            tol = 1e-12 * max(1.0, abs(end))
            if start - tol <= t < end - tol:
                return regime, end
        return None


# --- Model ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    n_factors: int
    beta_spec: BetaFieldSpec
    schedule: RegimeSchedule
    measure: MeasureSpec = field(default_factory=MeasureSpec)
    eta_weights: np.ndarray = field(default_factory=lambda: np.ones(PHASE_BLOCK))
    seed: int = 0
    t_horizon: float = 1.0
    length_scale: float = 1.0
    sphere_radius: float = DEFAULT_SPHERE_RADIUS

    def __post_init__(self):
        if isinstance(self.n_factors, bool) or int(self.n_factors) != self.n_factors or self.n_factors < 1:
            raise InputError("n_factors must be a positive integer")
        object.__setattr__(self, "n_factors", int(self.n_factors))
        weights = _as_float_array(self.eta_weights, "eta_weights")
        if weights.shape != (PHASE_BLOCK,):
            raise DimensionError(f"eta_weights must have 16 entries, got {weights.size}")
        if not np.all(weights > 0):
            raise InputError("eta_weights must be positive")
        object.__setattr__(self, "eta_weights", weights)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")
        if not (self.t_horizon > 0 and math.isfinite(self.t_horizon)):
            raise InputError("t_horizon must be positive")
        if not self.length_scale > 0:
            raise InputError("length_scale must be positive")
        if not self.sphere_radius > 0:
            raise InputError("sphere_radius must be positive")
        total = self.schedule.total_duration
        if total > 0 and abs(total - self.t_horizon) > 1e-9 * max(1.0, self.t_horizon):
            raise InputError(
                f"schedule duration {total!r} does not match t_horizon {self.t_horizon!r}"
            )
        if self.schedule.anchor is not None and self.schedule.anchor.size != self.dim:
            raise DimensionError(f"schedule anchor must have length {self.dim}")
        self.beta_spec.check_dimension(self.dim)

    @property
    def dim(self) -> int:
        return BLOCK * self.n_factors

    @property
    def anchor(self) -> np.ndarray:
        if self.schedule.anchor is None:
            return np.zeros(self.dim)
        return self.schedule.anchor

    def evolve(self, **changes) -> "ModelSpec":
        return replace(self, **changes)


# --- Operations ----------------------------------------------------------

def eta_norm(eta_weights, v, block: int = BLOCK):
    """Weighted Euclidean norm sqrt(sum_k sum_i w[i] v[k, i]^2).

    block=8 measures configuration vectors (beta, u) with weights[:8];
    block=16 measures phase vectors (u_k, p_k) with all 16 weights.
    """
    weights = np.asarray(eta_weights, dtype=float)
    if weights.shape != (PHASE_BLOCK,):
        raise DimensionError(f"eta_weights must have 16 entries, got {weights.size}")
    if block not in (BLOCK, PHASE_BLOCK):
        raise DimensionError("block must be 8 or 16")
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[-1] == 0 or v.shape[-1] % block:
        raise DimensionError(f"vector length must be a positive multiple of {block}")
    squares = (_blocks(v, block) ** 2 * weights[:block]).sum(axis=-1).sum(axis=-1)
    return _scalar_or_array(np.sqrt(squares))


def project_to_sigma(u, sphere_radius: float = DEFAULT_SPHERE_RADIUS) -> np.ndarray:
    """Per factor: velocity block onto the unit hyperboloid, position block onto the 3-sphere."""
    if not sphere_radius > 0:
        raise InputError("sphere_radius must be positive")
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] % BLOCK:
        raise DimensionError("u must have length 8N")
    if not np.all(np.isfinite(u)):
        raise InputError("cannot project a non-finite configuration")
    ub = _blocks(u).copy()
    x = ub[..., 0:4]
    radii = np.sqrt((x ** 2).sum(axis=-1))
    if np.any(radii == 0):
        raise ProjectionUndefinedError("position block is zero; sphere projection undefined")
    ub[..., 0:4] = x * (sphere_radius / radii)[..., None]
    ub[..., 4] = np.sqrt(1.0 + (ub[..., 5:8] ** 2).sum(axis=-1))
    return ub.reshape(u.shape)


def _sigma_vjp(u: np.ndarray, q: np.ndarray, sphere_radius: float) -> np.ndarray:
    """q^T D(project_to_sigma)(u), factor by factor."""
    ub, qb = _blocks(u), _blocks(q)
    out = np.zeros_like(qb)
    x = ub[..., 0:4]
    radii = np.sqrt((x ** 2).sum(axis=-1))
    if np.any(radii == 0):
        raise ProjectionUndefinedError("position block is zero; sphere projection undefined")
    unit = x / radii[..., None]
    qx = qb[..., 0:4]
    radial = (unit * qx).sum(axis=-1)
    out[..., 0:4] = (sphere_radius / radii)[..., None] * (qx - unit * radial[..., None])
    y = ub[..., 5:8]
    y0 = np.sqrt(1.0 + (y ** 2).sum(axis=-1))
    out[..., 5:8] = qb[..., 5:8] + qb[..., 4:5] * y / y0[..., None]
    return out.reshape(q.shape)


def _sigma_jacobian_block(block: np.ndarray, sphere_radius: float) -> np.ndarray:
    x, y = block[0:4], block[5:8]
    radius = float(np.sqrt(x @ x))
    if radius == 0:
        raise ProjectionUndefinedError("position block is zero; sphere projection undefined")
    unit = x / radius
    jac = np.zeros((BLOCK, BLOCK))
    jac[0:4, 0:4] = (sphere_radius / radius) * (np.eye(4) - np.outer(unit, unit))
    jac[4, 5:8] = y / np.sqrt(1.0 + y @ y)
    jac[5:8, 5:8] = np.eye(3)
    return jac


def _raw_field(spec: BetaFieldSpec, t: float, tau: float, u: np.ndarray) -> np.ndarray:
    if spec.variant == "constant":
        if spec.c.size != u.shape[-1]:
            raise DimensionError(f"constant beta has length {spec.c.size}, state has {u.shape[-1]}")
        return np.broadcast_to(spec.c, u.shape).copy()
    if spec.variant == "rotational":
        return apply_block_matrix(spec.generator, u)
    if spec.variant == "contraction":
        anchor = 0.0 if spec.anchor is None else spec.anchor
        if spec.anchor is not None and spec.anchor.size != u.shape[-1]:
            raise DimensionError("contraction anchor length does not match the state")
        return -spec.rate * (u - anchor)
    if spec.variant == "sigma_contraction":
        return -spec.rate * (u - project_to_sigma(u, spec.sphere_radius))
    total = np.zeros_like(u)
    for weight, sub in spec.components:
        total += weight(t, tau) * _raw_field(sub, t, tau, u)
    return total


def _raw_vjp(spec: BetaFieldSpec, t: float, tau: float, u: np.ndarray, q: np.ndarray) -> np.ndarray:
    if spec.variant == "constant":
        return np.zeros_like(q)
    if spec.variant == "rotational":
        return apply_block_matrix(spec.generator.T, q)
    if spec.variant == "contraction":
        return -spec.rate * q
    if spec.variant == "sigma_contraction":
        return -spec.rate * (q - _sigma_vjp(u, q, spec.sphere_radius))
    total = np.zeros_like(q)
    for weight, sub in spec.components:
        total += weight(t, tau) * _raw_vjp(sub, t, tau, u, q)
    return total


def _raw_jacobian(spec: BetaFieldSpec, t: float, tau: float, u: np.ndarray) -> np.ndarray:
    dim = u.size
    n = dim // BLOCK
    if spec.variant == "constant":
        return np.zeros((dim, dim))
    if spec.variant == "rotational":
        return np.kron(np.eye(n), spec.generator)
    if spec.variant == "contraction":
        return -spec.rate * np.eye(dim)
    if spec.variant == "sigma_contraction":
        proj = np.zeros((dim, dim))
        for k in range(n):
            sl = slice(BLOCK * k, BLOCK * (k + 1))
            proj[sl, sl] = _sigma_jacobian_block(u[sl], spec.sphere_radius)
        return -spec.rate * (np.eye(dim) - proj)
    total = np.zeros((dim, dim))
    for weight, sub in spec.components:
        total += weight(t, tau) * _raw_jacobian(sub, t, tau, u)
    return total


def _squash_factors(norms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """s(n) = tanh(n)/n and s'(n)/n, with their series near n = 0."""
    n = np.asarray(norms, dtype=float)
    small = n < 1e-2
    safe = np.where(small, 1.0, n)
    th = np.tanh(safe)
    s = np.where(small, 1.0 - n ** 2 / 3.0 + 2.0 * n ** 4 / 15.0, th / safe)
    ds_over_n = np.where(
        small,
        -2.0 / 3.0 + 8.0 * n ** 2 / 15.0 - 34.0 * n ** 4 / 105.0,
        (safe * (1.0 - th ** 2) - th) / safe ** 3,
    )
    return s, ds_over_n


def _check_state(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] == 0 or u.shape[-1] % BLOCK:
        raise DimensionError("u must have length 8N")
    if not np.all(np.isfinite(u)):
        raise InputError("beta evaluation requires a finite configuration")
    return u


def evaluate_beta(spec: BetaFieldSpec, t: float, tau: float, u, eta_weights) -> np.ndarray:
    """beta(t, tau, u); squashed mode maps b -> b tanh(||b||)/||b||, raw mode enforces ||b|| < 1."""
    u = _check_state(u)
    raw = _raw_field(spec, t, tau, u)
    norms = np.asarray(eta_norm(eta_weights, raw))
    if spec.mode == "raw":
        if np.any(norms >= 1.0):
            raise ConstraintViolationError(float(np.max(norms)))
        return raw
    s, _ = _squash_factors(norms)
    return raw * s[..., None]


def beta_vjp(spec: BetaFieldSpec, t: float, tau: float, u, q, eta_weights) -> np.ndarray:
    """sum_k q_k d(beta^k)/d(u^i): the term driving dp/dtau = -J^T p."""
    u = _check_state(u)
    q = np.asarray(q, dtype=float)
    if q.shape != u.shape:
        raise DimensionError("covector and state shapes differ")
    if spec.mode == "squashed":
        raw = _raw_field(spec, t, tau, u)
        norms = np.asarray(eta_norm(eta_weights, raw))
        s, ds_over_n = _squash_factors(norms)
        weights = np.tile(np.asarray(eta_weights, dtype=float)[:BLOCK], u.shape[-1] // BLOCK)
        along = (raw * q).sum(axis=-1)
        q = s[..., None] * q + (ds_over_n * along)[..., None] * (weights * raw)
    return _raw_vjp(spec, t, tau, u, q)


def beta_jacobian(spec: BetaFieldSpec, t: float, tau: float, u, eta_weights) -> np.ndarray:
    """Dense analytic Jacobian d(beta^k)/d(u^i) at a single configuration."""
    u = _check_state(u)
    if u.ndim != 1:
        raise DimensionError("beta_jacobian takes a single configuration")
    jac = _raw_jacobian(spec, t, tau, u)
    if spec.mode == "raw":
        return jac
    raw = _raw_field(spec, t, tau, u)
    s, ds_over_n = _squash_factors(np.asarray(eta_norm(eta_weights, raw)))
    weights = np.tile(np.asarray(eta_weights, dtype=float)[:BLOCK], u.size // BLOCK)
    dsquash = float(s) * np.eye(u.size) + float(ds_over_n) * np.outer(raw, weights * raw)
    return dsquash @ jac


def randers_hamiltonian(u, p, beta):
    """H = sum_n beta^n p_n."""
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not (u.shape == p.shape == beta.shape):
        raise DimensionError(f"shape mismatch: u {u.shape}, p {p.shape}, beta {beta.shape}")
    return _scalar_or_array((beta * p).sum(axis=-1))
