"""
Diagonal observables, product-measure ensembles and Monte Carlo expectations.

A diagonal observable evaluates one base function on every factor's 16-block
(u_k, p_k) and aggregates the N values; ensembles hold their members as
(count, 8N) arrays sharing one (t, tau).
"""
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import BLOCK, PHASE_BLOCK, DEFAULT_SPHERE_RADIUS, MeasureSpec, PhaseState
from .errors import DimensionError, InputError
from .streams import standard_normals

BASE_KINDS = ("coordinate", "sigma_distance", "bump", "affine")
AGGREGATORS = ("mean", "sum_over_sqrtN", "single_factor")

# typical radius of a standard 16-block; narrower bumps vanish on most samples
DEFAULT_BUMP_WIDTH = 4.0
_VERIFY_SEED = 0x5EED
_VERIFY_PAIRS = 256


@dataclass(frozen=True, eq=False)
class BaseFunction:
    """A 1-Lipschitz function of one factor's 16-block."""
    kind: str
    index: int = 0
    sphere_radius: float = DEFAULT_SPHERE_RADIUS
    center: Optional[np.ndarray] = None
    width: float = DEFAULT_BUMP_WIDTH
    weights: Optional[np.ndarray] = None
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise InputError(f"Unknown base function '{self.kind}', expected one of {BASE_KINDS}")
        if self.kind == "coordinate" and not 0 <= self.index < PHASE_BLOCK:
            raise DimensionError(f"coordinate index must be in 0..15, got {self.index}")
        if self.kind == "sigma_distance" and not self.sphere_radius > 0:
            raise InputError("sphere_radius must be positive")
        if self.kind == "bump":
            center = np.zeros(PHASE_BLOCK) if self.center is None else np.asarray(self.center, dtype=float)
            if center.shape != (PHASE_BLOCK,):
                raise DimensionError("bump center must have 16 entries")
            if not self.width > 0:
                raise InputError("bump width must be positive")
            object.__setattr__(self, "center", center)
        if self.kind == "affine":
            weights = np.zeros(PHASE_BLOCK) if self.weights is None else np.asarray(self.weights, dtype=float)
            if weights.shape != (PHASE_BLOCK,):
                raise DimensionError("affine weights must have 16 entries")
            if np.sqrt(weights @ weights) > 1.0 + 1e-12:
                raise InputError("affine weights must satisfy |w| <= 1")
            object.__setattr__(self, "weights", weights)

    @classmethod
    def coordinate(cls, index: int) -> "BaseFunction":
        return cls(kind="coordinate", index=index)

    @classmethod
    def sigma_distance(cls, sphere_radius: float = DEFAULT_SPHERE_RADIUS) -> "BaseFunction":
        return cls(kind="sigma_distance", sphere_radius=sphere_radius)

    @classmethod
    def bump(cls, center=None, width: float = DEFAULT_BUMP_WIDTH) -> "BaseFunction":
        return cls(kind="bump", center=center, width=width)

    @classmethod
    def affine(cls, weights, offset: float = 0.0) -> "BaseFunction":
        return cls(kind="affine", weights=weights, offset=offset)

    @property
    def lipschitz(self) -> float:
        return 1.0

    @property
    def name(self) -> str:
        if self.kind == "coordinate":
            return f"coordinate[{self.index}]"
        return self.kind

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluates on (..., 16) blocks."""
        if self.kind == "coordinate":
            return z[..., self.index].copy()
        if self.kind == "sigma_distance":
            # hyperboloid residual of the velocity block and radial residual of the position block
            y = z[..., 4:8]
            shell = y[..., 0] - np.sqrt(1.0 + (y[..., 1:4] ** 2).sum(axis=-1))
            radial = np.sqrt((z[..., 0:4] ** 2).sum(axis=-1)) - self.sphere_radius
            return np.sqrt((shell ** 2 + radial ** 2) / 2.0)
        if self.kind == "bump":
            d2 = ((z - self.center) ** 2).sum(axis=-1)
            return self.width * np.exp(-d2 / (2.0 * self.width ** 2))
        return (z * self.weights).sum(axis=-1) + self.offset


def verify_base_lipschitz(base: BaseFunction, pairs: int = _VERIFY_PAIRS) -> float:
    """Sampled Lipschitz ratio of a base function; raises if it exceeds its constant."""
    draws = standard_normals(_VERIFY_SEED, 0, 2 * pairs, 1).reshape(pairs, 2, PHASE_BLOCK)
    # spread the samples over several scales so both local and global slopes are sampled
    scales = np.geomspace(1e-3, 10.0, pairs)[:, None]
    x = draws[:, 0] * 2.0
    y = x + draws[:, 1] * scales
    ratios = np.abs(base(x) - base(y)) / np.sqrt(((x - y) ** 2).sum(axis=-1))
    worst = float(np.max(ratios))
    if worst > base.lipschitz * (1.0 + 1e-9):
        raise InputError(f"base function {base.name} is not {base.lipschitz}-Lipschitz (ratio {worst})")
    return worst


@dataclass(frozen=True, eq=False)
class DiagonalObservable:
    base: BaseFunction
    aggregator: str = "mean"
    factor: int = 0

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise InputError(f"Unknown aggregator '{self.aggregator}', expected one of {AGGREGATORS}")
        if self.factor < 0:
            raise DimensionError("factor index must be nonnegative")
        verify_base_lipschitz(self.base)

    def claimed_lipschitz(self, n_factors: int) -> float:
        if self.aggregator == "mean":
            return self.base.lipschitz / math.sqrt(n_factors)
        return self.base.lipschitz

    @property
    def name(self) -> str:
        if self.aggregator == "single_factor":
            return f"{self.base.name}@factor{self.factor}"
        return f"{self.aggregator}({self.base.name})"

    def values(self, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Lifted values over a batch of phase points."""
        u = np.asarray(u, dtype=float)
        p = np.asarray(p, dtype=float)
        if u.shape != p.shape or u.shape[-1] % BLOCK:
            raise DimensionError("u and p must share a length-8N last axis")
        n = u.shape[-1] // BLOCK
        z = np.concatenate(
            [u.reshape(u.shape[:-1] + (n, BLOCK)), p.reshape(p.shape[:-1] + (n, BLOCK))], axis=-1
        )
        per_factor = self.base(z)
        if self.aggregator == "mean":
            return per_factor.sum(axis=-1) / n
        if self.aggregator == "sum_over_sqrtN":
            return per_factor.sum(axis=-1) / math.sqrt(n)
        if self.factor >= n:
            raise DimensionError(f"factor index {self.factor} out of range for N = {n}")
        return per_factor[..., self.factor].copy()


@dataclass(frozen=True, eq=False)
class Ensemble:
    u: np.ndarray
    p: np.ndarray
    measure: MeasureSpec
    seed: int = 0
    t: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if u.ndim != 2 or u.shape != p.shape or u.shape[0] < 1 or u.shape[1] % BLOCK:
            raise DimensionError("ensemble arrays must both have shape (count, 8N)")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_states(cls, states: Sequence[PhaseState], measure: MeasureSpec, seed: int = 0) -> "Ensemble":
        if not states:
            raise InputError("an ensemble needs at least one member")
        first = states[0]
        for state in states:
            if state.t != first.t or state.tau != first.tau or state.u.size != first.u.size:
                raise InputError("ensemble members must share (t, tau) and dimension")
        return cls(
            u=np.stack([s.u for s in states]), p=np.stack([s.p for s in states]),
            measure=measure, seed=seed, t=first.t, tau=first.tau,
        )

    def __len__(self) -> int:
        return self.u.shape[0]

    @property
    def count(self) -> int:
        return self.u.shape[0]

    @property
    def n_factors(self) -> int:
        return self.u.shape[1] // BLOCK

    def member(self, i: int) -> PhaseState:
        return PhaseState(u=self.u[i].copy(), p=self.p[i].copy(), t=self.t, tau=self.tau)

    @property
    def members(self) -> List[PhaseState]:
        return [self.member(i) for i in range(self.count)]

    def evolve(self, **changes) -> "Ensemble":
        return replace(self, **changes)


def sample_members(measure: MeasureSpec, n_factors: int, start: int, stop: int,
                   seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(u, p) arrays of members start..stop-1 drawn from the product measure."""
    z = measure.mean + measure.sigma * standard_normals(seed, start, stop, n_factors, PHASE_BLOCK)
    rows = stop - start
    u = np.ascontiguousarray(z[..., :BLOCK]).reshape(rows, BLOCK * n_factors)
    p = np.ascontiguousarray(z[..., BLOCK:]).reshape(rows, BLOCK * n_factors)
    return u, p


def sample_ensemble(measure: MeasureSpec, n_factors: int, count: int, seed: int) -> Ensemble:
    if count < 1:
        raise InputError("count must be at least 1")
    if n_factors < 1:
        raise InputError("n_factors must be at least 1")
    u, p = sample_members(measure, n_factors, 0, count, seed)
    return Ensemble(u=u, p=p, measure=measure, seed=seed)


def lift_diagonal(obs: DiagonalObservable, state: PhaseState) -> float:
    return float(obs.values(state.u, state.p))


def summarize(values: np.ndarray) -> Tuple[float, Optional[float]]:
    """Sample mean and its standard error; the error is None for a single value."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InputError("cannot summarize an empty sample")
    if np.all(values == values[0]):
        return float(values[0]), (None if values.size == 1 else 0.0)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def expectation(obs: DiagonalObservable, ensemble: Ensemble) -> Tuple[float, Optional[float]]:
    return summarize(obs.values(ensemble.u, ensemble.p))


def permute_factors(state: PhaseState, permutation: Sequence[int]) -> PhaseState:
    n = state.n_factors
    perm = np.asarray(permutation, dtype=int)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InputError("permutation must be a bijection on the factor indices")
    u = state.u.reshape(n, BLOCK)[perm].reshape(-1)
    p = state.p.reshape(n, BLOCK)[perm].reshape(-1)
    return state.evolve(u=u, p=p)


def well_definedness_check(obs: DiagonalObservable, state: PhaseState, permutation: Sequence[int]) -> bool:
    """Whether the lifted value is invariant under relabelling the factors."""
    before = lift_diagonal(obs, state)
    after = lift_diagonal(obs, permute_factors(state, permutation))
    return abs(after - before) <= 1e-12 * max(1.0, abs(before))
