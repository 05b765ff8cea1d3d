"""
Free fall of subsystems: observable coordinates against a system-independent
center-of-mass reference.

Factor indices are 0-based; mu runs over 1..4 and selects position
coordinate x^(mu-1) of each factor.
"""
import math
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from .concentration import fit_tail_exponent, scaled_bound_log
from .core import BLOCK, ModelSpec, PhaseState
from .errors import DimensionError, FitDegenerateError, InputError
from .flows import advance_segment, integrate_ensemble_utau, schedule_steps, step_grid
from .observables import Ensemble, sample_members
from .parallel import chunk_rows, map_chunks

SYSTEM_NAMES = ("A", "B", "S")
H_KINDS = ("constant", "sinusoidal", "piecewise")
EPS_FLOOR = 1e-30
AGREEMENT_SIGMAS = 5.0
COM_MAX_STEP = 1e-2


@dataclass(frozen=True)
class SubsystemSpec:
    name: str
    factor_indices: Tuple[int, ...]

    def __post_init__(self):
        if self.name not in SYSTEM_NAMES:
            raise InputError(f"system name must be one of {SYSTEM_NAMES}, got '{self.name}'")
        object.__setattr__(self, "factor_indices", tuple(int(i) for i in self.factor_indices))
        if len(set(self.factor_indices)) != len(self.factor_indices):
            raise InputError(f"system {self.name} lists a factor twice")

    def __len__(self) -> int:
        return len(self.factor_indices)


def partition_systems(n_factors: int, n_a: int, n_b: int) -> Tuple[SubsystemSpec, SubsystemSpec, SubsystemSpec]:
    """A = the first n_a factors, B = the remaining n_b, S = all of them."""
    if n_a < 1 or n_b < 1:
        raise InputError("both subsystems need at least one factor")
    if n_a + n_b != n_factors:
        raise InputError(f"n_a + n_b = {n_a + n_b} does not match n_factors = {n_factors}")
    return (
        SubsystemSpec("A", tuple(range(n_a))),
        SubsystemSpec("B", tuple(range(n_a, n_factors))),
        SubsystemSpec("S", tuple(range(n_factors))),
    )


def _position_column(mu: int) -> int:
    if isinstance(mu, bool) or not 1 <= mu <= 4:
        raise InputError(f"mu must be in 1..4, got {mu!r}")
    return mu - 1


def system_coordinates(u: np.ndarray, system: SubsystemSpec) -> np.ndarray:
    """Mean position block of the system's factors, shape (..., 4)."""
    if len(system) == 0:
        raise InputError(f"system {system.name} is empty")
    n = u.shape[-1] // BLOCK
    if max(system.factor_indices) >= n or min(system.factor_indices) < 0:
        raise DimensionError(f"system {system.name} indexes past N = {n}")
    blocks = u.reshape(u.shape[:-1] + (n, BLOCK))[..., list(system.factor_indices), 0:4]
    return blocks.sum(axis=-2) / len(system)


def observable_coordinate(state: PhaseState, system: SubsystemSpec, mu: int) -> float:
    column = _position_column(mu)
    return float(system_coordinates(state.u, system)[column])


# --- Center-of-mass reference -------------------------------------------

@dataclass(frozen=True, eq=False)
class HSpec:
    """Drift h(tau) of the center-of-mass ODE dM/dtau = h(tau)."""
    kind: str = "constant"
    value: np.ndarray = None
    amplitude: np.ndarray = None
    omega: float = 1.0
    phase: float = 0.0
    breakpoints: Tuple[float, ...] = ()
    values: np.ndarray = None

    def __post_init__(self):
        if self.kind not in H_KINDS:
            raise InputError(f"Unknown h kind '{self.kind}', expected one of {H_KINDS}")
        for name in ("value", "amplitude"):
            raw = getattr(self, name)
            vec = np.zeros(4) if raw is None else np.asarray(raw, dtype=float)
            if vec.shape != (4,):
                raise DimensionError(f"h {name} must have 4 entries")
            object.__setattr__(self, name, vec)
        breakpoints = tuple(float(b) for b in self.breakpoints)
        if any(b1 <= b0 for b0, b1 in zip(breakpoints, breakpoints[1:])):
            raise InputError("h breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", breakpoints)
        if self.kind == "piecewise":
            values = np.asarray(self.values, dtype=float)
            if values.shape != (len(breakpoints) + 1, 4):
                raise DimensionError("piecewise h needs len(breakpoints) + 1 rows of 4 values")
            object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value) -> "HSpec":
        return cls(kind="constant", value=value)

    @classmethod
    def sinusoidal(cls, amplitude, omega: float = 1.0, phase: float = 0.0) -> "HSpec":
        return cls(kind="sinusoidal", amplitude=amplitude, omega=omega, phase=phase)

    @classmethod
    def piecewise(cls, breakpoints: Sequence[float], values) -> "HSpec":
        return cls(kind="piecewise", breakpoints=tuple(breakpoints), values=values)

    def __call__(self, tau: float) -> np.ndarray:
        if self.kind == "constant":
            return self.value
        if self.kind == "sinusoidal":
            return self.amplitude * math.sin(self.omega * tau + self.phase)
        return self.values[int(np.searchsorted(self.breakpoints, tau, side="right"))]


def _check_tau_grid(tau_grid) -> np.ndarray:
    grid = np.asarray(tau_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InputError("tau_grid must be a non-empty one-dimensional grid")
    if np.any(np.diff(grid) <= 0):
        raise InputError("tau_grid must be strictly increasing")
    return grid


def _interval_nodes(a: float, b: float, breakpoints: Tuple[float, ...]) -> np.ndarray:
    # h is smooth between breakpoints, so RK4 steps never straddle one
    inner = [x for x in breakpoints if a < x < b]
    edges = [a, *inner, b]
    nodes = [a]
    for lo, hi in zip(edges[:-1], edges[1:]):
        nodes.extend(step_grid(lo, hi, COM_MAX_STEP)[1:])
    return np.asarray(nodes)


def _rk4_drift(h: HSpec, lo: float, hi: float) -> np.ndarray:
    step = hi - lo
    if h.kind == "piecewise":
        # the node may sit on a breakpoint; sample the interval interior
        k = h(0.5 * (lo + hi))
        return step * k
    mid = h(lo + step / 2.0)
    return step / 6.0 * (h(lo) + 4.0 * mid + h(hi))


def com_trajectory(m0, h_spec: HSpec, tau_grid) -> np.ndarray:
    """RK4 solution of dM/dtau = h(tau), M(tau_grid[0]) = m0, shape (len(tau_grid), 4)."""
    m0 = np.asarray(m0, dtype=float)
    if m0.shape != (4,):
        raise DimensionError("m0 must have 4 entries")
    grid = _check_tau_grid(tau_grid)
    out = np.empty((grid.size, 4))
    out[0] = m0
    m = m0.copy()
    for i, (a, b) in enumerate(zip(grid[:-1], grid[1:]), start=1):
        nodes = _interval_nodes(a, b, h_spec.breakpoints)
        for lo, hi in zip(nodes[:-1], nodes[1:]):
            m = m + _rk4_drift(h_spec, lo, hi)
        out[i] = m
    return out


# --- Experiment ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WepReport:
    tau_grid: np.ndarray
    com_reference: np.ndarray
    systems: Tuple[SubsystemSpec, ...]
    x_mean: np.ndarray
    x_std: np.ndarray
    x_stderr: np.ndarray
    diff_stderr: np.ndarray
    eotvos: float
    eotvos_stderr: float
    tail_prefactor: float
    tail_exponent: float
    scaled_bound_log: float
    count: int
    verdict: bool


def eotvos_ratio(mean_a: np.ndarray, mean_b: np.ndarray, diff_stderr: np.ndarray) -> Tuple[float, float]:
    """2|A - B| / (|A| + |B|) at its arg-max over (tau, mu), with its standard error."""
    denom = np.abs(mean_a) + np.abs(mean_b) + EPS_FLOOR
    ratios = 2.0 * np.abs(mean_a - mean_b) / denom
    peak = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    return float(ratios[peak]), float(2.0 * diff_stderr[peak] / denom[peak])


def _deviation_tail(values: np.ndarray, length_scale: float) -> Tuple[float, float]:
    """C1, C2 of P(|X - mean| > rho) ~ C1 exp(-C2 rho^2 / (2 L^2)), pooled over mu."""
    deviations = np.abs(values - values.mean(axis=0)).reshape(-1)
    sigma = float(np.std(values, axis=0, ddof=1).mean())
    if not sigma > 0:
        return math.nan, math.nan
    grid = np.linspace(0.0, 4.0 * sigma, 41)[1:]
    sorted_dev = np.sort(deviations)
    tail = (sorted_dev.size - np.searchsorted(sorted_dev, grid, side="right")) / sorted_dev.size
    try:
        fit = fit_tail_exponent(grid, tail)
    except FitDegenerateError:
        return math.nan, math.nan
    return math.exp(fit.intercept), 2.0 * length_scale ** 2 * fit.exponent


def wep_experiment(spec: ModelSpec, n_a: int, n_b: int, h_spec: HSpec, tau_grid, count: int,
                   dt: float = 0.01, dtau: float = 0.01, threads: int = 1) -> WepReport:
    """A and B fall freely from identical conditions; their observable coordinates are compared per tau.

    The ensemble is drawn at the measure's position mean, taken through U_t
    with the concentration anchor moved to that mean, then integrated in tau
    under the model field while every position is carried along M(tau) - M(tau_0).
    """
    if count < 2:
        raise InputError("count must be at least 2")
    systems = partition_systems(spec.n_factors, n_a, n_b)
    grid = _check_tau_grid(tau_grid)
    m0 = spec.measure.mean[0:4].copy()
    reference = com_trajectory(m0, h_spec, grid)

    anchor = np.tile(spec.measure.mean[:BLOCK], spec.n_factors)
    model = spec.evolve(schedule=replace(spec.schedule, anchor=anchor))
    steps = schedule_steps(model.schedule, dt)
    t_end = steps[-1][2] if steps else 0.0

    def run(start: int, stop: int) -> np.ndarray:
        u, p = sample_members(model.measure, model.n_factors, start, stop, model.seed)
        for regime, _, _, segment in steps:
            u, p = advance_segment(model, regime, segment, u, p)
        ensemble = Ensemble(u=u, p=p, measure=model.measure, seed=model.seed, t=t_end, tau=float(grid[0]))
        out = np.empty((stop - start, grid.size, len(systems), 4))
        for i, tau in enumerate(grid):
            ensemble = integrate_ensemble_utau(ensemble, model, float(tau), dtau)
            offset = np.concatenate([reference[i] - reference[0], np.zeros(4)])
            moved = ensemble.u + np.tile(offset, model.n_factors)
            for j, system in enumerate(systems):
                out[:, i, j] = system_coordinates(moved, system)
        return out

    coords = np.concatenate(map_chunks(run, count, chunk_rows(2 * model.dim), threads))
    x_mean = np.moveaxis(coords.mean(axis=0), 1, 0)
    x_std = np.moveaxis(coords.std(axis=0, ddof=1), 1, 0)
    x_stderr = x_std / math.sqrt(count)
    diff = coords[:, :, 0] - coords[:, :, 1]
    diff_stderr = diff.std(axis=0, ddof=1) / math.sqrt(count)

    gap = np.abs(x_mean[0] - x_mean[1])
    verdict = bool(np.all(gap <= AGREEMENT_SIGMAS * diff_stderr))
    eotvos, eotvos_stderr = eotvos_ratio(x_mean[0], x_mean[1], diff_stderr)
    prefactor, exponent = _deviation_tail(coords[:, -1, 2], spec.length_scale)
    return WepReport(
        tau_grid=grid,
        com_reference=reference,
        systems=systems,
        x_mean=x_mean,
        x_std=x_std,
        x_stderr=x_stderr,
        diff_stderr=diff_stderr,
        eotvos=eotvos,
        eotvos_stderr=eotvos_stderr,
        tail_prefactor=prefactor,
        tail_exponent=exponent,
        scaled_bound_log=scaled_bound_log(spec.n_factors),
        count=count,
        verdict=verdict,
    )
