"""
Two-time dynamics.

U_tau is the Hamiltonian flow of H = beta(u)·p integrated with classical RK4
(du/dtau = beta, dp/dtau = -J^T p with the analytic field Jacobian J).
U_t runs the regime schedule: ergodic shear-rotate, exponential concentration
toward the anchor (or toward Sigma), exponential expansion away from it.
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import (
    BLOCK,
    MeasureSpec,
    ModelSpec,
    PhaseState,
    Regime,
    RegimeSchedule,
    beta_vjp,
    evaluate_beta,
    project_to_sigma,
    randers_hamiltonian,
)
from .errors import (
    EstimationFailedError,
    InputError,
    NumericOverflowError,
    ScheduleExhaustedError,
)
from .observables import Ensemble, sample_members
from .parallel import chunk_rows, map_chunks

PhaseMap = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

LIPSCHITZ_TOLERANCE = 1e-9
DEGENERATE_DISTANCE = 1e-300
_RESAMPLE_ROUNDS = 8


@dataclass(frozen=True)
class Trajectory:
    samples: List[Tuple[float, PhaseState]]
    step: float

    @property
    def taus(self) -> np.ndarray:
        return np.array([tau for tau, _ in self.samples])

    @property
    def states(self) -> List[PhaseState]:
        return [state for _, state in self.samples]

    @property
    def final(self) -> PhaseState:
        return self.samples[-1][1]


@dataclass(frozen=True, eq=False)
class LipschitzCertificate:
    estimate: float
    witness_pair: Tuple[PhaseState, PhaseState]
    pairs_tested: int
    passed: bool


def step_grid(start: float, end: float, step: float) -> np.ndarray:
    """Uniform grid from start to end with spacing step; the last interval may be shorter."""
    if not step > 0:
        raise InputError("step must be positive")
    span = end - start
    if span <= 0:
        return np.array([start])
    full = int(math.floor(span / step + 1e-9))
    grid = start + step * np.arange(full + 1)
    if end - grid[-1] > 1e-12 * max(1.0, abs(end)):
        grid = np.append(grid, end)
    else:
        grid[-1] = end
    return grid


# --- U_tau ---------------------------------------------------------------

def _utau_rhs(spec: ModelSpec, tau: float, t: float, u: np.ndarray, p: np.ndarray):
    du = evaluate_beta(spec.beta_spec, t, tau, u, spec.eta_weights)
    dp = -beta_vjp(spec.beta_spec, t, tau, u, p, spec.eta_weights)
    return du, dp


def rk4_arrays(spec: ModelSpec, u: np.ndarray, p: np.ndarray, t: float, tau: float, h: float):
    """One RK4 step of the U_tau system on (u, p) arrays of any batch shape."""
    k1u, k1p = _utau_rhs(spec, tau, t, u, p)
    k2u, k2p = _utau_rhs(spec, tau + h / 2, t, u + h / 2 * k1u, p + h / 2 * k1p)
    k3u, k3p = _utau_rhs(spec, tau + h / 2, t, u + h / 2 * k2u, p + h / 2 * k2p)
    k4u, k4p = _utau_rhs(spec, tau + h, t, u + h * k3u, p + h * k3p)
    u_next = u + h / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
    p_next = p + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
    if not (np.all(np.isfinite(u_next)) and np.all(np.isfinite(p_next))):
        raise NumericOverflowError(f"U_tau step produced non-finite values at tau = {tau + h!r}")
    return u_next, p_next


def step_utau(state: PhaseState, spec: ModelSpec, dtau: float) -> PhaseState:
    if not dtau > 0:
        raise InputError("dtau must be positive")
    u, p = rk4_arrays(spec, state.u, state.p, state.t, state.tau, dtau)
    return state.evolve(u=u, p=p, tau=state.tau + dtau)


def integrate_utau(state: PhaseState, spec: ModelSpec, tau_end: float, dtau: float) -> Trajectory:
    if not tau_end > state.tau:
        raise InputError("tau_end must be later than the state's tau")
    grid = step_grid(state.tau, tau_end, dtau)
    samples = [(state.tau, state)]
    u, p = state.u, state.p
    for tau0, tau1 in zip(grid[:-1], grid[1:]):
        u, p = rk4_arrays(spec, u, p, state.t, tau0, tau1 - tau0)
        samples.append((float(tau1), state.evolve(u=u, p=p, tau=float(tau1))))
    return Trajectory(samples=samples, step=dtau)


def integrate_ensemble_utau(ensemble: Ensemble, spec: ModelSpec, tau_end: float, dtau: float,
                            threads: int = 1) -> Ensemble:
    """All members through U_tau from ensemble.tau to tau_end."""
    if tau_end == ensemble.tau:
        return ensemble
    grid = step_grid(ensemble.tau, tau_end, dtau)

    def advance(start: int, stop: int):
        u, p = ensemble.u[start:stop], ensemble.p[start:stop]
        for tau0, tau1 in zip(grid[:-1], grid[1:]):
            u, p = rk4_arrays(spec, u, p, ensemble.t, tau0, tau1 - tau0)
        return u, p

    parts = map_chunks(advance, ensemble.count, chunk_rows(2 * ensemble.u.shape[1]), threads)
    return ensemble.evolve(
        u=np.concatenate([u for u, _ in parts]), p=np.concatenate([p for _, p in parts]), tau=float(tau_end)
    )


# --- U_t -----------------------------------------------------------------

def _ergodic(u: np.ndarray, schedule: RegimeSchedule, dt: float) -> np.ndarray:
    ub = u.reshape(u.shape[:-1] + (-1, BLOCK))
    x, y = ub[..., 0:4], ub[..., 4:8]
    # kick couples each velocity to the next position coordinate
    y = y + schedule.shear_strength * dt * np.sin(np.roll(x, -1, axis=-1))
    c, s = math.cos(schedule.rotation_rate * dt), math.sin(schedule.rotation_rate * dt)
    out = np.concatenate([c * x + s * y, c * y - s * x], axis=-1)
    return out.reshape(u.shape)


def regime_arrays(spec: ModelSpec, regime: Regime, u: np.ndarray, p: np.ndarray, dt: float):
    """The time-dt map of one regime on (u, p) arrays."""
    schedule = spec.schedule
    if regime is Regime.ERGODIC:
        return _ergodic(u, schedule, dt), p
    anchor = spec.anchor
    if regime is Regime.CONCENTRATION:
        factor = math.exp(-schedule.concentration_rate * dt)
        target = anchor if schedule.target == "anchor" else project_to_sigma(u, spec.sphere_radius)
        return target + factor * (u - target), factor * p
    factor = math.exp(schedule.expansion_rate * dt)
    return anchor + factor * (u - anchor), p


def schedule_steps(schedule: RegimeSchedule, dt: float) -> List[Tuple[Regime, float, float, np.ndarray]]:
    """(regime, start, end, step grid) per schedule segment."""
    return [(regime, start, end, step_grid(start, end, dt)) for regime, start, end in schedule.segments()]


def advance_segment(spec: ModelSpec, regime: Regime, grid: np.ndarray, u: np.ndarray, p: np.ndarray):
    for t0, t1 in zip(grid[:-1], grid[1:]):
        u, p = regime_arrays(spec, regime, u, p, t1 - t0)
    return u, p


def step_ut(state: PhaseState, spec: ModelSpec, dt: float) -> PhaseState:
    if not dt > 0:
        raise InputError("dt must be positive")
    active = spec.schedule.regime_at(state.t)
    horizon = spec.schedule.total_duration
    if active is None or state.t + dt > horizon + 1e-12 * max(1.0, horizon):
        raise ScheduleExhaustedError(
            f"no regime active for t = {state.t!r} + dt = {dt!r} (horizon {horizon!r})"
        )
    regime, _ = active
    u, p = regime_arrays(spec, regime, state.u, state.p, dt)
    return state.evolve(u=u, p=p, t=state.t + dt)


def run_cycle(ensemble: Ensemble, spec: ModelSpec, dt: float, threads: int = 1) -> Ensemble:
    """Every member through the full regime schedule, member order preserved."""
    if ensemble.t != 0.0:
        raise InputError("run_cycle expects an ensemble at t = 0")
    if spec.schedule.is_identity:
        return ensemble
    steps = schedule_steps(spec.schedule, dt)

    def advance(start: int, stop: int):
        u, p = ensemble.u[start:stop], ensemble.p[start:stop]
        for regime, _, _, grid in steps:
            u, p = advance_segment(spec, regime, grid, u, p)
        return u, p

    parts = map_chunks(advance, ensemble.count, chunk_rows(2 * ensemble.u.shape[1]), threads)
    return ensemble.evolve(
        u=np.concatenate([u for u, _ in parts]),
        p=np.concatenate([p for _, p in parts]),
        t=steps[-1][2],
    )


def hamiltonian_residual(ensemble: Ensemble, spec: ModelSpec) -> float:
    """max over members of |H(u, p)| with beta evaluated at the ensemble's (t, tau)."""
    beta = evaluate_beta(spec.beta_spec, ensemble.t, ensemble.tau, ensemble.u, spec.eta_weights)
    return float(np.max(np.abs(randers_hamiltonian(ensemble.u, ensemble.p, beta))))


# --- Lipschitz certification ---------------------------------------------

def identity_map(u: np.ndarray, p: np.ndarray):
    return u, p


def regime_map(spec: ModelSpec, regime: Regime, duration: float, dt: float) -> PhaseMap:
    """The time-`duration` map of a single regime, stepped like run_cycle steps it."""
    grid = step_grid(0.0, duration, dt)

    def flow(u: np.ndarray, p: np.ndarray):
        return advance_segment(spec, regime, grid, u, p)
    return flow


def cycle_map(spec: ModelSpec, dt: float) -> PhaseMap:
    steps = schedule_steps(spec.schedule, dt)

    def flow(u: np.ndarray, p: np.ndarray):
        for regime, _, _, grid in steps:
            u, p = advance_segment(spec, regime, grid, u, p)
        return u, p
    return flow


def _pair_ratios(flow: PhaseMap, xu, xp, yu, yp):
    fxu, fxp = flow(xu, xp)
    fyu, fyp = flow(yu, yp)
    before = np.sqrt(((xu - yu) ** 2).sum(axis=-1) + ((xp - yp) ** 2).sum(axis=-1))
    after = np.sqrt(((fxu - fyu) ** 2).sum(axis=-1) + ((fxp - fyp) ** 2).sum(axis=-1))
    return before, after


def _refine(flow: PhaseMap, xu, xp, yu, yp, steps: int):
    """Power iteration of the difference vector anchored at x; returns the best ratio and partner."""
    du, dp = yu - xu, yp - xp
    radius = math.sqrt(float(du @ du + dp @ dp))
    fxu, fxp = flow(xu[None], xp[None])
    best, best_pair = 0.0, (yu, yp)
    for _ in range(steps):
        cu, cp = xu + du, xp + dp
        fyu, fyp = flow(cu[None], cp[None])
        eu, ep = (fyu - fxu)[0], (fyp - fxp)[0]
        length = math.sqrt(float(du @ du + dp @ dp))
        grown = math.sqrt(float(eu @ eu + ep @ ep))
        if length < DEGENERATE_DISTANCE or grown < DEGENERATE_DISTANCE:
            break
        ratio = grown / length
        if ratio > best:
            best, best_pair = ratio, (cu, cp)
        du, dp = eu * (radius / grown), ep * (radius / grown)
    return best, best_pair


def estimate_lipschitz(flow: PhaseMap, sampler: MeasureSpec, pairs: int, seed: int, n_factors: int,
                       accept: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                       refine_steps: int = 200) -> LipschitzCertificate:
    """Sampled supremum of |F(x) - F(y)| / |x - y| over pairs drawn from the product measure.

    Degenerate pairs (and pairs rejected by `accept`) are redrawn from fresh
    stream members. The witness pair is then refined by power iteration of
    the difference vector, which reaches the operator norm of linear maps.
    """
    if pairs < 1:
        raise InputError("pairs must be at least 1")
    best, witness, tested = -1.0, None, 0
    needed, cursor = pairs, 0
    for _ in range(_RESAMPLE_ROUNDS):
        if needed == 0:
            break
        xu, xp = sample_members(sampler, n_factors, cursor, cursor + needed, seed)
        yu, yp = sample_members(sampler, n_factors, cursor + needed, cursor + 2 * needed, seed)
        cursor += 2 * needed
        before, after = _pair_ratios(flow, xu, xp, yu, yp)
        valid = before >= DEGENERATE_DISTANCE
        if accept is not None:
            valid &= accept(xu, xp) & accept(yu, yp)
        if np.any(valid):
            ratios = np.where(valid, after / np.where(valid, before, 1.0), -1.0)
            i = int(np.argmax(ratios))
            if ratios[i] > best:
                best, witness = float(ratios[i]), (xu[i], xp[i], yu[i], yp[i])
        tested += int(np.count_nonzero(valid))
        needed = pairs - tested
    if witness is None:
        raise EstimationFailedError("every sampled pair was degenerate")
    xu, xp, yu, yp = witness
    if refine_steps > 0:
        refined, (ru, rp) = _refine(flow, xu, xp, yu, yp, refine_steps)
        if refined > best and (accept is None or bool(accept(ru[None], rp[None])[0])):
            best, yu, yp = refined, ru, rp
    return LipschitzCertificate(
        estimate=best,
        witness_pair=(PhaseState(u=xu, p=xp), PhaseState(u=yu, p=yp)),
        pairs_tested=tested,
        passed=best <= 1.0 + LIPSCHITZ_TOLERANCE,
    )


def tube_filter(tube_radius: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Accepts points whose every factor keeps its position block outside the singular tube."""
    def accept(u: np.ndarray, p: np.ndarray) -> np.ndarray:
        x = u.reshape(u.shape[:-1] + (-1, BLOCK))[..., 0:4]
        return np.all(np.sqrt((x ** 2).sum(axis=-1)) >= tube_radius, axis=-1)
    return accept
