"""
Tail probabilities of lifted observables against Gaussian concentration bounds.

Bounds are handled in natural-log space throughout: the N-scaled bound
ln(1/2) - 32 N^2 is below the smallest double for N >= 5.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import stats

from .core import ModelSpec, Regime
from .errors import DegenerateInputError, FitDegenerateError, InputError
from .flows import advance_segment, schedule_steps
from .observables import DiagonalObservable, sample_members
from .parallel import chunk_rows, map_chunks

DKW_ALPHA = 0.05
LOG_HALF = math.log(0.5)
SCALED_BOUND_COEFFICIENT = 32.0
MIN_CONCENTRATION_COUNT = 1000
DEFAULT_RHO_POINTS = 40
REDUCTION_SLACK = 1.1


@dataclass(frozen=True, eq=False)
class ConcentrationReport:
    observable: str
    n_factors: int
    count: int
    center: str
    rho_grid: np.ndarray
    empirical_tail: np.ndarray
    one_sided_tail: np.ndarray
    dkw_margin: np.ndarray
    bound_log: np.ndarray
    fitted_exponent: float
    r_squared: float
    sigma_f: float
    m_f: float
    scaled_bound_log: float
    complexity_bound_log: float
    verdict: bool


@dataclass(frozen=True)
class ReductionReport:
    observable: str
    count: int
    dispersion_before: float
    dispersion_after: float
    contraction_ratio: float
    predicted_ratio: float
    ratio_stderr: float
    verdict: bool


@dataclass(frozen=True)
class ExponentFit:
    exponent: float
    intercept: float
    r_squared: float
    points: int


def dkw_margin(count: int, alpha: float = DKW_ALPHA) -> float:
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * count))


def _check_grid(rho_grid) -> np.ndarray:
    grid = np.asarray(rho_grid, dtype=float)
    if grid.ndim != 1:
        raise InputError("rho_grid must be one-dimensional")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InputError("rho_grid must be positive and strictly increasing")
    return grid


def _exceedance(sorted_values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return (sorted_values.size - np.searchsorted(sorted_values, grid, side="right")) / sorted_values.size


def empirical_tail(values, center: float, rho_grid) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction of values with |v - center| > rho, and the 95% DKW margin, per rho."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InputError("empirical_tail needs at least one value")
    grid = _check_grid(rho_grid)
    tail = _exceedance(np.sort(np.abs(values - center)), grid)
    return tail, np.full(grid.size, dkw_margin(values.size))


def one_sided_tail(values, center: float, rho_grid) -> np.ndarray:
    """max(P(v - center > rho), P(center - v > rho)) per rho."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InputError("one_sided_tail needs at least one value")
    grid = _check_grid(rho_grid)
    upper = _exceedance(np.sort(values - center), grid)
    lower = _exceedance(np.sort(center - values), grid)
    return np.maximum(upper, lower)


def gaussian_bound_log(rho, sigma_f: float):
    """ln((1/2) exp(-rho^2 / (2 sigma_f^2)))."""
    if not sigma_f > 0:
        raise InputError("sigma_f must be positive")
    value = LOG_HALF - np.asarray(rho, dtype=float) ** 2 / (2.0 * sigma_f ** 2)
    return float(value) if np.ndim(value) == 0 else value


def _check_n(n) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InputError(f"n must be a positive integer, got {n!r}")
    return int(n)


def scaled_bound_log(n: int, coefficient: float = SCALED_BOUND_COEFFICIENT) -> float:
    """ln((1/2) exp(-32 N^2)) in the 1-Lipschitz dominated regime."""
    n = _check_n(n)
    return LOG_HALF - coefficient * n * n


def complexity_bound_log(n: int) -> float:
    """The same bound with rho^2 / rho_P^2 = N^2 substituted literally: ln(1/2) - N^2 / 2."""
    n = _check_n(n)
    return LOG_HALF - n * n / 2.0


def fit_tail_exponent(rho_grid, tail) -> ExponentFit:
    rho = np.asarray(rho_grid, dtype=float)
    tail = np.asarray(tail, dtype=float)
    if rho.shape != tail.shape:
        raise InputError("rho_grid and tail must have the same length")
    measurable = (tail > 0) & (tail < 1)
    if np.count_nonzero(measurable) < 3:
        raise FitDegenerateError(
            "fewer than 3 tail values strictly inside (0, 1); the tail is too sharp to fit"
        )
    fit = stats.linregress(-rho[measurable] ** 2, np.log(tail[measurable]))
    return ExponentFit(
        exponent=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=float(fit.rvalue) ** 2,
        points=int(np.count_nonzero(measurable)),
    )


def fit_concentration_exponent(rho_grid, empirical_tail) -> Tuple[float, float]:
    """Slope c of ln(tail) ~ a - c rho^2 and the fit's r^2."""
    fit = fit_tail_exponent(rho_grid, empirical_tail)
    return fit.exponent, fit.r_squared


def _rho_grid(sigma_f: float, points: int) -> np.ndarray:
    return np.linspace(0.0, 4.0 * sigma_f, points + 1)[1:]


def observable_values(spec: ModelSpec, obs: DiagonalObservable, count: int, dt: float,
                      threads: int = 1) -> np.ndarray:
    """Samples `count` members, runs the U_t schedule and returns the lifted observable per member."""
    steps = schedule_steps(spec.schedule, dt)
    n = spec.n_factors

    def run(start: int, stop: int) -> np.ndarray:
        u, p = sample_members(spec.measure, n, start, stop, spec.seed)
        for regime, _, _, grid in steps:
            u, p = advance_segment(spec, regime, grid, u, p)
        return obs.values(u, p)

    return np.concatenate(map_chunks(run, count, chunk_rows(2 * spec.dim), threads))


def concentration_report(values: np.ndarray, obs_name: str, n_factors: int, center: str = "mean",
                         rho_points: int = DEFAULT_RHO_POINTS,
                         coefficient: float = SCALED_BOUND_COEFFICIENT) -> ConcentrationReport:
    if center not in ("mean", "median"):
        raise InputError(f"center must be 'mean' or 'median', got '{center}'")
    m_f = float(np.mean(values) if center == "mean" else np.median(values))
    sigma_f = float(np.std(values, ddof=1))
    if not sigma_f > 0:
        raise DegenerateInputError("observable has zero dispersion; no concentration bound applies")
    grid = _rho_grid(sigma_f, rho_points)
    tail, margin = empirical_tail(values, m_f, grid)
    sided = one_sided_tail(values, m_f, grid)
    bound_log = gaussian_bound_log(grid, sigma_f)
    try:
        fit = fit_tail_exponent(grid, tail)
        exponent, r_squared = fit.exponent, fit.r_squared
    except FitDegenerateError:
        exponent, r_squared = math.nan, math.nan
    # the 1/2 prefactor bounds each side; the two-sided tail is the union of both
    verdict = bool(np.all(sided <= np.exp(bound_log) + margin))
    return ConcentrationReport(
        observable=obs_name,
        n_factors=n_factors,
        count=int(np.size(values)),
        center=center,
        rho_grid=grid,
        empirical_tail=tail,
        one_sided_tail=sided,
        dkw_margin=margin,
        bound_log=bound_log,
        fitted_exponent=exponent,
        r_squared=r_squared,
        sigma_f=sigma_f,
        m_f=m_f,
        scaled_bound_log=scaled_bound_log(n_factors, coefficient),
        complexity_bound_log=complexity_bound_log(n_factors),
        verdict=verdict,
    )


def concentration_experiment(spec: ModelSpec, obs: DiagonalObservable, count: int, dt: float = 0.01,
                             center: str = "mean", rho_points: int = DEFAULT_RHO_POINTS,
                             coefficient: float = SCALED_BOUND_COEFFICIENT,
                             threads: int = 1) -> ConcentrationReport:
    if count < MIN_CONCENTRATION_COUNT:
        raise InputError(f"count must be at least {MIN_CONCENTRATION_COUNT}")
    values = observable_values(spec, obs, count, dt, threads)
    return concentration_report(values, obs.name, spec.n_factors, center, rho_points, coefficient)


def reduction_experiment(spec: ModelSpec, obs: DiagonalObservable, count: int, dt: float = 0.01,
                         threads: int = 1) -> ReductionReport:
    """Dispersion of the observable across the first concentration regime of the schedule.

    A schedule without a concentration regime is measured across its whole
    length and predicted not to contract.
    """
    if count < 2:
        raise InputError("count must be at least 2")
    steps = schedule_steps(spec.schedule, dt)
    target = next((i for i, step in enumerate(steps) if step[0] is Regime.CONCENTRATION), None)
    n = spec.n_factors

    def run(start: int, stop: int):
        u, p = sample_members(spec.measure, n, start, stop, spec.seed)
        if target is None:
            before = obs.values(u, p)
            for regime, _, _, grid in steps:
                u, p = advance_segment(spec, regime, grid, u, p)
            return before, obs.values(u, p)
        for regime, _, _, grid in steps[:target]:
            u, p = advance_segment(spec, regime, grid, u, p)
        before = obs.values(u, p)
        u, p = advance_segment(spec, Regime.CONCENTRATION, steps[target][3], u, p)
        return before, obs.values(u, p)

    parts = map_chunks(run, count, chunk_rows(2 * spec.dim), threads)
    before = np.concatenate([b for b, _ in parts])
    after = np.concatenate([a for _, a in parts])
    dispersion_before = float(np.std(before, ddof=1))
    dispersion_after = float(np.std(after, ddof=1))
    if dispersion_before == 0:
        raise DegenerateInputError("observable has zero dispersion before the concentration regime")
    if target is None:
        predicted = 1.0
    else:
        _, start, end, _ = steps[target]
        predicted = math.exp(-spec.schedule.concentration_rate * (end - start))
    ratio = dispersion_after / dispersion_before
    return ReductionReport(
        observable=obs.name,
        count=count,
        dispersion_before=dispersion_before,
        dispersion_after=dispersion_after,
        contraction_ratio=ratio,
        predicted_ratio=predicted,
        ratio_stderr=ratio / math.sqrt(count - 1),
        verdict=ratio <= predicted * REDUCTION_SLACK,
    )
