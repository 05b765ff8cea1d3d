import math

import numpy as np
import pytest

from src import parallel
from src.core import BetaFieldSpec, Cycle, MeasureSpec, ModelSpec, PhaseState, RegimeSchedule
from src.errors import DimensionError, InputError
from src.observables import sample_members
from src.wep import (
    HSpec,
    SubsystemSpec,
    com_trajectory,
    eotvos_ratio,
    observable_coordinate,
    partition_systems,
    system_coordinates,
    wep_experiment,
)

TAU_GRID = np.linspace(0.0, 1.0, 5)


def make_spec(n=4, beta=None, schedule=None, measure=None, seed=0):
    schedule = schedule if schedule is not None else RegimeSchedule()
    return ModelSpec(
        n_factors=n,
        beta_spec=beta if beta is not None else BetaFieldSpec.constant(np.zeros(8 * n)),
        schedule=schedule,
        measure=measure if measure is not None else MeasureSpec(),
        t_horizon=schedule.total_duration or 1.0,
        seed=seed,
    )


# --- subsystems ------------------------------------------------------------

def test_partition_splits_in_order():
    a, b, s = partition_systems(5, 2, 3)
    assert a.factor_indices == (0, 1)
    assert b.factor_indices == (2, 3, 4)
    assert s.factor_indices == (0, 1, 2, 3, 4)
    assert [len(a), len(b), len(s)] == [2, 3, 5]


@pytest.mark.parametrize("n_a, n_b", [(2, 1), (0, 4), (4, 0)])
def test_partition_rejects_bad_split(n_a, n_b):
    with pytest.raises(InputError):
        partition_systems(4, n_a, n_b)


def test_subsystem_validation():
    with pytest.raises(InputError):
        SubsystemSpec("A", (0, 0))
    with pytest.raises(InputError):
        SubsystemSpec("C", (0,))


def test_observable_coordinate_averages_positions():
    u = np.zeros(24)
    u[0:4] = [1.0, 2.0, 3.0, 4.0]
    u[8:12] = [3.0, 2.0, 1.0, 0.0]
    u[16:20] = [10.0, 10.0, 10.0, 10.0]
    state = PhaseState(u=u, p=np.zeros(24))
    a = SubsystemSpec("A", (0, 1))
    assert [observable_coordinate(state, a, mu) for mu in (1, 2, 3, 4)] == [2.0, 2.0, 2.0, 2.0]
    assert observable_coordinate(state, SubsystemSpec("B", (2,)), 3) == 10.0


@pytest.mark.parametrize("mu", [0, 5, True])
def test_observable_coordinate_rejects_bad_mu(mu):
    state = PhaseState(u=np.zeros(8), p=np.zeros(8))
    with pytest.raises(InputError):
        observable_coordinate(state, SubsystemSpec("S", (0,)), mu)


def test_system_past_factor_count():
    with pytest.raises(DimensionError):
        system_coordinates(np.zeros(16), SubsystemSpec("B", (1, 2)))


# --- center-of-mass reference ---------------------------------------------

def test_constant_drift_is_linear():
    ref = com_trajectory(np.zeros(4), HSpec.constant([1.0, 0.0, -2.0, 0.0]), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(ref[:, 0], [0.0, 0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(ref[:, 2], [0.0, -1.0, -2.0], atol=1e-12)


def test_sinusoidal_drift_matches_closed_form():
    grid = np.linspace(0.0, 3.0, 7)
    ref = com_trajectory([0.5, 0.0, 0.0, 0.0], HSpec.sinusoidal([1.0, 0.0, 0.0, 0.0], omega=1.0), grid)
    np.testing.assert_allclose(ref[:, 0], 0.5 + 1.0 - np.cos(grid), atol=1e-10)


def test_piecewise_drift_switches_at_breakpoints():
    h = HSpec.piecewise([0.5], [[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])
    ref = com_trajectory(np.zeros(4), h, [0.0, 0.25, 0.5, 1.0])
    np.testing.assert_allclose(ref[:, 0], [0.0, 0.25, 0.5, 0.0], atol=1e-12)
    straddling = com_trajectory(np.zeros(4), h, [0.0, 0.7])
    assert straddling[-1, 0] == pytest.approx(0.3, abs=1e-12)


def test_h_spec_validation():
    with pytest.raises(DimensionError):
        HSpec.constant([1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        HSpec.piecewise([0.5], [[1.0, 0.0, 0.0, 0.0]])
    with pytest.raises(InputError):
        HSpec.piecewise([0.5, 0.2], np.zeros((3, 4)))
    with pytest.raises(InputError):
        HSpec(kind="linear")


def test_com_rejects_unordered_grid():
    with pytest.raises(InputError):
        com_trajectory(np.zeros(4), HSpec.constant(np.zeros(4)), [0.0, 1.0, 1.0])


# --- experiment ------------------------------------------------------------

def test_free_fall_agrees_under_zero_field():
    h = HSpec.constant([0.1, 0.0, 0.0, 0.0])
    report = wep_experiment(make_spec(), 2, 2, h, TAU_GRID, 2_000)
    assert report.verdict
    assert report.eotvos <= 5.0 * report.eotvos_stderr
    assert report.x_mean.shape == (3, 5, 4)
    assert report.com_reference.shape == (5, 4)
    assert [s.name for s in report.systems] == ["A", "B", "S"]
    # with no field the only motion is the reference drift
    drift = report.x_mean[2, :, 0] - report.x_mean[2, 0, 0]
    np.testing.assert_allclose(drift, 0.1 * TAU_GRID, atol=1e-12)
    np.testing.assert_allclose(report.x_stderr, report.x_std / math.sqrt(2_000))


def test_field_acting_on_one_subsystem_is_detected():
    c = np.zeros(32)
    c[0] = c[8] = 0.2
    spec = make_spec(beta=BetaFieldSpec.constant(c, mode="raw"))
    report = wep_experiment(spec, 2, 2, HSpec.constant(np.zeros(4)), TAU_GRID, 2_000)
    assert not report.verdict
    gap = report.x_mean[0, -1, 0] - report.x_mean[1, -1, 0]
    assert gap - (report.x_mean[0, 0, 0] - report.x_mean[1, 0, 0]) == pytest.approx(0.2, abs=1e-9)


def test_ensemble_starts_at_measure_mean():
    measure = MeasureSpec().with_position_mean([1.0, 2.0, 0.0, 0.0])
    schedule = RegimeSchedule(cycles=[Cycle(concentration=1.0)], concentration_rate=3.0)
    report = wep_experiment(make_spec(schedule=schedule, measure=measure), 2, 2,
                            HSpec.constant(np.zeros(4)), TAU_GRID, 2_000)
    np.testing.assert_allclose(report.x_mean[2, 0, :2], [1.0, 2.0], atol=0.01)
    np.testing.assert_allclose(report.com_reference[0], [1.0, 2.0, 0.0, 0.0])


def test_tail_constants_are_reported():
    report = wep_experiment(make_spec(), 2, 2, HSpec.constant(np.zeros(4)), TAU_GRID, 5_000)
    assert math.isfinite(report.tail_prefactor)
    assert report.tail_exponent > 0
    assert report.scaled_bound_log == pytest.approx(math.log(0.5) - 32.0 * 16)


def test_results_do_not_depend_on_chunking_or_threads(monkeypatch):
    spec = make_spec(seed=42)
    h = HSpec.sinusoidal([0.3, 0.0, 0.1, 0.0])
    whole = wep_experiment(spec, 1, 3, h, TAU_GRID, 300, threads=1)
    monkeypatch.setattr(parallel, "CHUNK_ELEMENTS", 64 * 7)
    chunked = wep_experiment(spec, 1, 3, h, TAU_GRID, 300, threads=4)
    np.testing.assert_array_equal(whole.x_mean, chunked.x_mean)
    np.testing.assert_array_equal(whole.x_std, chunked.x_std)
    assert whole.verdict == chunked.verdict


def test_experiment_input_checks():
    h = HSpec.constant(np.zeros(4))
    with pytest.raises(InputError):
        wep_experiment(make_spec(), 2, 2, h, TAU_GRID, 1)
    with pytest.raises(InputError):
        wep_experiment(make_spec(), 3, 2, h, TAU_GRID, 100)


def test_deviation_spread_shrinks_with_system_size():
    h = HSpec.constant(np.zeros(4))
    small = wep_experiment(make_spec(n=4, seed=3), 2, 2, h, TAU_GRID, 10_000)
    large = wep_experiment(make_spec(n=8, seed=3), 4, 4, h, TAU_GRID, 10_000)
    for j in (0, 1):
        ratio = large.x_std[j, -1].mean() / small.x_std[j, -1].mean()
        assert ratio == pytest.approx(1.0 / math.sqrt(2.0), rel=0.15)


def test_swapping_labels_only_flips_the_gap():
    u, _ = sample_members(MeasureSpec().with_position_mean([1.0, 2.0, 0.5, 0.0]), 4, 0, 500, seed=1)
    a, b, _ = partition_systems(4, 2, 2)
    xa, xb = system_coordinates(u, a), system_coordinates(u, b)
    stderr = (xa - xb).std(axis=0, ddof=1) / math.sqrt(500)
    swapped_stderr = (xb - xa).std(axis=0, ddof=1) / math.sqrt(500)
    np.testing.assert_array_equal(stderr, swapped_stderr)
    np.testing.assert_array_equal(xa.mean(axis=0) - xb.mean(axis=0), -(xb.mean(axis=0) - xa.mean(axis=0)))
    assert eotvos_ratio(xa.mean(axis=0), xb.mean(axis=0), stderr) == \
        eotvos_ratio(xb.mean(axis=0), xa.mean(axis=0), swapped_stderr)


def test_swapping_report_means_keeps_eotvos():
    measure = MeasureSpec().with_position_mean([1.0, 2.0, 0.5, 0.3])
    report = wep_experiment(make_spec(measure=measure), 2, 2, HSpec.constant([0.1, 0.0, 0.0, 0.0]), TAU_GRID, 1_000)
    swapped = eotvos_ratio(report.x_mean[1], report.x_mean[0], report.diff_stderr)
    assert swapped == (report.eotvos, report.eotvos_stderr)
    assert report.eotvos <= 5.0 * report.eotvos_stderr


def test_whole_system_nests_its_parts():
    u = np.random.default_rng(21).normal(size=(7, 40))
    a, b, s = partition_systems(5, 2, 3)
    nested = (2 * system_coordinates(u, a) + 3 * system_coordinates(u, b)) / 5
    np.testing.assert_allclose(system_coordinates(u, s), nested, rtol=0, atol=1e-13)
    report = wep_experiment(make_spec(n=5), 2, 3, HSpec.sinusoidal([0.2, 0.0, 0.0, 0.1]), TAU_GRID, 300)
    np.testing.assert_allclose(report.x_mean[2], (2 * report.x_mean[0] + 3 * report.x_mean[1]) / 5,
                               rtol=0, atol=1e-12)


def test_reference_ignores_the_subsystem_split():
    spec = make_spec()
    h = HSpec.sinusoidal([0.2, 0.0, 0.1, 0.0], omega=3.0)
    one = wep_experiment(spec, 1, 3, h, TAU_GRID, 300)
    two = wep_experiment(spec, 2, 2, h, TAU_GRID, 300)
    np.testing.assert_array_equal(one.com_reference, two.com_reference)
    np.testing.assert_array_equal(one.com_reference, com_trajectory(spec.measure.mean[:4], h, TAU_GRID))
    # with no field every system moves with the reference alone
    shift = two.com_reference - two.com_reference[0]
    for j in range(3):
        np.testing.assert_allclose(two.x_mean[j] - two.x_mean[j, 0], shift, atol=1e-12)
