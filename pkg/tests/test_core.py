import math

import numpy as np
import pytest

from src.core import (
    BetaFieldSpec,
    Cycle,
    MeasureSpec,
    ModelSpec,
    PhaseState,
    RegimeSchedule,
    WeightSchedule,
    beta_jacobian,
    beta_vjp,
    eta_norm,
    evaluate_beta,
    project_to_sigma,
    randers_hamiltonian,
)
from src.errors import (
    ConstraintViolationError,
    DimensionError,
    InputError,
    ProjectionUndefinedError,
)

ONES = np.ones(16)


def random_generator(rng, scale=1.0):
    a = rng.normal(size=(8, 8))
    return scale * (a - a.T) / 2.0


def catalog_fields(rng, n_factors):
    dim = 8 * n_factors
    return [
        BetaFieldSpec.constant(rng.normal(size=dim)),
        BetaFieldSpec.rotational(random_generator(rng)),
        BetaFieldSpec.contraction(0.7, anchor=rng.normal(size=dim)),
        BetaFieldSpec.sigma_contraction(1.3, tube_radius=0.1),
        BetaFieldSpec.blended([
            (WeightSchedule("cosine", value=0.5, amplitude=0.3, omega=2.0), BetaFieldSpec.rotational(random_generator(rng))),
            (WeightSchedule("ramp", value=1.0, slope=0.2), BetaFieldSpec.contraction(0.4)),
        ]),
    ]


# --- eta_norm --------------------------------------------------------------

def test_eta_norm_pythagorean_triple():
    v = np.zeros(8)
    v[:2] = [0.6, 0.8]
    assert eta_norm(ONES, v) == pytest.approx(1.0, abs=1e-15)


def test_eta_norm_zero_vector():
    assert eta_norm(ONES, np.zeros(24)) == 0.0


def test_eta_norm_matches_scalar_loop():
    rng = np.random.default_rng(1)
    weights = rng.uniform(0.5, 2.0, size=16)
    v = rng.normal(size=24)
    total = 0.0
    for k in range(3):
        for i in range(8):
            total += weights[i] * v[8 * k + i] ** 2
    assert eta_norm(weights, v) == pytest.approx(math.sqrt(total), rel=1e-14)


def test_eta_norm_phase_block_uses_all_weights():
    weights = np.arange(1.0, 17.0)
    v = np.ones(32)
    assert eta_norm(weights, v, block=16) == pytest.approx(math.sqrt(2 * weights.sum()), rel=1e-14)


def test_eta_norm_homogeneous():
    rng = np.random.default_rng(2)
    weights = rng.uniform(0.1, 3.0, size=16)
    v = rng.normal(size=(1000, 16))
    s = rng.normal(scale=5.0, size=1000)
    np.testing.assert_allclose(
        eta_norm(weights, s[:, None] * v), np.abs(s) * eta_norm(weights, v), rtol=1e-13
    )


def test_eta_norm_rejects_bad_lengths():
    with pytest.raises(DimensionError):
        eta_norm(ONES, np.zeros(12))
    with pytest.raises(DimensionError):
        eta_norm(np.ones(8), np.zeros(8))


# --- evaluate_beta ---------------------------------------------------------

def test_zero_constant_field():
    spec = BetaFieldSpec.constant(np.zeros(16))
    np.testing.assert_array_equal(evaluate_beta(spec, 0.0, 0.0, np.ones(16), ONES), np.zeros(16))


def test_raw_mode_rejects_long_field():
    c = np.zeros(8)
    c[0] = 1.2
    spec = BetaFieldSpec.constant(c, mode="raw")
    with pytest.raises(ConstraintViolationError) as info:
        evaluate_beta(spec, 0.0, 0.0, np.zeros(8), ONES)
    assert info.value.norm == pytest.approx(1.2)


def test_squashed_mode_normalizes_with_tanh():
    c = np.zeros(8)
    c[0] = 1.2
    beta = evaluate_beta(BetaFieldSpec.constant(c), 0.0, 0.0, np.zeros(8), ONES)
    assert eta_norm(ONES, beta) == pytest.approx(math.tanh(1.2), rel=1e-14)
    assert eta_norm(ONES, beta) == pytest.approx(0.8337, abs=1e-4)


def test_squashed_fields_stay_inside_unit_ball():
    rng = np.random.default_rng(3)
    weights = rng.uniform(0.5, 2.0, size=16)
    u = rng.normal(scale=0.5, size=(10_000, 16))
    for spec in catalog_fields(rng, 2):
        beta = evaluate_beta(spec, 0.3, 1.7, u, weights)
        assert np.max(eta_norm(weights, beta)) < 1.0


def test_batch_evaluation_matches_single():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(5, 16))
    for spec in catalog_fields(rng, 2):
        batch = evaluate_beta(spec, 0.1, 0.2, u, ONES)
        for i in range(5):
            np.testing.assert_allclose(batch[i], evaluate_beta(spec, 0.1, 0.2, u[i], ONES), rtol=1e-15, atol=1e-15)


def test_factor_permutation_commutes_with_field():
    rng = np.random.default_rng(5)
    u = rng.normal(size=24)
    perm = np.array([2, 0, 1])
    permuted = u.reshape(3, 8)[perm].reshape(-1)
    for spec in [
        BetaFieldSpec.rotational(random_generator(rng)),
        BetaFieldSpec.contraction(0.5),
        BetaFieldSpec.sigma_contraction(0.5, tube_radius=0.1),
    ]:
        beta = evaluate_beta(spec, 0.0, 0.0, u, ONES)
        np.testing.assert_allclose(
            evaluate_beta(spec, 0.0, 0.0, permuted, ONES), beta.reshape(3, 8)[perm].reshape(-1), rtol=1e-13
        )


def test_rotational_generator_must_be_antisymmetric():
    with pytest.raises(InputError):
        BetaFieldSpec.rotational(np.eye(8))


def test_model_rejects_mismatched_constant_field():
    with pytest.raises(DimensionError):
        ModelSpec(n_factors=2, beta_spec=BetaFieldSpec.constant(np.zeros(8)), schedule=RegimeSchedule())


# --- Jacobians -------------------------------------------------------------

def finite_difference_jacobian(spec, u, weights, h=1e-6):
    dim = u.size
    jac = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        jac[:, i] = (evaluate_beta(spec, 0.4, 0.9, u + e, weights) - evaluate_beta(spec, 0.4, 0.9, u - e, weights)) / (2 * h)
    return jac


def test_analytic_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    weights = rng.uniform(0.5, 2.0, size=16)
    u = rng.normal(size=16) + np.tile([1.0, 0, 0, 0, 0, 0, 0, 0], 2)
    for spec in catalog_fields(rng, 2):
        np.testing.assert_allclose(
            beta_jacobian(spec, 0.4, 0.9, u, weights), finite_difference_jacobian(spec, u, weights), atol=1e-7
        )


def test_vjp_matches_dense_jacobian():
    rng = np.random.default_rng(7)
    u = rng.normal(size=16) + 1.0
    q = rng.normal(size=16)
    for spec in catalog_fields(rng, 2):
        np.testing.assert_allclose(
            beta_vjp(spec, 0.4, 0.9, u, q, ONES), beta_jacobian(spec, 0.4, 0.9, u, ONES).T @ q, rtol=1e-12, atol=1e-13
        )


def test_squash_jacobian_near_zero_field():
    spec = BetaFieldSpec.contraction(1.0)
    u = np.full(8, 1e-5)
    np.testing.assert_allclose(beta_jacobian(spec, 0.0, 0.0, u, ONES), -np.eye(8), atol=1e-9)


# --- randers_hamiltonian ---------------------------------------------------

def test_hamiltonian_zero_field():
    assert randers_hamiltonian(np.ones(8), np.ones(8), np.zeros(8)) == 0.0


def test_hamiltonian_single_term():
    beta = np.zeros(8)
    p = np.zeros(8)
    beta[0], p[0] = 0.5, 2.0
    assert randers_hamiltonian(np.zeros(8), p, beta) == 1.0


def test_hamiltonian_matches_accumulation_loop():
    rng = np.random.default_rng(8)
    u, p, beta = rng.normal(size=(3, 32))
    total = 0.0
    for i in range(32):
        total += beta[i] * p[i]
    assert randers_hamiltonian(u, p, beta) == pytest.approx(total, rel=1e-12, abs=1e-12)


def test_hamiltonian_bilinear_in_p():
    rng = np.random.default_rng(9)
    u, p1, p2, beta = rng.normal(size=(4, 16))
    a, b = 1.7, -0.3
    lhs = randers_hamiltonian(u, a * p1 + b * p2, beta)
    rhs = a * randers_hamiltonian(u, p1, beta) + b * randers_hamiltonian(u, p2, beta)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_hamiltonian_shape_mismatch():
    with pytest.raises(DimensionError):
        randers_hamiltonian(np.zeros(8), np.zeros(16), np.zeros(8))


# --- project_to_sigma ------------------------------------------------------

def test_projection_rest_frame_example():
    u = np.array([2.0, 0, 0, 0, 5.0, 0, 0, 0])
    np.testing.assert_allclose(project_to_sigma(u, 1.0), [1.0, 0, 0, 0, 1.0, 0, 0, 0])


def test_projection_is_idempotent_and_on_sigma():
    rng = np.random.default_rng(10)
    u = rng.normal(size=(100, 24))
    once = project_to_sigma(u, 2.5)
    np.testing.assert_allclose(project_to_sigma(once, 2.5), once, atol=1e-12)
    blocks = once.reshape(100, 3, 8)
    x, y = blocks[..., 0:4], blocks[..., 4:8]
    np.testing.assert_allclose(np.sqrt((x ** 2).sum(axis=-1)), 2.5, atol=1e-12)
    np.testing.assert_allclose(y[..., 0] ** 2 - (y[..., 1:] ** 2).sum(axis=-1), 1.0, atol=1e-10)


def test_projection_undefined_at_zero_position():
    with pytest.raises(ProjectionUndefinedError):
        project_to_sigma(np.array([0, 0, 0, 0, 1.0, 2.0, 0, 0]))


# --- model types -----------------------------------------------------------

def test_phase_state_validates_lengths():
    with pytest.raises(DimensionError):
        PhaseState(u=np.zeros(8), p=np.zeros(16))
    with pytest.raises(InputError):
        PhaseState(u=np.full(8, np.nan), p=np.zeros(8))


def test_model_spec_invariants():
    beta = BetaFieldSpec.constant(np.zeros(8))
    with pytest.raises(InputError):
        ModelSpec(n_factors=0, beta_spec=beta, schedule=RegimeSchedule())
    with pytest.raises(InputError):
        ModelSpec(n_factors=1, beta_spec=beta, schedule=RegimeSchedule(), eta_weights=-ONES)
    with pytest.raises(InputError):
        ModelSpec(n_factors=1, beta_spec=beta, schedule=RegimeSchedule((Cycle(0.5, 0.2, 0.0),)), t_horizon=1.0)


def test_identity_schedule_waives_horizon():
    spec = ModelSpec(n_factors=1, beta_spec=BetaFieldSpec.constant(np.zeros(8)),
                     schedule=RegimeSchedule((Cycle(),)), t_horizon=3.0)
    assert spec.schedule.is_identity
    assert spec.schedule.segments() == []


def test_schedule_segments_skip_empty_regimes():
    schedule = RegimeSchedule((Cycle(0.5, 0.0, 0.25), Cycle(0.0, 0.25, 0.0)))
    regimes = [(r.value, start, end) for r, start, end in schedule.segments()]
    assert regimes == [("ergodic", 0.0, 0.5), ("expansion", 0.5, 0.75), ("concentration", 0.75, 1.0)]
    assert schedule.regime_at(0.8)[0].value == "concentration"
    assert schedule.regime_at(1.0) is None


def test_measure_broadcasts_scalars():
    measure = MeasureSpec(mean=0.5, sigma=2.0)
    assert measure.mean.shape == (16,)
    np.testing.assert_array_equal(measure.sigma, np.full(16, 2.0))
    with pytest.raises(InputError):
        MeasureSpec(sigma=0.0)


@pytest.mark.parametrize("mean", [[0.0, 0.0, 0.0], np.zeros(8), np.zeros((2, 16))])
def test_measure_rejects_wrong_lengths(mean):
    with pytest.raises(DimensionError):
        MeasureSpec(mean=mean)
