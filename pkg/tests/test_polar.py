import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moddual import polar as P
from moddual.linalg import svd_oracle
from oracles import lapack_polar


def conditioned(rng, shape, cond):
    m, n = shape
    r = min(m, n)
    u, _ = np.linalg.qr(rng.standard_normal((m, r)))
    v, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return (u * np.geomspace(1.0, 1.0 / cond, r)) @ v.T


# -- ns_step -------------------------------------------------------------------


def test_ns_step_fixes_orthogonal():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))
    np.testing.assert_allclose(P.ns_step(q, P.CUBIC), q, atol=1e-14)


def test_ns_step_half_identity():
    np.testing.assert_allclose(P.ns_step(0.5 * np.eye(2), P.CUBIC), 0.6875 * np.eye(2), rtol=1e-15)


@pytest.mark.parametrize("shape", [(6, 4), (4, 6), (5, 5)])
@pytest.mark.parametrize("coeffs", [P.CUBIC, (1.875, -1.25, 0.375), (2.0, -1.5, 0.5)])
def test_ns_step_transports_singular_values(shape, coeffs):
    g = conditioned(np.random.default_rng(1), shape, 5.0)
    s_in = svd_oracle(g).sigma
    s_out = svd_oracle(P.ns_step(g, coeffs)).sigma
    np.testing.assert_allclose(np.sort(s_out), np.sort(np.abs(P.odd_polynomial(coeffs, s_in))), atol=1e-9)


def test_ns_step_keeps_singular_subspaces():
    g = conditioned(np.random.default_rng(2), (6, 4), 3.0)
    res = svd_oracle(g)
    expected = (res.U * P.odd_polynomial(P.CUBIC, res.sigma)) @ res.V.T
    np.testing.assert_allclose(P.ns_step(g, P.CUBIC), expected, atol=1e-12)


# -- validate_coefficients -----------------------------------------------------


def test_cubic_valid_inside_basin():
    assert P.validate_coefficients(P.CUBIC, np.sqrt(3) - 1e-6)


def test_identity_polynomial_never_converges():
    report = P.validate_coefficients((1.0,), 1.0)
    assert not report and report.mode == "non-convergence"


def test_cubic_sign_flip_on_two():
    report = P.validate_coefficients(P.CUBIC, 2.0)
    assert not report and report.mode == "sign flip"
    assert np.sqrt(3) - 1e-3 < report.point <= 2.0
    assert P.odd_polynomial(P.CUBIC, report.point) <= 0


def test_overshoot_reported():
    report = P.validate_coefficients((3.4445, -4.7750, 2.0315), 1.0)
    assert not report and report.mode == "overshoot"


def test_wrong_fixed_point_rejected():
    report = P.validate_coefficients((0.5,), 1.0)
    assert not report and report.mode == "fixed point"


def test_validator_rejects_bad_arguments():
    with pytest.raises(ValueError):
        P.validate_coefficients((), 1.0)
    with pytest.raises(ValueError):
        P.validate_coefficients(P.CUBIC, 0.0)


# -- schedules -----------------------------------------------------------------


def test_default_schedule_matches_contract():
    s = P.DEFAULT_SCHEDULE
    assert s.coefficients == (P.CUBIC,)
    assert (s.max_steps, s.tolerance, s.normalization) == (60, 1e-6, P.Normalization.FROBENIUS)
    s.validate()


def test_schedule_round_trip():
    for s in [P.DEFAULT_SCHEDULE,
              P.IterationSchedule(((2.0, -1.5, 0.5), P.CUBIC), 12, "spectral_estimate", 1e-8, 1.4)]:
        assert P.IterationSchedule.from_dict(s.to_dict()) == s


def test_schedule_invalid_fields():
    with pytest.raises(ValueError):
        P.IterationSchedule(max_steps=0)
    with pytest.raises(ValueError):
        P.IterationSchedule(tolerance=0)
    with pytest.raises(ValueError):
        P.IterationSchedule(coefficients=())
    with pytest.raises(ValueError):
        P.IterationSchedule.from_dict({"coefficient": [1.5, -0.5]})
    with pytest.raises(P.InvalidSchedule) as info:
        P.IterationSchedule(coefficients=(1.0,)).validate()
    assert info.value.report.mode == "non-convergence"


def test_per_step_schedule_repeats_last_tuple():
    s = P.IterationSchedule(((2.0, -1.5, 0.5), P.CUBIC), x_max=1.4)
    assert s.coeffs_at(0) == (2.0, -1.5, 0.5)
    assert s.coeffs_at(1) == s.coeffs_at(29) == P.CUBIC


# -- orthogonalize -------------------------------------------------------------


def test_orthogonalize_half_identity():
    x, report = P.orthogonalize(0.5 * np.eye(3))
    np.testing.assert_allclose(x, np.eye(3), atol=1e-6)
    assert report.converged


def test_orthogonalize_already_polar_takes_no_steps():
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((8, 3)))
    x, report = P.orthogonalize(q)
    np.testing.assert_allclose(x, q, atol=1e-12)
    assert report.steps == 0


def test_orthogonalize_zero():
    x, report = P.orthogonalize(np.zeros((4, 2)))
    np.testing.assert_array_equal(x, 0)
    assert report.converged and report.steps == 0


def test_orthogonalize_matches_oracle_condition_100():
    g = conditioned(np.random.default_rng(4), (8, 4), 100.0)
    x, report = P.orthogonalize(g)
    assert np.linalg.norm(x - svd_oracle(g).polar()) <= 1e-5
    assert report.converged and report.residual <= 1e-5


@pytest.mark.parametrize("normalization", list(P.Normalization))
def test_orthogonalize_normalizations(normalization):
    g = np.random.default_rng(5).standard_normal((12, 7))
    sched = P.IterationSchedule(normalization=normalization)
    x, report = P.orthogonalize(g, sched)
    assert np.linalg.norm(x - lapack_polar(g)) <= 1e-5
    sigma_max = np.linalg.svd(g, compute_uv=False)[0]
    assert sigma_max / report.scale < np.sqrt(3)
    if normalization is P.Normalization.SPECTRAL_ESTIMATE:
        assert report.scale >= sigma_max


def test_orthogonalize_nonconvergence_carries_iterate():
    g = conditioned(np.random.default_rng(6), (6, 6), 1e4)
    sched = P.IterationSchedule(max_steps=3)
    with pytest.raises(P.NonConvergence) as info:
        P.orthogonalize(g, sched)
    assert info.value.result.shape == g.shape
    assert not info.value.report.converged and info.value.report.steps == 3
    x, report = P.orthogonalize(g, sched, strict=False)
    np.testing.assert_array_equal(x, info.value.result)
    assert not report.converged


def test_orthogonalize_rank_deficient():
    rng = np.random.default_rng(7)
    g = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 15))
    x, _ = P.orthogonalize(g)
    s = np.linalg.svd(x, compute_uv=False)
    np.testing.assert_allclose(s[:3], 1, atol=1e-6)
    assert np.all(s[3:] <= 1e-8)


def test_orthogonalize_equivariance_and_scale_invariance():
    rng = np.random.default_rng(8)
    g = rng.standard_normal((7, 5))
    q, _ = np.linalg.qr(rng.standard_normal((7, 7)))
    x, _ = P.orthogonalize(g)
    np.testing.assert_allclose(P.orthogonalize(q @ g)[0], q @ x, atol=1e-6)
    for c in (1e-6, 3.0, 1e6):
        np.testing.assert_allclose(P.orthogonalize(c * g)[0], x, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_orthogonalize_property_vs_lapack(m, n, seed):
    g = conditioned(np.random.default_rng(seed), (m, n), 50.0)
    x, report = P.orthogonalize(g)
    assert report.converged
    assert np.linalg.norm(x - lapack_polar(g)) <= 1e-5


# -- inverse root --------------------------------------------------------------


@pytest.mark.parametrize("g", [2 * np.eye(2), np.diag([3.0, 5.0])])
def test_inverse_root_diagonal(g):
    np.testing.assert_allclose(P.inverse_root_dualize(g), np.eye(2), atol=1e-10)


@pytest.mark.parametrize("shape", [(6, 4), (4, 6)])
def test_inverse_root_matches_oracle(shape):
    g = conditioned(np.random.default_rng(9), shape, 10.0)
    assert np.linalg.norm(P.inverse_root_dualize(g) - svd_oracle(g).polar()) <= 1e-5


def test_inverse_root_agrees_with_newton_schulz():
    g = np.random.default_rng(10).standard_normal((9, 5))
    np.testing.assert_allclose(P.inverse_root_dualize(g), P.orthogonalize(g)[0], atol=1e-5)


def test_inverse_root_ill_conditioned():
    rng = np.random.default_rng(11)
    with pytest.raises(P.IllConditioned) as info:
        P.inverse_root_dualize(rng.standard_normal((5, 2)) @ rng.standard_normal((2, 5)))
    assert info.value.condition > 1e8


def test_inverse_root_zero():
    np.testing.assert_array_equal(P.inverse_root_dualize(np.zeros((3, 2))), 0)


def test_inverse_root_step_limit():
    g = conditioned(np.random.default_rng(12), (5, 5), 1e3)
    with pytest.raises(P.NonConvergence):
        P.inverse_root_dualize(g, max_steps=2)


@pytest.mark.parametrize("scale", [1e-300, 1e-200, 1e200, 1e300])
def test_extreme_scales_keep_scale_invariance(scale):
    g = np.random.default_rng(11).standard_normal((6, 4))
    x, report = P.orthogonalize(g)
    y, big = P.orthogonalize(scale * g)
    np.testing.assert_allclose(y, x, atol=1e-12)
    assert big.scale == pytest.approx(scale * report.scale, rel=1e-12)
    np.testing.assert_allclose(P.inverse_root_dualize(scale * g), P.inverse_root_dualize(g), atol=1e-12)
