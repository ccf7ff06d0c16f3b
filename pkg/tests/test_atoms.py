import numpy as np
import pytest

from moddual import atoms as A
from moddual.atoms import AtomKind, AtomSpec
from moddual.linalg import svd_oracle
from moddual.polar import NonConvergence, IterationSchedule
from oracles import (
    central_difference,
    lapack_polar,
    lapack_rms_rms,
    loop_conv2d,
    loop_embed_dualize,
    loop_matmul,
)

RNG = np.random.default_rng


# -- specs ---------------------------------------------------------------------


def test_bond_mass_forced_to_zero():
    assert AtomSpec("relu").mass == 0.0
    assert AtomSpec("flatten", mass=3.0).mass == 0.0
    assert AtomSpec("relu").weight_shape == (0,)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="linear", dims=(3,)),
        dict(kind="linear", dims=(3, 2), mass=-1.0),
        dict(kind="conv2d", dims=(3, 2, 0), image=(4, 4)),
        dict(kind="conv2d", dims=(3, 2, 3)),
        dict(kind="conv2d", dims=(3, 2, 5), image=(4, 4)),
        dict(kind="relu", dims=(2, 2)),
        dict(kind="embed", dims=(2, 2), image=(3, 3)),
        dict(kind="attention", dims=(2, 2)),
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        AtomSpec(**kwargs)


def test_sensitivity_is_one_for_every_kind():
    specs = [AtomSpec("linear", (2, 3)), AtomSpec("embed", (2, 3)), AtomSpec("conv2d", (2, 3, 2), image=(4, 4)),
             AtomSpec("relu"), AtomSpec("flatten")]
    assert all(s.sensitivity == 1.0 for s in specs)


def test_conv_shapes():
    s = AtomSpec("conv2d", (4, 2, 3), image=(6, 5))
    assert s.weight_shape == (4, 2, 3, 3)
    assert s.input_shape == (6, 5, 2)
    assert s.output_shape((6, 5, 2)) == (4, 3, 4)
    with pytest.raises(ValueError):
        s.output_shape((6, 6, 2))


# -- forward -------------------------------------------------------------------


def test_linear_forward_examples():
    np.testing.assert_array_equal(A.linear_forward(np.eye(2), [3, 4]), [3, 4])
    np.testing.assert_array_equal(A.linear_forward(np.zeros((3, 2)), [1, 1]), [0, 0, 0])
    with pytest.raises(ValueError, match="dimension mismatch"):
        A.linear_forward(np.eye(2), [1, 2, 3])


def test_linear_forward_matches_loop():
    rng = RNG(0)
    w, x = rng.standard_normal((4, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(A.linear_forward(w, x), loop_matmul(w, x[:, None])[:, 0], rtol=1e-14)
    xb = rng.standard_normal((5, 3))
    np.testing.assert_allclose(A.linear_forward(w, xb), loop_matmul(xb, w.T), rtol=1e-13)


def test_conv_forward_matches_six_loops():
    rng = RNG(1)
    w, x = rng.standard_normal((4, 2, 3, 3)), rng.standard_normal((5, 5, 2))
    np.testing.assert_allclose(A.conv2d_forward(w, x), loop_conv2d(w, x), rtol=1e-12, atol=1e-12)


def test_conv_forward_nonsquare_image_and_batch():
    rng = RNG(2)
    w, x = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal((2, 6, 4, 2))
    y = A.conv2d_forward(w, x)
    assert y.shape == (2, 5, 3, 3)
    for b in range(2):
        np.testing.assert_allclose(y[b], loop_conv2d(w, x[b]), atol=1e-12)


def test_conv_forward_one_by_one_is_per_pixel_linear():
    rng = RNG(3)
    w, x = rng.standard_normal((3, 2, 1, 1)), rng.standard_normal((4, 4, 2))
    np.testing.assert_allclose(A.conv2d_forward(w, x), x @ w[:, :, 0, 0].T, rtol=1e-14)


def test_conv_forward_zero_and_errors():
    assert not A.conv2d_forward(np.zeros((2, 1, 2, 2)), np.ones((3, 3, 1))).any()
    with pytest.raises(ValueError):
        A.conv2d_forward(np.zeros((2, 1, 3, 3)), np.ones((2, 2, 1)))
    with pytest.raises(ValueError):
        A.conv2d_forward(np.zeros((2, 1, 2, 2)), np.ones((3, 3, 2)))


# -- norms ---------------------------------------------------------------------


def test_conv_norm_examples():
    rng = RNG(4)
    w1 = rng.standard_normal((3, 2, 1, 1))
    assert A.conv2d_norm(w1) == pytest.approx(lapack_rms_rms(w1[:, :, 0, 0]))
    w = np.zeros((3, 3, 2, 2))
    w[:, :, 1, 0] = np.eye(3)
    assert A.conv2d_norm(w) == pytest.approx(4.0)


def test_conv_norm_matches_slice_loop():
    w = RNG(5).standard_normal((4, 3, 3, 3))
    expected = 9 * max(np.sqrt(3 / 4) * svd_oracle(w[:, :, i, j]).sigma[0] for i in range(3) for j in range(3))
    assert A.conv2d_norm(w) == pytest.approx(expected, rel=1e-10)


def test_bond_norm_is_zero():
    assert A.atom_norm(AtomSpec("relu"), A.EMPTY) == 0.0
    assert A.atom_norm(AtomSpec("flatten"), A.EMPTY) == 0.0


# -- duality maps ------------------------------------------------------------------


def test_linear_dualize_examples():
    np.testing.assert_allclose(A.linear_dualize(np.diag([3.0, 5.0])), np.eye(2), atol=1e-6)
    np.testing.assert_array_equal(A.linear_dualize(np.zeros((3, 2))), 0)
    g = RNG(6).standard_normal((4, 3))
    assert np.linalg.norm(A.linear_dualize(g) - np.sqrt(4 / 3) * svd_oracle(g).polar()) <= 1e-5


def test_embed_dualize_examples():
    np.testing.assert_allclose(A.embed_dualize([[0.0], [3.0], [4.0]]), np.array([[0], [3], [4]]) * np.sqrt(3) / 5)
    np.testing.assert_array_equal(A.embed_dualize(np.zeros((2, 3))), 0)
    g = RNG(7).standard_normal((8, 5))
    np.testing.assert_allclose(A.embed_dualize(g), loop_embed_dualize(g), rtol=1e-14)


def test_embed_dualize_keeps_zero_columns():
    g = RNG(8).standard_normal((4, 3))
    g[:, 1] = 0
    out = A.embed_dualize(g)
    assert not out[:, 1].any()
    assert A.embed_norm(out) == pytest.approx(1.0)


def test_conv_dualize_examples():
    g1 = RNG(9).standard_normal((3, 2, 1, 1))
    np.testing.assert_allclose(A.conv2d_dualize(g1)[:, :, 0, 0], A.linear_dualize(g1[:, :, 0, 0]), atol=1e-14)
    g = np.zeros((2, 2, 2, 2))
    g[:, :, :, :] = np.diag([2.0, 3.0])[:, :, None, None]
    out = A.conv2d_dualize(g)
    for i in range(2):
        for j in range(2):
            np.testing.assert_allclose(out[:, :, i, j], 0.25 * np.eye(2), atol=1e-6)


def test_conv_dualize_per_slice_oracle():
    g = RNG(10).standard_normal((4, 3, 3, 3))
    out = A.conv2d_dualize(g)
    for i in range(3):
        for j in range(3):
            ref = np.sqrt(4 / 3) / 9 * lapack_polar(g[:, :, i, j])
            assert np.linalg.norm(out[:, :, i, j] - ref) <= 1e-5


def test_conv_dualize_reports_slice_on_nonconvergence():
    g = np.zeros((5, 5, 2, 2))
    g[:, :, :, :] = np.eye(5)[:, :, None, None]
    g[:, :, 1, 0] = np.diag(np.geomspace(1, 1e-5, 5))
    with pytest.raises(NonConvergence, match=r"kernel slice \(1, 0\)"):
        A.conv2d_dualize(g, IterationSchedule(max_steps=5))


ATOM_CASES = [
    AtomSpec("linear", (5, 3)),
    AtomSpec("linear", (2, 6)),
    AtomSpec("embed", (4, 7)),
    AtomSpec("conv2d", (3, 2, 3), image=(4, 4)),
    AtomSpec("conv2d", (2, 4, 2), image=(3, 3)),
]


@pytest.mark.parametrize("spec", ATOM_CASES, ids=lambda s: f"{s.kind.value}{s.dims}")
def test_dualize_has_unit_norm(spec):
    rng = RNG(12)
    for _ in range(20):
        d = A.atom_dualize(spec, rng.standard_normal(spec.weight_shape))
        assert A.atom_norm(spec, d) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("spec", ATOM_CASES, ids=lambda s: f"{s.kind.value}{s.dims}")
def test_dualize_maximizes_pairing(spec):
    rng = RNG(13)
    g = rng.standard_normal(spec.weight_shape)
    best = float(np.vdot(g, A.atom_dualize(spec, g)))
    t = rng.standard_normal((10_000, *spec.weight_shape))
    if spec.kind is AtomKind.LINEAR:
        d_out, d_in = spec.dims
        norms = np.sqrt(d_in / d_out) * np.linalg.norm(t, ord=2, axis=(1, 2))
    else:
        norms = np.array([A.atom_norm(spec, ti) for ti in t])
    pairs = np.tensordot(t, g, axes=g.ndim) / norms
    assert pairs.max() <= best + 1e-9


def test_linear_dualize_idempotent_up_to_scale():
    g = RNG(14).standard_normal((6, 4))
    d = A.linear_dualize(g)
    np.testing.assert_allclose(A.linear_dualize(d), d, atol=1e-6)


def test_init_weight_has_unit_norm():
    rng = RNG(15)
    for spec in ATOM_CASES:
        assert A.atom_norm(spec, A.init_weight(spec, rng)) == pytest.approx(1.0, rel=1e-12)
    assert A.init_weight(AtomSpec("relu"), rng).size == 0


# -- backward ------------------------------------------------------------------


def test_linear_backward_outer_product():
    gw, gx = A.atom_backward("linear", np.eye(2), [1.0, 0.0], [1.0, 0.0])
    np.testing.assert_array_equal(gw, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(gx, [1, 0])


def test_relu_backward_subgradient():
    _, gx = A.atom_backward("relu", A.EMPTY, [-1.0, 2.0], [1.0, 1.0])
    np.testing.assert_array_equal(gx, [0, 1])
    _, gx0 = A.atom_backward("relu", A.EMPTY, [0.0], [1.0])
    np.testing.assert_array_equal(gx0, [0])


def test_backward_dimension_mismatch():
    with pytest.raises(ValueError):
        A.atom_backward("linear", np.eye(2), [1.0, 0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        A.atom_backward("relu", A.EMPTY, [1.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        A.atom_backward("conv2d", np.zeros((2, 1, 2, 2)), np.zeros((3, 3, 1)), np.zeros((3, 3, 2)))


BACKWARD_CASES = [
    (AtomSpec("linear", (3, 4)), (5, 4)),
    (AtomSpec("embed", (3, 4)), (4,)),
    (AtomSpec("conv2d", (3, 2, 2), image=(4, 5)), (2, 4, 5, 2)),
    (AtomSpec("relu"), (3, 6)),
    (AtomSpec("flatten"), (2, 3, 3, 2)),
]


@pytest.mark.parametrize("spec, x_shape", BACKWARD_CASES, ids=lambda c: getattr(c, "kind", "x"))
def test_backward_matches_central_differences(spec, x_shape):
    rng = RNG(16)
    w = rng.standard_normal(spec.weight_shape) if not spec.kind.is_bond else A.EMPTY
    x = rng.standard_normal(x_shape)
    if spec.kind is AtomKind.RELU:
        # keep every coordinate at least 10 h from the kink
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    y = A.atom_forward(spec, w, x)
    u = rng.standard_normal(y.shape)
    gw, gx = A.atom_backward(spec.kind, w, x, u)

    fx = central_difference(lambda xx: float(np.vdot(u, A.atom_forward(spec, w, xx))), x)
    assert np.linalg.norm(gx - fx) <= 1e-5 * np.linalg.norm(fx)
    if not spec.kind.is_bond:
        fw = central_difference(lambda ww: float(np.vdot(u, A.atom_forward(spec, ww, x))), w)
        assert np.linalg.norm(gw - fw) <= 1e-5 * np.linalg.norm(fw)


@pytest.mark.parametrize("spec, x_shape", BACKWARD_CASES, ids=lambda c: getattr(c, "kind", "x"))
def test_jvp_is_adjoint_of_backward(spec, x_shape):
    rng = RNG(17)
    w = rng.standard_normal(spec.weight_shape) if not spec.kind.is_bond else A.EMPTY
    x = rng.standard_normal(x_shape)
    dw = rng.standard_normal(w.shape)
    dx = rng.standard_normal(x.shape)
    jv = A.atom_jvp(spec, w, x, dw, dx)
    u = rng.standard_normal(jv.shape)
    gw, gx = A.atom_backward(spec.kind, w, x, u)
    assert np.vdot(u, jv) == pytest.approx(np.vdot(gw, dw) + np.vdot(gx, dx), rel=1e-12)


# -- input/output norms used by the probes -------------------------------------------


def test_probe_norms():
    x = np.zeros((2, 2, 3))
    x[1, 0] = [3, 0, 0]
    assert A.spatial_max_rms(x) == pytest.approx(np.sqrt(3))
    assert A.input_norm(AtomSpec("embed", (2, 2)), [1.0, -2.0]) == 3.0
    assert A.input_norm(AtomSpec("linear", (2, 2)), [3.0, 4.0]) == pytest.approx(5 / np.sqrt(2))
    assert A.output_norm(AtomSpec("conv2d", (3, 3, 1), image=(2, 2)), x) == pytest.approx(np.sqrt(3))


def test_embed_dualize_tiny_and_mixed_columns():
    g = np.array([[3e-200, 1e-300, 4.0], [2e-200, 5e-301, -1.0]])
    np.testing.assert_allclose(A.embed_dualize(g), loop_embed_dualize(g / np.abs(g).max(axis=0)), rtol=1e-15)
