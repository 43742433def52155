import numpy as np
import pytest

from oracles import blur_matrix, box_matrix
from tdiff.degradations import (
    BoxDownsample,
    Composite,
    GaussianBlur,
    Identity,
    NoiseModel,
    ShapeError,
    SingularSystemError,
    conjugate_gradient,
    degrade,
    dense_matrix,
    gaussian_taps,
    make_operator,
)

TAPS = np.array([0.25, 0.5, 0.25])


def operators(h=8, w=8):
    return {
        "identity": Identity((h, w)),
        "box2": BoxDownsample((h, w), 2),
        "box4": BoxDownsample((h, w), 4),
        "blur": GaussianBlur((h, w)),
        "blur3": GaussianBlur((h, w), taps=TAPS),
        "composite": Composite([GaussianBlur((h, w)), BoxDownsample((h, w), 2)]),
    }


def oracle_matrix(name, h=8, w=8):
    if name == "identity":
        return np.eye(h * w)
    if name == "box2":
        return box_matrix(h, w, 2)
    if name == "box4":
        return box_matrix(h, w, 4)
    if name == "blur":
        return blur_matrix(h, w, gaussian_taps(5, 1.0))
    if name == "blur3":
        return blur_matrix(h, w, TAPS)
    if name == "composite":
        return box_matrix(h, w, 2) @ blur_matrix(h, w, gaussian_taps(5, 1.0))
    raise KeyError(name)


def test_identity_forward_adjoint():
    x = np.random.default_rng(0).standard_normal((3, 4))
    op = Identity((3, 4))
    np.testing.assert_array_equal(op.forward(x), x)
    np.testing.assert_array_equal(op.adjoint(x), x)


def test_box_downsample_constant():
    out = BoxDownsample((4, 4), 2).forward(np.full((4, 4), 8.0))
    np.testing.assert_array_equal(out, np.full((2, 2), 8.0))


def test_box_adjoint_of_single_value():
    out = BoxDownsample((2, 2), 2).adjoint(np.array([[1.0]]))
    np.testing.assert_array_equal(out, np.full((2, 2), 0.25))
    np.testing.assert_array_equal(out.ravel(), box_matrix(2, 2, 2).T @ [1.0])


def test_blur_impulse_is_outer_product_of_taps():
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    out = GaussianBlur((5, 5), taps=TAPS).forward(x)
    expected = (blur_matrix(5, 5, TAPS) @ x.ravel()).reshape(5, 5)
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out[1:4, 1:4], np.outer(TAPS, TAPS), atol=1e-15)


@pytest.mark.parametrize("name", list(operators()))
def test_structured_matches_dense_oracle(name):
    op = operators()[name]
    A = oracle_matrix(name)
    np.testing.assert_allclose(dense_matrix(op), A, atol=1e-14)
    rng = np.random.default_rng(1)
    v = rng.standard_normal(op.out_shape)
    np.testing.assert_allclose(op.adjoint(v).ravel(), A.T @ v.ravel(), atol=1e-13)


@pytest.mark.parametrize("name", list(operators()))
def test_adjoint_identity(name):
    op = operators()[name]
    rng = np.random.default_rng(2)
    for _ in range(100):
        u = rng.standard_normal(op.in_shape)
        v = rng.standard_normal(op.out_shape)
        assert abs(np.vdot(op.forward(u), v) - np.vdot(u, op.adjoint(v))) <= 1e-10


def test_solve_gram_examples():
    r = np.random.default_rng(3).standard_normal((3, 3))
    np.testing.assert_array_equal(Identity((3, 3)).solve_gram(r, 0.0), r)
    np.testing.assert_array_equal(Identity((3, 3)).solve_gram(r, 1.0), r / 2)
    w = BoxDownsample((2, 2), 2).solve_gram(np.array([[1.0]]), 0.0)
    np.testing.assert_allclose(w, [[4.0]])


@pytest.mark.parametrize("name", list(operators()))
@pytest.mark.parametrize("eta", [0.0, 1e-3, 0.5])
def test_solve_gram_residual(name, eta):
    op = operators()[name]
    A = oracle_matrix(name)
    r = np.random.default_rng(4).standard_normal(op.out_shape)
    if name.startswith("blur") and eta == 0.0 or name == "composite" and eta == 0.0:
        # circulant blur with these taps has a vanishing Nyquist response
        cond = np.linalg.cond(A @ A.T)
        if cond > 1e12:
            with pytest.raises(SingularSystemError):
                op.solve_gram(r, eta)
            return
    w = op.solve_gram(r, eta)
    resid = (A @ A.T + eta * np.eye(A.shape[0])) @ w.ravel() - r.ravel()
    assert np.linalg.norm(resid) / np.linalg.norm(r) <= 1e-10


def test_shape_errors():
    op = BoxDownsample((4, 4), 2)
    with pytest.raises(ShapeError):
        op.forward(np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        op.adjoint(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        BoxDownsample((5, 4), 2)
    with pytest.raises(ValueError):
        op.solve_gram(np.zeros((2, 2)), -1.0)


def test_conjugate_gradient_matches_direct_solve():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((12, 12))
    spd = m @ m.T + 0.1 * np.eye(12)
    b = rng.standard_normal(12)
    x = conjugate_gradient(lambda v: spd @ v, b)
    np.testing.assert_allclose(x, np.linalg.solve(spd, b), rtol=1e-9)


def test_box_preserves_constant_mean():
    for f in (1, 2, 4, 8):
        out = BoxDownsample((8, 16), f).forward(np.full((8, 16), -0.3125))
        assert np.all(out == -0.3125)


def test_make_operator():
    assert isinstance(make_operator("identity", (4, 4)), Identity)
    assert make_operator("box", (8, 8), factor=4).out_shape == (2, 2)
    assert make_operator("blur+box", (8, 8)).out_shape == (4, 4)
    with pytest.raises(ValueError):
        make_operator("motion", (8, 8))


def test_degrade_noiseless_identity():
    x = np.random.default_rng(6).uniform(-1, 1, (6, 6))
    y = degrade(x, Identity((6, 6)), NoiseModel(), rng=0)
    np.testing.assert_array_equal(y, x)


def test_fpn_is_fixed_for_a_seed():
    noise = NoiseModel(fpn_column_sigma=0.2, fpn_row_sigma=0.1, fpn_seed=42)
    op = Identity((16, 16))
    a = degrade(np.zeros((16, 16)), op, noise, rng=1)
    b = degrade(np.zeros((16, 16)), op, noise, rng=2)
    np.testing.assert_array_equal(a, b)
    c = degrade(np.zeros((16, 16)), op, NoiseModel(fpn_column_sigma=0.2, fpn_seed=43), rng=1)
    assert not np.array_equal(a, c)


def test_fpn_column_structure():
    noise = NoiseModel(fpn_column_sigma=1.0, fpn_seed=7)
    y = degrade(np.zeros((64, 64)), Identity((64, 64)), noise, rng=0)
    # every column holds one repeated value; var() itself only rounds to ~1e-31
    assert np.all(np.ptp(y, axis=0) == 0.0)
    assert np.all(np.var(y, axis=0) < 1e-25)
    assert np.all(np.var(y, axis=1) > 0.0)


def test_gaussian_noise_depends_only_on_rng():
    noise = NoiseModel(gaussian_sigma=0.1)
    op = Identity((8, 8))
    a = degrade(np.zeros((8, 8)), op, noise, rng=5)
    b = degrade(np.zeros((8, 8)), op, noise, rng=5)
    np.testing.assert_array_equal(a, b)
    assert abs(np.std(degrade(np.zeros((256, 256)), Identity((256, 256)), noise, rng=1)) - 0.1) < 0.002


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        NoiseModel(gaussian_sigma=-0.1)
