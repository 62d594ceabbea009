import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochhydro import coefficients as co
from stochhydro.coefficients import (AffineFamily, AffineOperator, ControlShift, PointwiseFamily,
                                     ScaledFamily, apply_G, apply_R, check_coefficient_conditions,
                                     correction_rho, frechet_apply, sigma_columns, smooth_control,
                                     wz_correction)
from stochhydro.spaces import SpectralSpace, StructuralError


def _random_affine(rng, J, d, scale=1.0):
    return AffineFamily(rng.standard_normal((J, d)), scale * rng.standard_normal((J, d, d)))


def _pointwise(rng, J, d, funcs="tanh"):
    return PointwiseFamily(funcs, rng.standard_normal((J, d, d)) / np.sqrt(d))


# ---------------------------------------------------------------- columns

def test_columns_examples():
    fam = AffineFamily(np.zeros((2, 3)), np.ones((2, 3, 3)))
    assert not sigma_columns(fam, np.zeros(3)).any()
    fam = AffineFamily([[1.0, 0.0]], [np.eye(2)])
    np.testing.assert_array_equal(sigma_columns(fam, [0.0, 2.0])[0], [1.0, 2.0])
    pw = PointwiseFamily("tanh", np.zeros((2, 3, 3)))
    assert not sigma_columns(pw, np.arange(3.0)).any()
    with pytest.raises(StructuralError):
        sigma_columns(fam, np.zeros(3))


def test_affine_columns_oracle(rng):
    fam = _random_affine(rng, 3, 4)
    u = rng.standard_normal((5, 4))
    got = fam.columns(u)
    for b in range(5):
        for j in range(3):
            np.testing.assert_allclose(got[b, j], fam.g[j] + fam.S[j] @ u[b], rtol=1e-13, atol=1e-14)


def test_family_validation():
    with pytest.raises(StructuralError):
        AffineFamily(np.zeros((2, 3)), np.zeros((2, 3, 2)))
    with pytest.raises(StructuralError):
        AffineFamily(np.full((1, 1), np.nan), np.zeros((1, 1, 1)))
    with pytest.raises(StructuralError):
        PointwiseFamily("cube", np.zeros((1, 2, 2)))
    with pytest.raises(StructuralError):
        PointwiseFamily(("tanh",), np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- derivatives

def test_affine_derivative_constant(rng):
    fam = _random_affine(rng, 2, 3)
    w = rng.standard_normal(3)
    a = frechet_apply(fam, 1, rng.standard_normal(3), w)
    b = frechet_apply(fam, 1, rng.standard_normal(3), w)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, fam.S[1] @ w, rtol=1e-14)
    assert not frechet_apply(fam, 0, np.ones(3), np.zeros(3)).any()


def test_pointwise_square_derivative(monkeypatch):
    table = dict(co.POINTWISE_FUNCTIONS)
    table["square"] = (lambda x: x * x, lambda x: 2 * x, lambda x: 2 + 0 * x, np.inf, 2.0)
    monkeypatch.setattr(co, "POINTWISE_FUNCTIONS", table)
    fam = PointwiseFamily("square", np.ones((1, 1, 1)))
    assert frechet_apply(fam, 0, [3.0], [1.0])[0] == 6.0
    eps = 1e-6
    fd = (fam.columns([3.0 + eps])[0, 0] - fam.columns([3.0])[0, 0]) / eps
    assert fd == pytest.approx(6.0, abs=1e-5)


@pytest.mark.parametrize("name", sorted(co.POINTWISE_FUNCTIONS))
def test_pointwise_central_differences(rng, name):
    fam = _pointwise(rng, 3, 5, name)
    u = rng.standard_normal(5)
    w = rng.standard_normal(5)
    exact = np.stack([frechet_apply(fam, j, u, w) for j in range(3)])
    errs = []
    for eps in (1e-4, 1e-5):
        fd = (fam.columns(u + eps * w) - fam.columns(u - eps * w)) / (2 * eps)
        errs.append(np.max(np.abs(fd - exact)))
    assert errs[0] < 1e-6
    # quadratic reduction until rounding takes over
    assert errs[1] < max(errs[0] / 20, 1e-9)


def test_jvp_matches_jacobian(rng):
    for fam in (_random_affine(rng, 3, 4), _pointwise(rng, 3, 4, "sin")):
        u = rng.standard_normal((2, 4))
        w = rng.standard_normal((2, 3, 4))
        expect = np.einsum("bjxy,bjy->bjx", fam.jacobian(u), w)
        np.testing.assert_allclose(fam.jvp(u, w), expect, rtol=1e-12, atol=1e-13)


def test_pointwise_hessian_fd(rng):
    fam = _pointwise(rng, 2, 3, "tanh")
    u, w1, w2 = rng.standard_normal((3, 3))
    eps = 1e-5
    fd = (fam.jvp(u + eps * w2, np.broadcast_to(w1, (2, 3)))
          - fam.jvp(u - eps * w2, np.broadcast_to(w1, (2, 3)))) / (2 * eps)
    np.testing.assert_allclose(fam.hessian_apply(u, w1, w2), fd, atol=1e-8)


# ---------------------------------------------------------------- corrections

def test_rho_empty_sum(rng):
    fam = _random_affine(rng, 2, 3)
    r, rt = correction_rho(fam, fam, rng.standard_normal(3), 0)
    assert not r.any() and not rt.any()


def test_rho_affine_constant_sigma(rng):
    J, d = 3, 4
    sigma = AffineFamily(rng.standard_normal((J, d)), np.zeros((J, d, d)))
    tilde = AffineFamily(np.zeros((J, d)), rng.standard_normal((J, d, d)))
    expect = sum(tilde.S[j] @ sigma.g[j] for j in range(J))
    for _ in range(3):
        r, _ = correction_rho(sigma, tilde, rng.standard_normal(d), 5)
        np.testing.assert_allclose(r, expect, rtol=1e-13)
    # partial sums stop at n
    r2, _ = correction_rho(sigma, tilde, np.zeros(d), 2)
    np.testing.assert_allclose(r2, tilde.S[0] @ sigma.g[0] + tilde.S[1] @ sigma.g[1], rtol=1e-13)


@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.integers(0, 5))
def test_scaled_copy_relations(seed, c0, n):
    rng = np.random.default_rng(seed)
    sigma = _pointwise(rng, 3, 4, "softclamp")
    tilde = ScaledFamily(sigma, c0)
    u = rng.standard_normal(4)
    r, rt = correction_rho(sigma, tilde, u, n)
    np.testing.assert_allclose(rt, c0 * r, rtol=1e-12, atol=1e-12)
    base, _ = correction_rho(sigma, sigma, u, n)
    np.testing.assert_allclose(wz_correction(sigma, tilde, u, n), (c0 + c0 ** 2 / 2) * base,
                               rtol=1e-10, atol=1e-12)


def test_scaled_copy_constants(rng):
    sigma = _pointwise(rng, 2, 3, "tanh")
    space = SpectralSpace([1.0, 2.0, 4.0])
    zero = AffineFamily.zeros(2, 3)
    a = check_coefficient_conditions(sigma, ScaledFamily(sigma, 1.0), None, None, space, 200, 4)
    b = check_coefficient_conditions(sigma, ScaledFamily(sigma, -2.5), None, None, space, 200, 4)
    for N in a.radii:
        assert b.C1[N] == pytest.approx(2.5 * a.C1[N], rel=1e-12)
        assert b.C2[N] == pytest.approx(2.5 * a.C2[N], rel=1e-12)
    assert zero.is_zero


@given(st.integers(0, 2 ** 31), st.integers(0, 4))
def test_wz_correction_sum(seed, n):
    rng = np.random.default_rng(seed)
    sigma, tilde = _random_affine(rng, 3, 3), _pointwise(rng, 3, 3, "sin")
    u = rng.standard_normal((2, 3))
    r, rt = correction_rho(sigma, tilde, u, n)
    np.testing.assert_allclose(wz_correction(sigma, tilde, u, n), r + 0.5 * rt, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- G and R

def test_apply_G_examples(rng):
    G = AffineOperator(np.array([[1.0, 1.0]]), np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(apply_G(G, np.zeros(2), [2.0]), [2.0, 2.0])
    G = AffineOperator(rng.standard_normal((3, 4)), rng.standard_normal((3, 4, 4)))
    u = rng.standard_normal(4)
    assert not apply_G(G, u, np.zeros(3)).any()
    h = rng.standard_normal(3)
    cols = G.columns(u)
    np.testing.assert_allclose(apply_G(G, u, h), sum(h[j] * cols[j] for j in range(3)), rtol=1e-13)
    with pytest.raises(StructuralError):
        apply_G(G, u, np.zeros(2))


def test_apply_R_examples(rng):
    c = rng.standard_normal(3)
    L = rng.standard_normal((3, 3))
    R = AffineOperator(c, L)
    np.testing.assert_array_equal(apply_R(R, np.zeros(3)), c)
    np.testing.assert_array_equal(apply_R(AffineOperator(c, np.zeros((3, 3))), rng.standard_normal(3)), c)
    u = rng.standard_normal(3)
    np.testing.assert_allclose(apply_R(R, u), c + L @ u, rtol=1e-13)
    r0, r1 = R.growth_constants()
    assert r1 == pytest.approx(np.max(np.linalg.svd(L, compute_uv=False)))
    with pytest.raises(StructuralError):
        AffineOperator(np.zeros(3), np.zeros((2, 2)))


# ---------------------------------------------------------------- control

def test_control_budget():
    t = np.array([0.0, 0.5, 1.0])
    vals = np.array([[1.0, 0.0], [0.0, 2.0]])
    h = ControlShift(t, vals, 2.5)
    assert h.energy() == pytest.approx(2.5)
    with pytest.raises(StructuralError):
        ControlShift(t, vals, 2.4)
    np.testing.assert_array_equal(h.at(0.7), [0.0, 2.0])
    np.testing.assert_array_equal(h.at(1.0), [0.0, 2.0])
    np.testing.assert_allclose(h.integral_on([0.0, 0.25, 0.75, 1.0]),
                               [[0.25, 0.0], [0.25, 0.5], [0.0, 0.5]])


def test_smooth_control():
    h = smooth_control(3, 2.0, 16, 0.5)
    assert h.values.shape == (16, 3)
    assert h.energy() <= h.budget * (1 + 1e-12)
    with pytest.raises(StructuralError):
        smooth_control(3, 2.0, 16, 0.5, budget=0.01)
    assert ControlShift.zero(2, 1.0).is_zero


# ---------------------------------------------------------------- checker

def test_checker_zero_case():
    space = SpectralSpace([1.0, 2.0, 3.0])
    z = AffineFamily.zeros(2, 3)
    rep = check_coefficient_conditions(z, z, None, AffineOperator.zero_drift(3), space, 100, 0)
    assert rep.K0 == rep.K1 == rep.L == 0.0
    assert all(v == 0.0 for v in rep.C1.values())
    assert all(v == 0.0 for v in rep.sn_defect)
    assert rep.flags == []


def test_checker_projection_defect(rng):
    space = SpectralSpace(np.arange(1.0, 5.0))
    sigma = _random_affine(rng, 3, 4)
    tilde = _random_affine(rng, 3, 4)
    rep = check_coefficient_conditions(sigma, tilde, None, None, space, 200, 1)
    assert rep.sn_defect[3] == 0.0
    assert all(b <= a for a, b in zip(rep.sn_defect, rep.sn_defect[1:]))
    assert rep.rho_defect[-1] == 0.0


def _power_norm(M, iters=200):
    x = np.ones(M.shape[1])
    for _ in range(iters):
        x = M.T @ (M @ x)
        x /= np.linalg.norm(x)
    return np.linalg.norm(M @ x)


def test_checker_lipschitz_oracle(rng):
    J, d = 3, 5
    sigma = _random_affine(rng, J, d)
    zero = AffineFamily.zeros(J, d)
    rep = check_coefficient_conditions(sigma, zero, None, None, SpectralSpace(np.arange(1.0, d + 1)), 400, 2)
    bound = sum(_power_norm(sigma.S[j]) ** 2 for j in range(J))
    assert 0 < rep.L <= bound * (1 + 1e-9)
    assert rep.L >= 0.2 * bound


def test_checker_quarter_constants(rng):
    space = SpectralSpace(np.arange(1.0, 5.0) ** 2, 0.25)
    sigma = _random_affine(rng, 2, 4)
    G = AffineOperator.from_family(sigma)
    rep = check_coefficient_conditions(sigma, AffineFamily.zeros(2, 4), G,
                                       AffineOperator(np.ones(4), np.eye(4)), space, 100, 0)
    assert rep.BS_K > 0 and rep.GR1_K0 > 0 and rep.GR1_R0 > 0
    plain = check_coefficient_conditions(sigma, sigma, G, None, SpectralSpace(np.ones(4)), 50, 0)
    assert plain.BS_K is None
