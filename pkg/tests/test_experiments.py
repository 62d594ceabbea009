import math

import numpy as np
import pytest

from stochhydro import experiments as ex
from stochhydro.coefficients import AffineOperator, ControlShift, ScaledFamily
from stochhydro.noise import BrownianPath, sample_brownian
from stochhydro.schema import ConfigError
from stochhydro.solvers import integrate_sde, integrate_wz
from stochhydro.spaces import StructuralError


def small(**over):
    sections = dict(
        model=dict(kind="goy", shells=4),
        noise=dict(modes=2),
        sigma=dict(kind="affine", g_scale=0.4, s_scale=0.2),
        sigma_tilde=dict(kind="affine", s_scale=0.3),
        experiment=dict(levels=[2, 3], paths=6, chunk=3, seed=5, check_samples=50),
    )
    for sec, vals in over.items():
        sections[sec] = {**sections.get(sec, {}), **vals}
    return ex.ExperimentConfig.create(**sections)


# ---------------------------------------------------------------- statistics helpers

def _wilson_oracle(k, n, z=1.959963984540054):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return centre - half, centre + half


@pytest.mark.parametrize("k,n", [(0, 10), (3, 10), (10, 10), (57, 200)])
def test_wilson_interval(k, n):
    p, lo, hi = ex.wilson_interval(k, n)
    assert p == k / n
    olo, ohi = _wilson_oracle(k, n)
    assert lo == pytest.approx(max(olo, 0.0), abs=1e-9)
    assert hi == pytest.approx(min(ohi, 1.0), abs=1e-9)
    assert all(math.isnan(v) for v in ex.wilson_interval(0, 0))


def test_log2_slope():
    assert ex.log2_slope([1, 2, 3, 4], [2.0 ** -n for n in (1, 2, 3, 4)]) == pytest.approx(-1.0)
    assert ex.log2_slope([1, 2], [1.0, math.nan]) is None
    assert ex.log2_slope([1, 2, 3], [4.0, 0.0, 1.0]) == pytest.approx(-1.0)


# ---------------------------------------------------------------- config plumbing

def test_config_defaults_and_derived():
    cfg = small()
    assert cfg.experiment["reference_level"] == 3 + 4
    assert cfg.experiment["alpha"] == pytest.approx(2 * math.sqrt(2 * math.log(2)))
    assert cfg.space["interp_exponent"] == 0.0
    ns = ex.ExperimentConfig.create(model=dict(kind="ns2d", K=2))
    assert ns.space["interp_exponent"] == 0.25


def test_config_replace_resets_reference():
    cfg = small().replace("experiment", levels=[2, 5])
    assert cfg.experiment["reference_level"] == 9
    with pytest.raises(ConfigError):
        small().replace("experiment", levels=[3, 2])


def test_explicit_coefficients_flat_or_nested():
    nested = small(model=dict(kind="linear", eigenvalues=[1.0, 2.0]),
                   sigma=dict(g=[[1, 0], [0, 1]], S=[[[1, 2], [3, 4]], [[0, 0], [0, 0]]]))
    flat = small(model=dict(kind="linear", eigenvalues=[1.0, 2.0]),
                 sigma=dict(g=[1, 0, 0, 1], S=[1, 2, 3, 4, 0, 0, 0, 0]))
    a, b = ex.build_problem(nested).sigma, ex.build_problem(flat).sigma
    np.testing.assert_array_equal(a.S, b.S)
    np.testing.assert_array_equal(a.g, b.g)
    with pytest.raises(StructuralError):
        ex.build_problem(small(model=dict(kind="linear", eigenvalues=[1.0, 2.0]), sigma=dict(g=[1, 2, 3])))


def test_random_coefficients_respect_support():
    cfg = small(model=dict(shells=6), sigma=dict(support=4, s_scale=1.0, symmetric=True))
    sig = ex.build_problem(cfg).sigma
    assert not sig.g[:, 4:].any() and not sig.S[:, 4:, :].any() and not sig.S[:, :, 4:].any()
    np.testing.assert_allclose(sig.S, np.swapaxes(sig.S, 1, 2))


def test_build_problem_variants():
    prob = ex.build_problem(small(G=dict(kind="sigma"), R=dict(r0=0.5, r1=0.2),
                                  sigma_tilde=dict(kind="scaled", c0=-1.0),
                                  control=dict(kind="constant", amplitude=0.3, budget=1.0)))
    assert prob.G is prob.sigma
    assert isinstance(prob.R, AffineOperator)
    np.testing.assert_array_equal(prob.R.const[:2], [0.5, 0.0])
    u = np.ones(prob.model.dim)
    np.testing.assert_allclose(prob.sigma_tilde.columns(u), -prob.sigma.columns(u))
    assert prob.h.energy() == pytest.approx(2 * 0.09)
    assert ex.build_problem(small()).R is None


def test_initial_condition():
    cfg = small(experiment=dict(xi_scale=2.0, xi_decay=0.5, xi_seed=3))
    prob = ex.build_problem(cfg)
    lam = prob.model.space.eigenvalues
    z = np.random.default_rng(3).standard_normal(prob.model.dim)
    np.testing.assert_allclose(prob.xi, 2.0 * z * (lam / lam[0]) ** -0.5)
    with pytest.raises(StructuralError):
        ex.build_problem(small(experiment=dict(xi=[1.0])))


# ---------------------------------------------------------------- WZ study

def test_wz_zero_tilde_gives_zero_distances():
    rep = ex.wz_convergence_study(small(sigma_tilde=dict(kind="zero")))
    for n in (2, 3):
        assert not rep.distances[n].any()
        assert rep.row(n, 0.1)["p_hat"] == 0.0
    assert rep.slope is None
    assert not rep.failed


def test_wz_single_path_single_level():
    rep = ex.wz_convergence_study(small(experiment=dict(levels=[3], paths=1)))
    assert rep.distances[3].shape == (1,)
    assert {r["p_hat"] for r in rep.rows} <= {0.0, 1.0}
    assert len(rep.rows) == len(rep.extras["mean_sup_distance"]) * 2


def test_wz_rows_consistent():
    rep = ex.wz_convergence_study(small())
    assert len(rep.rows) == 2 * 2
    for r in rep.rows:
        d = rep.distances[r["n"]]
        assert r["p_hat"] == np.mean(d >= r["lambda"])
        assert r["ci_lo"] <= r["p_hat"] <= r["ci_hi"]
        assert r["q25"] <= r["median_dist"] <= r["q75"]
        assert r["mean_sup_sq"] == pytest.approx(np.mean(d ** 2))
        assert r["diverged_count"] == 0


def test_wz_isolated_path_reproduces_record():
    cfg = small()
    rep = ex.wz_convergence_study(cfg)
    alone = ex._wz_chunk(cfg, 4, 5)
    for i, n in enumerate(cfg.levels):
        assert alone["dist"][i, 0] == pytest.approx(rep.distances[n][4], rel=1e-12)


def test_wz_independent_of_workers():
    cfg = small(experiment=dict(paths=9))
    a = ex.wz_convergence_study(cfg, workers=1)
    b = ex.wz_convergence_study(cfg, workers=3)
    for n in cfg.levels:
        assert a.distances[n].tobytes() == b.distances[n].tobytes()
    assert a.rows == b.rows


def test_wz_level_step_option():
    cfg = small(experiment=dict(wz_step="level", kappa=2, levels=[2, 3], reference_level=6))
    rep = ex.wz_convergence_study(cfg)
    assert all(np.isfinite(rep.distances[n]).all() for n in cfg.levels)
    zero = ex.wz_convergence_study(cfg.replace("sigma_tilde", kind="zero"))
    # coarser steps than the reference give a nonzero scheme gap even without σ̃
    assert zero.distances[2].max() > 0


def test_wz_precondition_failure(monkeypatch):
    monkeypatch.setattr(ex, "precondition_flags", lambda cfg, prob=None: ["C1(N) grows with N"])
    with pytest.raises(ex.StudyError):
        ex.wz_convergence_study(small())
    assert ex.wz_convergence_study(small(), check=False).distances


def test_wz_divergence_fails_study():
    cfg = small(R=dict(r1=-200.0), experiment=dict(guard=10.0))
    rep = ex.wz_convergence_study(cfg, check=False)
    assert rep.failed
    assert rep.extras["diverged_fraction"] == 1.0
    assert all(np.isnan(rep.distances[n]).all() for n in cfg.levels)


# ---------------------------------------------------------------- Girsanov shift

def test_girsanov_first_cell_unchanged():
    p = sample_brownian(3, 1.0, 8, 1)
    q = ex.girsanov_shift_path(p, 3)
    np.testing.assert_array_equal(q.increments[:, :32], p.increments[:, :32])


def test_girsanov_telescoping():
    p = sample_brownian(2, 2.0, 7, 2)
    n = 3
    q = ex.girsanov_shift_path(p, n)
    coarse_p = p.coarse_increments(n)
    coarse_q = q.coarse_increments(n)
    np.testing.assert_allclose(coarse_q[:, 0], coarse_p[:, 0], atol=1e-15)
    np.testing.assert_allclose(coarse_q[:, 1:], coarse_p[:, 1:] - coarse_p[:, :-1], atol=1e-14)
    # W − W̃ⁿ at the last node collapses to the last cell increment
    np.testing.assert_allclose(q.values(n)[:, -1], coarse_p[:, -1], atol=1e-13)


def test_girsanov_zero_path_constant_h():
    L = 6
    p = BrownianPath(1.0, L, np.zeros((2, 2 ** L)))
    h = ControlShift(np.array([0.0, 1.0]), np.array([[0.5, -1.0]]), 2.0)
    q = ex.girsanov_shift_path(p, 3, h)
    np.testing.assert_allclose(q.increments[0], 0.5 / 2 ** L, rtol=1e-14)
    np.testing.assert_allclose(q.increments[1], -1.0 / 2 ** L, rtol=1e-14)


def test_girsanov_grid_incompatible():
    p = sample_brownian(1, 1.0, 3, 0)
    h = ControlShift(np.array([0.0, 0.3, 1.0]), np.ones((2, 1)), 5.0)
    with pytest.raises(StructuralError):
        ex.girsanov_shift_path(p, 2, h)
    with pytest.raises(StructuralError):
        ex.girsanov_shift_path(p, 4)


def test_shifted_path_equals_uncorrected_wz():
    cfg = small(sigma=dict(s_scale=0.3), control=dict(kind="smooth", amplitude=0.5), experiment=dict(paths=3))
    prob = ex.build_problem(cfg)
    Xi = prob.sigma
    icfg = ex._int_cfg(cfg, 3)
    paths = ex._ensemble(cfg, 0, 3, cfg.experiment["reference_level"])
    U = integrate_sde(prob.model, Xi, None, None, None, None,
                      path=ex.girsanov_shift_path(paths, 3, prob.h), cfg=icfg, xi=prob.xi)
    W = integrate_wz(prob.model, Xi, ScaledFamily(Xi, -1.0), Xi, None, prob.h, path=paths, n=3,
                     cfg=icfg, xi=prob.xi, correct=False)
    np.testing.assert_allclose(U.states, W.states, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- support studies

def test_forward_zero_xi_gives_zero():
    rep = ex.support_forward_study(small(sigma=dict(kind="zero")))
    for n in (2, 3):
        assert not rep.distances[n].any()


def test_forward_reports_levels():
    rep = ex.support_forward_study(small())
    assert rep.study == "support-forward"
    assert all(np.all(rep.distances[n] > 0) for n in (2, 3))


def test_reverse_zero_case():
    rep = ex.support_reverse_study(small(sigma=dict(kind="zero"), experiment=dict(eps=[0.1])))
    assert not rep.distances[3].any()
    assert rep.row(3, 0.1)["p_hat"] == 1.0
    assert rep.extras["min_distance"][3] == 0.0


def test_reverse_spread():
    cfg = small(control=dict(kind="smooth", amplitude=0.5), experiment=dict(paths=20, chunk=10, levels=[3],
                                                                           eps=[0.05, 10.0]))
    rep = ex.support_reverse_study(cfg)
    assert rep.extras["min_distance"][3] < rep.median(3)
    assert rep.row(3, 10.0)["p_hat"] == 1.0
    fractions = [rep.row(3, e)["p_hat"] for e in (0.05, 10.0)]
    assert fractions[0] <= fractions[1]


# ---------------------------------------------------------------- noise and moments

def test_noise_huge_alpha():
    rep = ex.noise_tail_study(small(experiment=dict(alpha=1e6, paths=200, chunk=100)))
    assert all(r["p_hat"] == 0.0 for r in rep.rows)
    assert all(r["lambda"] == 1e6 for r in rep.rows)


def test_noise_rows_and_bound():
    rep = ex.noise_tail_study(small(experiment=dict(paths=500, chunk=250, tail_levels=[2, 3, 4])))
    assert [r["n"] for r in rep.rows] == [2, 3, 4]
    for n in (2, 3, 4):
        assert rep.extras["margin"][n] >= 0
        assert rep.extras["scaled_bound"][n] == pytest.approx(n * rep.extras["bound"][n])


def test_noise_invalid_alpha_reported():
    rep = ex.noise_tail_study(small(experiment=dict(alpha=0.5, paths=10, tail_levels=[2])))
    assert math.isnan(rep.extras["bound"][2])
    assert rep.messages


def test_moments_trivial_exponential():
    rep = ex.moment_diagnostics(small(experiment=dict(exp_alpha=0.0, exp_beta=0.0, paths=4)))
    assert rep.extras["estimates"]["exp_moment"] == 1.0
    zero = small(sigma=dict(kind="zero"), sigma_tilde=dict(kind="zero"),
                 experiment=dict(xi=[0.0] * 8, paths=4))
    rep = ex.moment_diagnostics(zero)
    assert rep.extras["estimates"]["exp_moment"] == 1.0
    assert rep.extras["estimates"]["total"] == 0.0
    assert rep.rows == []


def test_moments_overflow_flagged():
    cfg = small(experiment=dict(exp_alpha=1e4, paths=4))
    rep = ex.moment_diagnostics(cfg)
    assert "exponential moment overflow" in rep.extras["flags"]
    assert rep.extras["estimates"]["exp_moment"] == math.inf


def test_moments_ou_resampling():
    base = dict(model=dict(kind="linear", eigenvalues=[1.0]), noise=dict(modes=1),
                sigma=dict(kind="affine", g=[[1.0]], S=[[[0.0]]]), sigma_tilde=dict(kind="zero"),
                experiment=dict(xi=[1.0], levels=[2], reference_level=7, chunk=250,
                                exp_alpha=0.1, exp_beta=0.1))
    cfg = ex.ExperimentConfig.create(**base)
    e = ex.moment_diagnostics(cfg.replace("experiment", paths=1000))
    by = e.extras["by_path_count"]["exp_moment"]
    half, full = by[1], by[2]       # 500 and 1000 paths
    assert abs(half - full) <= 0.1 * full
    assert not e.extras["flags"]


def test_increment_rate_study_ou():
    cfg = ex.ExperimentConfig.create(
        model=dict(kind="linear", eigenvalues=[1.0]), noise=dict(modes=1),
        sigma=dict(kind="affine", g=[[1.0]], S=[[[0.0]]]),
        experiment=dict(xi=[1.0], levels=[3, 4, 5, 6], reference_level=11, paths=100, chunk=100))
    out = ex.increment_rate_study(cfg)
    assert out["slope"] < -0.5
    assert set(out["values"]) == {3, 4, 5, 6}
