import numpy as np
import pytest

from bilevel_sid.core import Box, FullSpace, exact_hypergradient
from bilevel_sid.errors import ConfigurationError
from bilevel_sid.problems import (LinearQuadraticProblem, RidgeHyperoptProblem, list_problems,
                                  make_meta, make_problem)

from conftest import scalar_lq


def test_linear_quadratic_scalar_example():
    p = make_problem("linear-quadratic", {"A": 0.5, "Bmat": [[1.0]], "b": [0.0], "ul_reg": 0.0,
                                          "w_target": [0.0],
                                          "feasible_set": {"kind": "full-space"},
                                          "lambda_radius": 2.0})
    assert p.exact_ll([1.0])[0] == pytest.approx(2.0)
    np.testing.assert_array_equal(p.exact_ll([0.0]), [0.0])
    assert p.closed_form_hypergradient([1.0])[0] == pytest.approx(4.0)
    fd = (p.f([1.0 + 1e-5]) - p.f([1.0 - 1e-5])) / 2e-5
    assert fd == pytest.approx(4.0, rel=1e-8)


def test_ridge_contraction_example():
    p = make_problem("ridge-hyperopt", {"X": np.sqrt(2) * np.eye(2), "y": [1.0, -1.0],
                                        "lambda_min": 0.1, "lambda_max": 1.0, "eta_gd": 0.5})
    np.testing.assert_allclose(p.H, np.eye(2), atol=1e-15)
    assert p.constants.q == pytest.approx(0.45)


def test_ridge_rejects_non_contractive_step():
    with pytest.raises(ConfigurationError, match="eta_gd"):
        make_problem("ridge-hyperopt", {"eta_gd": 5.0})
    with pytest.raises(ConfigurationError):
        make_problem("ridge-hyperopt", {"lambda_min": 0.0})


def test_registry():
    names = set(list_problems())
    assert names == {"linear-quadratic", "ridge-hyperopt", "meta-synthetic"}
    with pytest.raises(ConfigurationError):
        make_problem("nope")
    with pytest.raises(ConfigurationError):
        make_problem("linear-quadratic", {"bogus": 1})
    a = make_problem("ridge-hyperopt", seed=3)
    b = make_problem("ridge-hyperopt", seed=3)
    np.testing.assert_array_equal(a.X, b.X)


def test_lq_needs_declared_region_on_full_space():
    with pytest.raises(ConfigurationError):
        LinearQuadraticProblem(0.5, [[1.0]], feasible_set=FullSpace())
    with pytest.raises(ConfigurationError):
        LinearQuadraticProblem(1.2, [[1.0]], feasible_set=FullSpace(), lambda_radius=1)


def test_fixed_point_residual(benchmarks, rng):
    for p in benchmarks.values():
        for _ in range(100):
            lam = p.feasible_set.sample(rng, p.m)
            w = p.exact_ll(lam)
            assert np.linalg.norm(p.Phi(w, lam) - w) <= 1e-10


def test_ridge_exact_ll_matches_normal_equations(ridge, rng):
    X, y = ridge.X, ridge.y
    for lam in rng.uniform(ridge.lambda_min, ridge.lambda_max, 10):
        n = X.shape[0]
        direct = np.linalg.lstsq(np.vstack([X / np.sqrt(n), np.sqrt(lam) * np.eye(X.shape[1])]),
                                 np.concatenate([y / np.sqrt(n), np.zeros(X.shape[1])]),
                                 rcond=None)[0]
        np.testing.assert_allclose(ridge.exact_ll([lam]), direct, rtol=1e-10)


def test_closed_form_matches_implicit_solve(benchmarks, rng):
    for p in benchmarks.values():
        lam = p.feasible_set.sample(rng, p.m)
        np.testing.assert_allclose(exact_hypergradient(p, lam), p.closed_form_hypergradient(lam),
                                   rtol=1e-8, atol=1e-12)


def test_solution_norm_within_B(benchmarks, rng):
    for p in benchmarks.values():
        for _ in range(1000):
            lam = p.feasible_set.sample(rng, p.m)
            assert np.linalg.norm(p.exact_ll(lam)) <= p.constants.B * (1 + 1e-12)


def test_ridge_optimum_sits_on_the_lower_bound(ridge):
    lam_star = ridge.argmin_lambda()
    assert lam_star[0] == ridge.lambda_min
    assert ridge.closed_form_hypergradient(lam_star)[0] > 0


def test_meta_single_task_is_linear_quadratic():
    meta = make_meta(T=1, d_task=4, m=2, seed=5)
    A, Bm, b, target = meta.tasks[0]
    lq = LinearQuadraticProblem(A, Bm, b, target, meta.ul_reg, feasible_set=meta.feasible_set)
    lam = np.array([0.3, -0.7])
    np.testing.assert_allclose(meta.closed_form_hypergradient(lam),
                               lq.closed_form_hypergradient(lam), rtol=1e-12)


def test_meta_loss_decomposes_over_tasks(meta, rng):
    lam = meta.feasible_set.sample(rng, meta.m)
    reg = 0.5 * meta.ul_reg * np.sum(lam ** 2)
    total = sum(meta.task_loss(i, lam) for i in range(meta.T)) + reg
    assert meta.f(lam) == pytest.approx(total, rel=1e-12)


def test_meta_subproblem_is_unbiased():
    meta = make_meta(T=4, d_task=2, m=2, tasks_per_iteration=2, seed=1)
    lam = np.array([0.2, 0.4])
    import itertools
    subsets = list(itertools.combinations(range(4), 2))
    avg = np.mean([meta.restrict(s).closed_form_hypergradient(lam) for s in subsets], axis=0)
    np.testing.assert_allclose(avg, meta.closed_form_hypergradient(lam), rtol=1e-12)
    sub = meta.sample_task_subproblem(np.random.default_rng(0))
    assert sub.d == 4


# ----- constants honesty -----------------------------------------------------


def test_contraction_factor_is_honest(benchmarks, rng):
    for p in benchmarks.values():
        worst = 0.0
        for _ in range(500):
            lam = p.feasible_set.sample(rng, p.m)
            w1, w2 = rng.standard_normal(p.d), rng.standard_normal(p.d)
            worst = max(worst, np.linalg.norm(p.Phi(w1, lam) - p.Phi(w2, lam))
                        / np.linalg.norm(w1 - w2))
        assert worst <= p.constants.q + 1e-12


def _variance(draws):
    """Total variance of vector draws and its standard error."""
    sq = np.sum((draws - draws.mean(axis=0)) ** 2, axis=1)
    return sq.mean(), sq.std(ddof=1) / np.sqrt(len(sq))


def test_noise_constants_are_honest(lq_jacobian, ridge, rng):
    n = 10_000
    for p in (lq_jacobian, ridge):
        c = p.constants
        lam = p.feasible_set.sample(rng, p.m)
        w = p.exact_ll(lam) + 0.5 * rng.standard_normal(p.d)
        v = rng.standard_normal(p.d)
        gap = np.sum((p.Phi(w, lam) - w) ** 2)
        var, se = _variance(np.array([p.sample_Phi(w, lam, rng) for _ in range(n)]))
        assert var <= c.sigma1 + c.sigma2 * gap + 3 * se + 1e-20
        var, se = _variance(np.array([p.sample_jac1_Phi_T_vp(w, lam, v, rng) for _ in range(n)]))
        assert var <= c.sigma1_p * np.sum(v ** 2) + 3 * se + 1e-20
        var, se = _variance(np.array([p.sample_jac2_Phi_T_vp(w, lam, v, rng) for _ in range(n)]))
        assert var <= c.sigma2_p * np.sum(v ** 2) + 3 * se + 1e-20
        draws = [p.sample_grad_E(w, lam, rng) for _ in range(n)]
        var, se = _variance(np.array([d[0] for d in draws]))
        assert p.in_region(w) and var <= c.sigma1_E + 3 * se + 1e-20
        var, se = _variance(np.array([d[1] for d in draws]))
        assert var <= c.sigma2_E + 3 * se + 1e-20


def test_ridge_variance_grows_away_from_fixed_point(ridge, rng):
    p, c = ridge, ridge.constants
    lam = np.array([1.0])
    w_star = p.exact_ll(lam)
    n = 20_000
    results = []
    for w in (w_star, w_star + 3.0 * np.ones(p.d)):
        var, se = _variance(np.array([p.sample_Phi(w, lam, rng) for _ in range(n)]))
        gap = np.sum((p.Phi(w, lam) - w) ** 2)
        assert var <= c.sigma1 + c.sigma2 * gap + 3 * se + 1e-20
        results.append(var)
    assert c.sigma2 > 0
    assert results[1] > results[0]


def _check_unbiased(draws, target):
    draws = np.atleast_2d(np.asarray(draws))
    if draws.shape[0] == 1:
        draws = draws.T
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    # deterministic components only carry summation roundoff
    tol = 5 * se + 1e-9 * (1 + np.abs(target))
    assert np.all(np.abs(mean - target) <= tol)


def test_stochastic_oracles_are_unbiased(benchmarks):
    n = 100_000
    rng = np.random.default_rng(2024)
    for p in benchmarks.values():
        lam = p.feasible_set.sample(rng, p.m)
        w = p.exact_ll(lam) + 0.3 * rng.standard_normal(p.d)
        v = rng.standard_normal(p.d)
        _check_unbiased([p.sample_Phi(w, lam, rng) for _ in range(n)], p.Phi(w, lam))
        _check_unbiased([p.sample_jac1_Phi_T_vp(w, lam, v, rng) for _ in range(n)],
                        p.jac1_Phi_T_vp(w, lam, v))
        _check_unbiased([p.sample_jac2_Phi_T_vp(w, lam, v, rng) for _ in range(n)],
                        p.jac2_Phi_T_vp(w, lam, v))
        draws = [p.sample_grad_E(w, lam, rng) for _ in range(n)]
        g1, g2 = p.grad_E(w, lam)
        _check_unbiased([d[0] for d in draws], g1)
        _check_unbiased([d[1] for d in draws], g2)


def test_deterministic_copy_drops_all_noise(lq_jacobian):
    det = lq_jacobian.deterministic()
    assert det.constants.is_deterministic
    assert det.constants.q == lq_jacobian.constants.q
    scalar = scalar_lq(0.5, noise_ll=1.0)
    assert scalar.deterministic().constants.sigma1 == 0.0


def test_ridge_box_and_constants_shape(ridge):
    assert isinstance(ridge.feasible_set, Box)
    c = ridge.constants
    assert c.nu1 == 0 and c.nu2 == ridge.eta and c.nu1_bar == ridge.eta and c.sigma2_p == 0
    assert isinstance(ridge, RidgeHyperoptProblem)
