import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal

from hdlaplace.glmm import (
    GlmmModel,
    Hierarchy,
    build_g,
    original_model,
    reparameterize_multilevel,
    simulate_multilevel,
    simulate_two_level,
    two_level_model,
)
from hdlaplace.laplace_engine import ExpLinearG, QuadraticG
from hdlaplace.oracle import (
    OracleInfeasible,
    QuadratureSpec,
    exact_log_integral_tensor,
    exact_loglik_tensor,
    exact_loglik_two_level,
    gauss_hermite,
    log_integral_1d,
)


def test_gauss_hermite_integrates_polynomials():
    x, logw = gauss_hermite(10)
    w = np.exp(logw)
    assert w.sum() == pytest.approx(math.sqrt(math.pi), rel=1e-14)
    assert (w * x**4).sum() == pytest.approx(0.75 * math.sqrt(math.pi), rel=1e-13)


def test_quadrature_spec_minimum_nodes():
    with pytest.raises(ValueError):
        QuadratureSpec(nodes_per_dim=5)


def test_gaussian_prior_without_data_integrates_to_one():
    model = GlmmModel("poisson", None, np.zeros((0, 2)), None, np.diag([0.5, 2.0]), np.zeros(0))
    assert abs(exact_loglik_two_level(model).value) < 1e-14
    assert abs(exact_loglik_tensor(model).value) < 1e-14


def test_effects_without_data_integrate_to_one():
    # one observation with no random effect: y = 0, eta = 0 contributes b(0) = 1
    model = GlmmModel("poisson", None, np.zeros((1, 2)), None, np.diag([0.5, 2.0]), [0.0])
    assert exact_loglik_two_level(model).value == pytest.approx(-1.0, abs=1e-13)
    assert exact_loglik_tensor(model).value == pytest.approx(-1.0, abs=1e-12)


def test_quadratic_tensor_exact():
    g = QuadraticG([[2.0, 0.4, 0.0], [0.4, 1.0, 0.1], [0.0, 0.1, 3.0]], c=0.3, center=[1.0, 0.0, -1.0])
    assert exact_log_integral_tensor(g).value == pytest.approx(g.exact_log_integral(), abs=1e-12)


def test_single_poisson_zero_count_against_trapezoid():
    model = two_level_model("poisson", [0.0], [0], 1.0)
    g = build_g(model)
    grid = np.linspace(-10.0, 10.0, 200001)
    trap = math.log(np.trapezoid(np.exp(-g.values(grid[:, None])), grid))
    assert exact_loglik_two_level(model).value == pytest.approx(trap, abs=1e-10)
    assert log_integral_1d(g).value == pytest.approx(trap, abs=1e-10)


@pytest.mark.parametrize("n", [5.0, 80.0, 1000.0])
def test_stirling_against_log_gamma(n):
    g = ExpLinearG(n)
    res = log_integral_1d(g)
    assert res.value == pytest.approx(g.exact_log_integral(), abs=1e-12)
    assert res.error_estimate < 1e-11


@pytest.mark.parametrize("n", [1.0, 2.0])
def test_error_estimate_covers_skewed_integrands(n):
    # exp(-g) has an exponential left tail, which Gauss-Hermite resolves slowly
    g = ExpLinearG(n)
    res = log_integral_1d(g)
    assert abs(res.value - g.exact_log_integral()) <= res.error_estimate


def test_non_adaptive_rule_agrees_for_a_well_centred_case():
    g = ExpLinearG(3.0)
    res = log_integral_1d(g, QuadratureSpec(nodes_per_dim=80, adaptive=False))
    assert res.value == pytest.approx(g.exact_log_integral(), abs=1e-8)


def test_per_cluster_against_scipy_quad():
    model = simulate_two_level("bernoulli", [6, 3], 1.5, -0.3, np.random.default_rng(0))
    g = build_g(model)
    cluster = np.repeat([0, 1], [6, 3])
    total = 0.0
    for j in range(2):
        rows = cluster == j
        sub = build_g(two_level_model("bernoulli", model.y[rows], np.zeros(rows.sum(), dtype=int), 1.5,
                                      X=np.ones((rows.sum(), 1)), beta=[-0.3]))
        val, _ = integrate.quad(lambda u: math.exp(-sub.value([u])), -30, 30, epsabs=0, epsrel=1e-13, limit=200)
        total += math.log(val)
    assert exact_loglik_two_level(model).value == pytest.approx(total, abs=1e-10)
    assert g.dim == 2


def test_tensor_matches_per_cluster_three_dim():
    model = simulate_two_level("poisson", [5, 8, 3], 1.0, 0.5, np.random.default_rng(1))
    factor = exact_loglik_two_level(model).value
    joint = exact_loglik_tensor(model, factorize=False)
    assert joint.value == pytest.approx(factor, abs=1e-8)
    assert joint.reliable


def test_gaussian_lmm_closed_form():
    rng = np.random.default_rng(2)
    h = Hierarchy.from_groups([[0, 1], [2]], [4, 3, 5])
    mm = simulate_multilevel("gaussian", h, [0.7, 0.4], 1.2, rng)
    model = reparameterize_multilevel(mm)
    cov = model.Z @ model.Sigma @ model.Z.T + np.diag(model.weights)
    exact = multivariate_normal(model.offset, cov).logpdf(model.y)
    # g leaves out the data-only terms y^2 / (2 a) and log(2 pi a) / 2
    omitted = np.sum(model.y**2 / (2 * model.weights) + 0.5 * np.log(2 * math.pi * model.weights))
    assert exact_loglik_tensor(model).value - omitted == pytest.approx(exact, abs=1e-9)


def test_three_level_refinement_stable():
    h = Hierarchy.from_groups([[0, 1], [2, 3]], [6, 6, 6, 6])
    mm = simulate_multilevel("poisson", h, [1.0, 1.0], 1.0, np.random.default_rng(3))
    res = exact_loglik_tensor(reparameterize_multilevel(mm))
    assert res.error_estimate < 1e-8 and res.reliable
    assert res.refined_nodes == 30


def test_original_and_collapsed_agree():
    h = Hierarchy.from_groups([[0, 1], [2, 3]], [5, 7, 4, 6])
    mm = simulate_multilevel("bernoulli", h, [0.8, 0.6], 0.2, np.random.default_rng(4))
    collapsed = exact_loglik_tensor(reparameterize_multilevel(mm)).value
    original = exact_loglik_tensor(original_model(mm)).value
    assert original == pytest.approx(collapsed, abs=1e-8)


def test_factorized_tensor_matches_per_cluster_beyond_cap_of_blocks():
    model = simulate_two_level("poisson", [4] * 6, 0.5, 0.0, np.random.default_rng(5))
    assert exact_loglik_tensor(model).value == pytest.approx(exact_loglik_two_level(model).value, abs=1e-10)


def test_infeasible_cases():
    model = simulate_two_level("poisson", [3] * 7, 1.0, 0.0, np.random.default_rng(6))
    with pytest.raises(OracleInfeasible):
        exact_loglik_tensor(model)
    with pytest.raises(OracleInfeasible):
        exact_log_integral_tensor(build_g(model))
    h = Hierarchy.from_groups([[0, 1]], [3, 3])
    mm = simulate_multilevel("poisson", h, [1.0, 1.0], 0.0, np.random.default_rng(7))
    with pytest.raises(OracleInfeasible):
        exact_loglik_two_level(reparameterize_multilevel(mm))
    with pytest.raises(OracleInfeasible):
        log_integral_1d(build_g(model))
    with pytest.raises(OracleInfeasible):
        exact_log_integral_tensor(ExpLinearG(4.0), QuadratureSpec(nodes_per_dim=30))
