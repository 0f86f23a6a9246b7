import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twosys.errors import ConvergenceError, DataError, ImproperPosteriorError
from twosys.linalg import random_spd
from twosys.targets import (
    FunctionTarget,
    MomentSpec,
    RescaledTarget,
    find_mode,
    funnel_moment,
    funnel_raw_moment,
    gaussian_target,
    gradient_error,
    hessian_diag,
    neals_funnel,
    rescale,
    student_t_target,
)


# ------------------------------------------------------------------ Gaussian


def test_gaussian_origin():
    t = gaussian_target(np.eye(2))
    lp, g = t.logp_and_grad(np.zeros(2))
    assert lp == 0.0
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_gaussian_1d():
    t = gaussian_target([[2.0]])
    lp, g = t.logp_and_grad(np.array([1.0]))
    assert lp == pytest.approx(-1.0)
    np.testing.assert_allclose(g, [-2.0])


def test_gaussian_correlated():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    t = gaussian_target(A)
    x = np.array([1.0, 1.0])
    assert t.log_density(x) == pytest.approx(-0.5 * x @ A @ x) == pytest.approx(-3.0)
    np.testing.assert_allclose(t.grad_log_density(x), -A @ x)
    np.testing.assert_allclose(t.moments.cov, np.linalg.inv(A), rtol=1e-12)
    np.testing.assert_array_equal(t.moments.mean, [0.0, 0.0])


def test_gaussian_batch_shapes():
    t = gaussian_target(random_spd(3, 1, 2, 0))
    X = np.ones((4, 5, 3))
    lp, g = t.logp_and_grad(X)
    assert lp.shape == (4, 5) and g.shape == (4, 5, 3)


def test_gaussian_precision_norm_moments():
    # ||A^{1/2} x|| is chi-distributed with d degrees of freedom
    t = gaussian_target(random_spd(5, 0.5, 3.0, 1))
    rng = np.random.default_rng(0)
    L = np.linalg.cholesky(t.moments.cov)
    x = rng.standard_normal((200_000, 5)) @ L.T
    (spec,) = t.moments.bias_specs
    r = spec.f(x)
    assert r.mean() == pytest.approx(spec.expectation, rel=3e-3)
    assert r.var() == pytest.approx(spec.variance, rel=2e-2)


# ---------------------------------------------------------------- Student-t


def test_student_t_origin():
    t = student_t_target(random_spd(3, 1, 2, 0), 4.0)
    lp, g = t.logp_and_grad(np.zeros(3))
    assert lp == 0.0
    np.testing.assert_array_equal(g, np.zeros(3))


def test_student_t_scalar():
    t = student_t_target([[1.0]], 4.0)
    lp, g = t.logp_and_grad(np.array([2.0]))
    assert lp == pytest.approx(-2.5 * math.log(2.0))
    np.testing.assert_allclose(g, [-1.25])


def test_student_t_covariance():
    A = random_spd(3, 1.0, 4.0, 2)
    t = student_t_target(A, 5.0)
    np.testing.assert_allclose(t.moments.cov, 5.0 / 3.0 * np.linalg.inv(A), rtol=1e-12)


def test_student_t_needs_nu_above_two():
    with pytest.raises(DataError):
        student_t_target(np.eye(2), 2.0)


def test_student_t_norm_moment_monte_carlo():
    nu, d = 5.0, 4
    t = student_t_target(np.eye(d), nu)
    rng = np.random.default_rng(1)
    z = rng.standard_normal((400_000, d))
    w = rng.chisquare(nu, size=(400_000, 1))
    x = z * np.sqrt(nu / w)
    (spec,) = t.moments.bias_specs
    r = spec.f(x)
    assert r.mean() == pytest.approx(spec.expectation, rel=5e-3)
    assert (r**2).mean() == pytest.approx(d * nu / (nu - 2), rel=2e-2)


# ------------------------------------------------------------------- funnel


def test_funnel_origin_gradient():
    t = neals_funnel(10, 3.0)
    lp, g = t.logp_and_grad(np.zeros(10))
    assert lp == 0.0
    assert g[0] == pytest.approx(-4.5)
    np.testing.assert_array_equal(g[1:], 0.0)


def test_funnel_plug_in():
    d = 6
    t = neals_funnel(d, 2.0)
    z = np.zeros(d)
    z[1] = 2.0
    assert t.grad_log_density(z)[0] == pytest.approx(-(d - 1) / 2 + 2.0)
    assert t.log_density(z) == pytest.approx(-2.0)


def test_funnel_reference_moments():
    t = neals_funnel(5, 1.5)
    np.testing.assert_allclose(np.diag(t.moments.cov), [2.25] + [math.exp(1.125)] * 4)
    assert len(t.moments.bias_specs) == 5


def test_funnel_needs_two_dims():
    with pytest.raises(DataError):
        neals_funnel(1, 1.0)


def test_funnel_moment_values():
    assert funnel_moment(1, 3.0) == pytest.approx(math.exp(4.5)) == pytest.approx(90.0171, rel=1e-6)
    assert funnel_moment(2, 3.0) == pytest.approx(3 * math.exp(18.0))
    assert funnel_moment(1, 1e-8) == pytest.approx(1.0)
    assert funnel_raw_moment(3, 2.0) == 0.0
    assert funnel_raw_moment(4, 2.0) == funnel_moment(2, 2.0)


@given(st.integers(1, 5), st.floats(0.0, 3.0), st.floats(0.01, 1.0))
def test_funnel_moment_increasing_and_normal_limit(k, s, ds):
    assert funnel_moment(k, s + ds) > funnel_moment(k, s)
    double_factorial = math.prod(range(1, 2 * k, 2))
    assert funnel_moment(k, 0.0) == pytest.approx(double_factorial)


def test_funnel_y_second_moment_monte_carlo():
    sigma = 1.0
    rng = np.random.default_rng(2)
    x = sigma * rng.standard_normal(1_000_000)
    y = np.exp(x / 2) * rng.standard_normal(1_000_000)
    assert (y**2).mean() == pytest.approx(funnel_moment(1, sigma), rel=1e-2)


# ----------------------------------------------------------------- gradients


@pytest.mark.parametrize(
    "target",
    [
        gaussian_target(random_spd(6, 0.01, 100.0, 3)),
        student_t_target(random_spd(6, 0.01, 100.0, 4), 4.0),
        neals_funnel(6, 3.0),
        neals_funnel(3, 1.5),
    ],
    ids=["gaussian", "student-t", "funnel-6", "funnel-3"],
)
def test_gradients_match_finite_differences(target):
    rng = np.random.default_rng(5)
    for _ in range(50):
        x = rng.standard_normal(target.dim)
        assert gradient_error(target, x) <= 1e-5


def test_logp_and_grad_agree_with_single_outputs():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((7, 4))
    for t in (gaussian_target(random_spd(4, 1, 3, 0)), student_t_target(random_spd(4, 1, 3, 0), 6.0), neals_funnel(4, 2.0)):
        lp, g = t.logp_and_grad(X)
        np.testing.assert_allclose(lp, t.log_density(X), rtol=1e-14)
        np.testing.assert_allclose(g, t.grad_log_density(X), rtol=1e-14)


def test_moment_spec_needs_positive_variance():
    with pytest.raises(DataError):
        MomentSpec("bad", lambda x: x, 0.0, 0.0)


# ---------------------------------------------------------------- mode search


@pytest.mark.parametrize(
    "make, eig_min",
    [(lambda: gaussian_target(random_spd(5, 0.01, 100, 0)), 0.01),
     (lambda: student_t_target(random_spd(5, 0.1, 10, 1), 4.0), 0.1)],
    ids=["gaussian", "student-t"],
)
def test_find_mode_zero_from_random_starts(make, eig_min):
    t = make()
    rng = np.random.default_rng(7)
    for _ in range(10):
        x0 = 3 * rng.standard_normal(t.dim)
        g0 = np.linalg.norm(t.grad_log_density(x0))
        m = find_mode(t, x0)
        g = np.linalg.norm(t.grad_log_density(m))
        assert g <= 1e-6 * max(1.0, g0)
        # both gradients are c(x) A x with c >= 1 near the origin, so |m| <= |grad| / lambda_min
        assert np.linalg.norm(m) <= g / eig_min * (1 + 1e-6)


def test_find_mode_funnel_against_grid():
    t = neals_funnel(2, 1.0)
    m = find_mode(t, np.array([1.0, 1.0]))
    g = np.linspace(-3, 3, 1201)
    X, Y = np.meshgrid(g, g, indexing="ij")
    lp = t.log_density(np.stack([X, Y], axis=-1))
    i, j = np.unravel_index(np.argmax(lp), lp.shape)
    np.testing.assert_allclose(m, [g[i], g[j]], atol=6e-3)
    np.testing.assert_allclose(m, t.mode(), atol=1e-6)


def test_find_mode_improper_posterior():
    # log density x -> x^3 grows without bound; gradient 3x^2 increases monotonically
    t = FunctionTarget(1, lambda x: x[..., 0] ** 3, lambda x: 3 * x**2)
    with pytest.raises((ImproperPosteriorError, ConvergenceError)):
        find_mode(t, np.array([1.0]), max_iter=200)


def test_find_mode_improper_is_flagged_as_improper():
    t = FunctionTarget(1, lambda x: np.exp(x[..., 0]), lambda x: np.exp(x))
    with pytest.raises(ImproperPosteriorError):
        find_mode(t, np.array([0.0]))


# ------------------------------------------------------------ Hessian, rescale


def test_hessian_diag_gaussian():
    t = gaussian_target(np.diag([4.0, 25.0]))
    np.testing.assert_allclose(hessian_diag(t, np.array([0.3, -2.0])), [4.0, 25.0], rtol=1e-9)


def test_hessian_diag_funnel_origin():
    t = neals_funnel(2, 1.0)
    np.testing.assert_allclose(hessian_diag(t, np.zeros(2)), [1.0, 1.0], atol=1e-7)


def test_hessian_diag_second_order_convergence():
    # log rho = -x^4 / 4 - x^2 / 2 + x^3 / 3: -d2 = 3x^2 + 1 - 2x
    t = FunctionTarget(1, lambda x: -x[..., 0] ** 4 / 4 - x[..., 0] ** 2 / 2 + x[..., 0] ** 3 / 3,
                       lambda x: -(x**3) - x + x**2)
    x = np.array([0.7])
    exact = 3 * 0.49 + 1 - 1.4
    e1 = abs(hessian_diag(t, x, fd_step=1e-2)[0] - exact)
    e2 = abs(hessian_diag(t, x, fd_step=5e-3)[0] - exact)
    assert e2 == pytest.approx(e1 / 4, rel=0.05)


def test_rescale_diag_gaussian():
    t = gaussian_target(np.diag([4.0, 25.0]))
    r = rescale(t, np.zeros(2), eps=0.0)
    np.testing.assert_allclose(r.scales, [0.5, 0.2], rtol=1e-10)
    np.testing.assert_allclose(hessian_diag(r, np.zeros(2)), [1.0, 1.0], atol=1e-8)


def test_rescale_isotropic_is_identity():
    t = gaussian_target(np.eye(3))
    r = rescale(t, np.zeros(3), eps=0.0)
    np.testing.assert_allclose(r.scales, 1.0, rtol=1e-10)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(r.log_density(x), t.log_density(x), rtol=1e-9)


def test_rescale_clamps_negative_curvature():
    t = FunctionTarget(1, lambda x: x[..., 0] ** 2, lambda x: 2 * x)  # -d2 = -2 < 0
    r = rescale(t, np.zeros(1), eps=0.25)
    np.testing.assert_allclose(r.scales, [2.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=3, max_size=3), st.integers(0, 1000))
def test_rescaled_density_and_chain_rule(a, seed):
    base = neals_funnel(3, 1.5)
    r = RescaledTarget(base, np.array(a))
    z = np.random.default_rng(seed).standard_normal((5, 3))
    # no Jacobian term: exact equality
    np.testing.assert_array_equal(r.log_density(z), base.log_density(np.array(a) * z))
    np.testing.assert_allclose(r.grad_log_density(z), np.array(a) * base.grad_log_density(np.array(a) * z), rtol=1e-15)
    np.testing.assert_allclose(r.pull_back(r.push_forward(z)), z, rtol=1e-15)


def test_rescaled_pull_back_reproduces_moments():
    A = np.array([[4.0, 1.0], [1.0, 25.0]])
    base = gaussian_target(A)
    r = rescale(base, np.zeros(2))
    # exact draws in z-space: z = x / a
    rng = np.random.default_rng(3)
    n = 50_000
    x = rng.standard_normal((n, 2)) @ np.linalg.cholesky(base.moments.cov).T
    z = r.push_forward(x)
    back = r.pull_back(z)
    cov = np.cov(back.T)
    se = np.sqrt((base.moments.cov**2 + np.outer(np.diag(base.moments.cov), np.diag(base.moments.cov))) / n)
    assert np.all(np.abs(cov - base.moments.cov) <= 3 * se)
    assert np.all(np.abs(back.mean(axis=0)) <= 3 * np.sqrt(np.diag(base.moments.cov) / n))
