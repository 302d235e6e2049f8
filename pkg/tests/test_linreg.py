import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.utils.estimator_checks import check_estimator

from randmask.concentration import masked_spectrum
from randmask.exceptions import InvalidInputError
from randmask.linalg import RngStream, Spectrum, gram_pinv_solve
from randmask.linreg import (
    GDConfig,
    MaskedLinearRegression,
    NoiseModel,
    RegressionProblem,
    gd_closed_form,
    gd_iterate,
    make_problem,
    masked_grad,
    masked_loss,
    min_norm_solution,
    solution_norm_bound,
    stability_threshold,
    top_eigenvector,
    verify_norm_bound,
)
from randmask.masking import Mask, gen_random_mask

EMPTY = np.zeros(2)
FULL = np.ones(2)


def _instance(seed, n, d, p=0.5):
    rng = RngStream(seed)
    prob = make_problem(n, d, rng.split(0))
    mask = gen_random_mask((d,), p, "bernoulli", rng.split(1))
    return prob, mask, rng.split(2)


# -- loss and gradient --------------------------------------------------------------


def test_loss_examples():
    zero = RegressionProblem(np.ones((2, 3)), np.zeros(2))
    assert masked_loss(zero, np.ones(3), np.zeros(3)) == 0.0
    prob = RegressionProblem([[1.0, 1.0]], [2.0])
    assert masked_loss(prob, FULL, [1.0, 1.0]) == 0.0
    assert masked_loss(prob, EMPTY, [3.0, -8.0]) == 2.0


def test_grad_examples():
    prob, _, _ = _instance(0, 3, 6)
    np.testing.assert_array_equal(masked_grad(prob, np.zeros(6), np.ones(6)), np.zeros(6))
    m = np.array([1.0, 0, 1, 1, 0, 1])
    w = gram_pinv_solve(prob.X * m, prob.y)
    assert np.abs(masked_grad(prob, m, w)).max() <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_grad_matches_finite_differences_and_is_sparse(seed):
    prob, mask, rng = _instance(seed, 3, 6)
    prob.w_tilde = rng.split(5).normal(6)
    w = rng.normal(6)
    g = masked_grad(prob, mask, w)
    h = 1e-6
    fd = np.array([(masked_loss(prob, mask, w + h * e) - masked_loss(prob, mask, w - h * e)) / (2 * h)
                   for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, atol=1e-6)
    assert np.all(g[mask.dense() == 0] == 0.0)


# -- gradient descent ------------------------------------------------------------------


def test_gd_trivial_cases():
    prob, mask, rng = _instance(1, 2, 4)
    w0 = rng.normal(4)
    res = gd_iterate(prob, mask, GDConfig(0.1, 0), w0)
    np.testing.assert_array_equal(res.w, w0)
    assert res.distance_from_init == 0.0 and len(res.losses) == 1
    res = gd_iterate(prob, np.zeros(4), GDConfig(0.1, 50), w0)
    np.testing.assert_array_equal(res.w, w0)


def test_gd_reaches_min_norm_loss():
    # convergence speed depends on the conditioning; this draw has cond(X) ~ 3
    prob, mask, _ = _instance(0, 2, 4, p=1.0)
    thr = stability_threshold(prob, mask)
    res = gd_iterate(prob, mask, GDConfig(0.5 * thr, 500))
    m = mask.dense()
    opt = masked_loss(prob, mask, gram_pinv_solve(prob.X * m, prob.residual_target))
    assert abs(res.losses[-1] - opt) <= 1e-10


def test_closed_form_examples():
    prob, mask, rng = _instance(3, 3, 8)
    w0 = rng.normal(8)
    cfg = GDConfig(0.5 * stability_threshold(prob, mask), 37)
    np.testing.assert_allclose(gd_closed_form(prob, mask, cfg, w0, 0), w0)
    wt = gd_iterate(prob, mask, GDConfig(cfg.eta, 37), w0).w
    assert np.linalg.norm(gd_closed_form(prob, mask, cfg, w0, 37) - wt) <= 1e-8 * (1 + np.linalg.norm(wt))


def test_closed_form_limit_is_min_norm():
    prob, mask, _ = _instance(4, 3, 8)
    cfg = GDConfig(0.9 * stability_threshold(prob, mask), 20_000)
    w_hat = min_norm_solution(prob, mask)
    np.testing.assert_allclose(gd_closed_form(prob, mask, cfg, np.zeros(8), 20_000), w_hat, atol=1e-8)
    np.testing.assert_allclose(gd_iterate(prob, mask, cfg).w, w_hat, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), extra=st.integers(0, 30),
       p=st.sampled_from([0.2, 0.5, 1.0]), t=st.integers(0, 200))
def test_closed_form_equals_iteration(seed, n, extra, p, t):
    d = n + extra
    prob, mask, rng = _instance(seed, n, d, p)
    thr = stability_threshold(prob, mask)
    eta = 0.9 * thr if math.isfinite(thr) else 0.1
    w0 = rng.normal(d)
    it = gd_iterate(prob, mask, GDConfig(eta, t, divergence_cap=math.inf), w0).w
    cf = gd_closed_form(prob, mask, GDConfig(eta, t), w0, t)
    assert np.linalg.norm(cf - it) <= 1e-8 * (1 + np.linalg.norm(it))


def test_stability_threshold_examples():
    prob = RegressionProblem(np.diag([1.0, 2.0]), [0.0, 0.0])
    assert stability_threshold(prob, np.array([1.0, 0.0])) == pytest.approx(4.0)
    assert stability_threshold(prob, EMPTY) == math.inf
    assert stability_threshold(RegressionProblem(np.eye(2), [0.0, 0.0]), FULL) == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(5))
def test_stability_dichotomy(seed):
    prob, mask, _ = _instance(seed, 4, 12, 0.75)
    thr = stability_threshold(prob, mask)
    stable = gd_iterate(prob, mask, GDConfig(0.99 * thr, 20_000))
    assert not stable.diverged
    assert np.all(np.diff(stable.losses) <= 1e-12)
    w0 = min_norm_solution(prob, mask) + top_eigenvector(prob, mask)
    unstable = gd_iterate(prob, mask, GDConfig(1.01 * thr, 1000), w0)
    assert unstable.diverged


# -- solution norm ----------------------------------------------------------------------


def test_norm_bound_examples():
    assert solution_norm_bound(Spectrum(np.array([1.0])), 1.0) == 1.0
    assert solution_norm_bound(Spectrum(np.array([4.0, 1.0])), 2.0) == pytest.approx(5.0)
    assert solution_norm_bound(Spectrum(np.array([4.0, 1.0])), 0.0) == 0.0


def test_norm_identity_noiseless():
    prob, mask, rng = _instance(5, 3, 10)
    w_star = rng.normal(10)
    rep = verify_norm_bound(prob, NoiseModel(w_star, 0.0), mask, 50, rng.split(1))
    assert rep.std_error <= 1e-12
    assert rep.mc_mean_sq_norm == pytest.approx(rep.signal_term, rel=1e-10)


def test_norm_identity_orthonormal_rows():
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 3)))
    prob = RegressionProblem(Q.T, np.zeros(3))
    rep = verify_norm_bound(prob, NoiseModel(np.zeros(6), 1.0), Mask.full((6,)), 10_000, RngStream(4))
    assert rep.exact_expectation == pytest.approx(3.0)
    assert abs(rep.mc_mean_sq_norm - 3.0) <= 3 * rep.std_error


def test_norm_identity_monte_carlo():
    prob, mask, rng = _instance(6, 3, 10)
    rep = verify_norm_bound(prob, NoiseModel(rng.normal(10), 1.0), mask, 10_000, rng.split(1))
    assert abs(rep.mc_mean_sq_norm - rep.exact_expectation) <= 3 * rep.std_error
    assert rep.mc_mean_sq_norm >= rep.bound - 3 * rep.std_error


def test_noise_term_grows_as_density_falls():
    means = []
    for p in (1.0, 0.5, 0.2, 0.1):
        vals = []
        for k in range(40):
            rng = RngStream(7).split(k)
            X = rng.normal((4, 60))
            mask = gen_random_mask((60,), p, "exact-count", rng.split(1))
            prob = RegressionProblem(X, np.zeros(4))
            vals.append(solution_norm_bound(masked_spectrum(prob.X, mask), 1.0))
        means.append(np.mean(vals))
    assert all(b >= a for a, b in zip(means, means[1:]))


# -- estimator -----------------------------------------------------------------------


def test_problem_validation_and_roundtrip():
    with pytest.raises(InvalidInputError):
        RegressionProblem(np.ones((2, 3)), np.ones(3))
    prob, _, _ = _instance(8, 2, 5)
    again = RegressionProblem.from_dict(prob.to_dict())
    np.testing.assert_array_equal(again.X, prob.X)
    np.testing.assert_array_equal(again.y, prob.y)


def test_estimator_solvers_agree():
    gen = np.random.default_rng(0)
    X, y = gen.normal(size=(5, 12)), gen.normal(size=5)
    gd = MaskedLinearRegression(p=0.5, solver="gd", steps=300, random_state=3).fit(X, y)
    cf = MaskedLinearRegression(p=0.5, solver="closed-form", steps=300, random_state=3).fit(X, y)
    np.testing.assert_allclose(gd.coef_, cf.coef_, atol=1e-8)
    mn = MaskedLinearRegression(p=0.5, solver="min-norm", random_state=3).fit(X, y)
    assert np.all(mn.coef_[mn.mask_.dense() == 0] == 0.0)
    np.testing.assert_allclose(mn.predict(X), y, atol=1e-8)
    assert len(gd.loss_curve_) == 301 and not gd.diverged_


def test_estimator_keeps_pretrained_weights_off_mask():
    gen = np.random.default_rng(1)
    X, y = gen.normal(size=(4, 10)), gen.normal(size=4)
    w_tilde = gen.normal(size=10)
    est = MaskedLinearRegression(p=0.3, solver="min-norm", w_tilde=w_tilde).fit(X, y)
    off = est.mask_.dense() == 0
    np.testing.assert_array_equal(est.coef_[off], w_tilde[off])


def test_estimator_sklearn_contract():
    check_estimator(MaskedLinearRegression(p=1.0, solver="min-norm"))
