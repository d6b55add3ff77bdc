import numpy as np
import pytest

from ssx.gp import KernelParams, fit, posterior, posterior_batch
from ssx.moments import (
    GaussianBelief,
    IsotropicMomentTable,
    moment_matched_posterior,
)


def _mc_oracle(model, belief, n_samples, rng, batches=20):
    """Monte-Carlo estimate of the predictive moments at an uncertain input.

    Samples query points from the belief, evaluates the exact GP
    posterior per sample, and combines with the law of total variance.
    Returns (mean, mean_se, var, var_se) with standard errors from
    batch means.
    """
    d = belief.dim
    L = np.linalg.cholesky(belief.cov + 1e-15 * np.eye(d))
    means_b, vars_b = [], []
    per = n_samples // batches
    for _ in range(batches):
        xs = belief.mean + rng.standard_normal(size=(per, d)) @ L.T
        mu, var = posterior_batch(model, xs)
        means_b.append(np.mean(mu))
        vars_b.append(np.mean(var) + np.var(mu))
    means_b = np.asarray(means_b)
    vars_b = np.asarray(vars_b)
    mean = float(np.mean(means_b))
    var = float(np.mean(vars_b))
    mean_se = float(np.std(means_b, ddof=1) / np.sqrt(batches))
    var_se = float(np.std(vars_b, ddof=1) / np.sqrt(batches))
    return mean, mean_se, var, var_se


def test_zero_covariance_equals_posterior():
    p = KernelParams(2.0, [0.8, 1.2], 0.05)
    rng = np.random.default_rng(0)
    m = fit(rng.normal(size=(7, 2)), rng.normal(size=7), p, prior_mean=0.4)
    for _ in range(5):
        x = rng.normal(size=2)
        mm, vv = moment_matched_posterior(m, GaussianBelief(x, np.zeros((2, 2))))
        pm, pv = posterior(m, x)
        assert mm == pytest.approx(pm, abs=1e-8)
        assert vv == pytest.approx(pv, abs=1e-8)


def test_one_point_monte_carlo_oracle():
    p = KernelParams(1.0, [1.0], 0.1)
    m = fit([[0.0]], [1.0], p)
    belief = GaussianBelief([0.0], [[1.0]])
    mean, var = moment_matched_posterior(m, belief)
    rng = np.random.default_rng(1)
    mc_mean, mean_se, mc_var, var_se = _mc_oracle(m, belief, 10_000_000, rng)
    assert abs(mean - mc_mean) <= 3 * mean_se
    assert abs(var - mc_var) <= 3 * var_se


def test_random_2d_monte_carlo_oracle():
    rng = np.random.default_rng(2)
    p = KernelParams(2.0, [0.9, 1.3], 0.05)
    X = rng.normal(size=(5, 2))
    m = fit(X, rng.normal(size=5), p, prior_mean=0.25)
    A = rng.normal(size=(2, 2)) * 0.6
    belief = GaussianBelief(rng.normal(size=2) * 0.5, A @ A.T)
    mean, var = moment_matched_posterior(m, belief)
    mc_mean, mean_se, mc_var, var_se = _mc_oracle(m, belief, 2_000_000, rng)
    assert abs(mean - mc_mean) <= 3 * mean_se
    assert abs(var - mc_var) <= 3 * var_se


def test_small_covariance_limit_converges():
    rng = np.random.default_rng(3)
    p = KernelParams(8.0, [1.5], 0.001)
    m = fit(rng.uniform(-2, 2, size=(6, 1)), rng.normal(size=6), p)
    x = np.array([0.3])
    pm, pv = posterior(m, x)
    errs = []
    for eps in [1e-2, 1e-4, 1e-6]:
        mm, vv = moment_matched_posterior(m, GaussianBelief(x, [[eps]]))
        errs.append(max(abs(mm - pm), abs(vv - pv)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-4  # C * 1e-6 with the empirical C well below 100


def test_fast_isotropic_table_matches_general():
    rng = np.random.default_rng(4)
    p = KernelParams(3.0, [0.7, 0.7], 0.1)
    m = fit(rng.normal(size=(12, 2)), rng.normal(size=12), p, prior_mean=-0.3)
    sigma_sq = 0.23
    table = IsotropicMomentTable(m, sigma_sq)
    pts = rng.normal(size=(25, 2)) * 2
    means_f, vars_f = table.query(pts)
    for i, pt in enumerate(pts):
        mg, vg = moment_matched_posterior(
            m, GaussianBelief(pt, sigma_sq * np.eye(2))
        )
        assert means_f[i] == pytest.approx(mg, abs=1e-9)
        assert vars_f[i] == pytest.approx(vg, abs=1e-9)


def test_far_query_moments_stable():
    p = KernelParams(396.4, [0.025], 0.25)
    rng = np.random.default_rng(5)
    m = fit(rng.uniform(0, 0.2, size=(20, 1)), rng.uniform(0, 20, 20), p)
    belief = GaussianBelief([5.0], [[2e-4]])
    mean, var = moment_matched_posterior(m, belief)
    assert np.isfinite(mean) and np.isfinite(var)
    assert mean == pytest.approx(0.0, abs=1e-6)
    assert var == pytest.approx(396.4, rel=1e-6)
