import numpy as np
import pytest

from ssx.continuous_sets import (
    LatticeGraph,
    SafetyIndicatorConfig,
    arrival_indicator,
    expand_lattice,
    immediate_indicator,
    scale_beta,
)
from ssx.gp import KernelParams, fit, posterior
from ssx.moments import GaussianBelief, moment_matched_posterior
from ssx.statesets import StateSet
from ssx.transitions import GaussianTransition

CFG = SafetyIndicatorConfig(
    beta=2.0, beta_min=1.45, beta_scale=0.99, threshold=4.0, lipschitz=1.75, d_max=0.5
)


def test_adjusted_threshold_value():
    assert CFG.adjusted_threshold == pytest.approx(3.5625)
    loose = SafetyIndicatorConfig(2.0, 1.45, 0.99, 4.0, 1.75, 0.0)
    assert loose.adjusted_threshold == 4.0


def gp_with_moments(mean, var):
    """One-point GP engineered to give (mean, var) at the query x=0."""
    # posterior at the training point with noise: mean = k/(k+s) y, var = a(1 - a/(a+s))
    # easier: pick data far away so the prior applies, then shift prior mean
    p = KernelParams(max(var, 1e-8), [1.0], 1e-10)
    m = fit([[100.0]], [0.0], p, prior_mean=mean)
    pm, pv = posterior(m, [0.0])
    assert pm == pytest.approx(mean, abs=1e-9)
    assert pv == pytest.approx(var, abs=1e-7)
    return m


def test_immediate_indicator_hand_values():
    # mu=2, sigma=0.5, beta=2: upper 3.0 <= 3.5625 -> pessimistic true
    m = gp_with_moments(2.0, 0.25)
    assert immediate_indicator(m, [0.0], CFG, "pessimistic")
    # mu=3.5, sigma=1: upper 5.5 -> false; lower 1.5 -> optimistic true
    m2 = gp_with_moments(3.5, 1.0)
    assert not immediate_indicator(m2, [0.0], CFG, "pessimistic")
    assert immediate_indicator(m2, [0.0], CFG, "optimistic")


def test_zero_variance_collapses_modes():
    m = gp_with_moments(3.0, 0.0)
    for mode in ("pessimistic", "optimistic"):
        assert immediate_indicator(m, [0.0], CFG, mode) == (3.0 <= 3.5625)
    m2 = gp_with_moments(3.6, 0.0)
    for mode in ("pessimistic", "optimistic"):
        assert not immediate_indicator(m2, [0.0], CFG, mode)


def test_arrival_indicator_zero_sigma_equals_immediate():
    rng = np.random.default_rng(0)
    p = KernelParams(8.0, [1.5], 0.001)
    m = fit(rng.uniform(-2, 2, size=(6, 1)), rng.uniform(0, 3, 6), p)
    for x in [-1.0, 0.0, 0.5, 3.0]:
        for mode in ("pessimistic", "optimistic"):
            assert arrival_indicator(
                m, [x], np.zeros((1, 1)), CFG, mode
            ) == immediate_indicator(m, [x], CFG, mode)


def test_arrival_pessimistic_false_next_to_steep_rise():
    # flat low region for x < 0, steeply rising samples just beyond: the
    # deterministic point looks safe while the arrival distribution overlaps
    # the high-mean territory
    p = KernelParams(8.0, [0.5], 0.001)
    X = np.array([[-2.0], [-1.5], [-1.0], [-0.5], [0.0], [0.5], [1.0]])
    y = np.array([0.1, 0.1, 0.1, 0.2, 1.0, 6.0, 12.0])
    m = fit(X, y, p)
    target = [-0.25]
    assert immediate_indicator(m, target, CFG, "pessimistic")
    sig = np.array([[0.25]])
    assert not arrival_indicator(m, target, sig, CFG, "pessimistic")
    # Monte-Carlo check that the moment-matched mean really is higher
    mm, vv = moment_matched_posterior(m, GaussianBelief(target, sig))
    pm, _ = posterior(m, target)
    assert mm > pm


def test_arrival_true_deep_inside_sampled_low_region():
    rng = np.random.default_rng(1)
    p = KernelParams(8.0, [1.5], 0.001)
    X = rng.uniform(-3, 3, size=(40, 1))
    m = fit(X, rng.uniform(0.0, 0.3, 40), p)
    assert arrival_indicator(m, [0.0], np.array([[0.05]]), CFG, "pessimistic")


def make_lattice(extent=3.0, step=0.5, sigma=0.01):
    model = GaussianTransition(
        expected_fn=lambda x, a: np.asarray(x, dtype=float)
        + np.array([[0, step], [0, -step], [-step, 0], [step, 0]])[a],
        cov_fn=lambda x, a: sigma * np.eye(2),
        actions=[0, 1, 2, 3],
    )
    bounds = lambda q: bool(np.all(np.abs(q) <= extent))
    graph = LatticeGraph.build(np.zeros(2), model, bounds)
    return model, graph


def test_lattice_spatial_hash_dedup():
    _, graph = make_lattice()
    n = graph.n
    assert n == 13 * 13
    d = np.max(
        np.abs(graph.positions[:, None, :] - graph.positions[None, :, :]), axis=2
    )
    d[np.diag_indices(n)] = np.inf
    assert d.min() >= graph.step / 2


def test_expand_lattice_no_edges_pass():
    model, graph = make_lattice()
    p = KernelParams(8.0, [1.5, 1.5], 0.001)
    gp = fit([[0.0, 0.0]], [5.0], p, prior_mean=5.0)  # everything unsafe
    root_safe = StateSet.from_indices(graph.n, [graph.root])
    out = expand_lattice(gp, graph, root_safe, CFG, model)
    assert set(out.pessimistic.indices()) == {graph.root}


def test_expand_lattice_full_cover_and_ordering():
    model, graph = make_lattice(sigma=0.01)
    rng = np.random.default_rng(2)
    p = KernelParams(8.0, [1.5, 1.5], 0.001)
    X = rng.uniform(-3, 3, size=(80, 2))
    gp = fit(X, rng.uniform(0, 0.2, 80), p)
    root_safe = StateSet.from_indices(graph.n, [graph.root])
    out = expand_lattice(gp, graph, root_safe, CFG, model)
    assert out.pessimistic.count() == graph.n
    assert out.pessimistic.issubset(out.optimistic)


def test_expand_lattice_monotone_in_beta():
    model, graph = make_lattice(sigma=0.05)
    rng = np.random.default_rng(3)
    p = KernelParams(8.0, [1.5, 1.5], 0.001)
    X = rng.uniform(-3, 3, size=(25, 2))
    gp = fit(X, rng.uniform(0.5, 3.4, 25), p)
    root_safe = StateSet.from_indices(graph.n, [graph.root])
    prev = None
    for beta in (2.5, 2.0, 1.45):
        cfg = SafetyIndicatorConfig(beta, 1.0, 0.99, 4.0, 1.75, 0.5)
        out = expand_lattice(gp, graph, root_safe, cfg, model).pessimistic
        if prev is not None:
            assert prev.issubset(out)
        prev = out


def test_scale_beta_values():
    cfg = SafetyIndicatorConfig(2.0, 1.45, 0.99, 4.0, 1.75, 0.5)
    assert scale_beta(cfg).beta == pytest.approx(1.98)
    floor = SafetyIndicatorConfig(1.45, 1.45, 0.99, 4.0, 1.75, 0.5)
    assert scale_beta(floor).beta == pytest.approx(1.45)
    ident = SafetyIndicatorConfig(2.0, 1.45, 1.0, 4.0, 1.75, 0.5)
    assert scale_beta(ident).beta == pytest.approx(2.0)


def test_arrival_converges_to_immediate_as_sigma_shrinks():
    rng = np.random.default_rng(4)
    p = KernelParams(8.0, [1.5], 0.001)
    m = fit(rng.uniform(-2, 2, size=(10, 1)), rng.uniform(0, 3, 10), p)
    x = [0.3]
    pm, pv = posterior(m, x)
    errs = []
    for eps in [1e-2, 1e-4, 1e-6]:
        mm, vv = moment_matched_posterior(m, GaussianBelief(x, [[eps]]))
        errs.append(max(abs(mm - pm), abs(vv - pv)))
    assert errs[0] > errs[1] > errs[2]
