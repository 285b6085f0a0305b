import math

import numpy as np
import pytest

from blocksolve.blockcore import BlockDistribution, BlockPartition, UniformStream
from blocksolve.diagnostics import (
    EnumerationCapExceeded,
    LyapunovArcog,
    LyapunovRcog,
    arcog_descent_margin,
    decile_trend,
    exact_conditional_step,
    fit_rate_slope,
    rcog_descent_margin,
    residual_metrics,
    summable_checks,
)
from blocksolve.operators import make_separable_cocoercive, random_monotone_linear, random_separable_cocoercive
from blocksolve.solvers import (
    ArcogDirectSolver,
    RcogParams,
    RcogSolver,
    arcog_constants,
    arcog_step_direct,
    default_arcog_schedule,
    derive_rcog_params,
    rcog_step,
)


@pytest.fixture
def mono(rng):
    G = random_monotone_linear(BlockPartition.uniform(4, 12), rng, separable=True)
    dist = BlockDistribution.uniform(4)
    return G, dist, derive_rcog_params(1.0, 0.0, G.L, dist)


def test_expectation_of_constant(mono, rng):
    G, dist, prm = mono
    x = rng.standard_normal(12)
    assert exact_conditional_step(rcog_step, x, x, G, prm, dist, lambda a, b: 3.5) == pytest.approx(3.5, rel=1e-15)


def test_single_block_expectation_is_deterministic():
    G = make_separable_cocoercive(BlockPartition((2,)), [np.eye(2)], np.zeros(2))
    dist = BlockDistribution.uniform(1)
    prm = RcogParams(1.0, 0.1, 0.2, 0.0, 0.5, 1.0)
    x, xp = np.array([1.0, 2.0]), np.array([0.5, 0.0])
    f = lambda a, b: float(a @ a)
    ref = f(rcog_step(x, xp, G, prm, dist, 0), x)
    assert exact_conditional_step(rcog_step, x, xp, G, prm, dist, f) == ref


def test_enumeration_cap(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(65, 65), rng)
    dist = BlockDistribution.uniform(65)
    prm = derive_rcog_params(1.0, 0.0, G.L, dist)
    with pytest.raises(EnumerationCapExceeded):
        exact_conditional_step(rcog_step, np.zeros(65), np.zeros(65), G, prm, dist, lambda a, b: 0.0)


def test_expectation_matches_monte_carlo(mono, rng):
    G, dist, prm = mono
    x, xp = rng.standard_normal(12), rng.standard_normal(12)
    g_prev_next = G.eval_full(x)
    f = lambda a, b: LyapunovRcog.evaluate(a, b, G, prm, g_prev=g_prev_next).value
    exact = exact_conditional_step(rcog_step, x, xp, G, prm, dist, f)
    per_block = np.array([f(rcog_step(x, xp, G, prm, dist, i), x) for i in range(4)])
    draws = rng.integers(0, 4, 10 ** 6)
    samples = per_block[draws]
    sigma = samples.std() / math.sqrt(len(samples))
    assert abs(samples.mean() - exact) <= 4 * sigma


def test_rcog_margin_zero_at_solution(mono):
    G, dist, prm = mono
    m, P = rcog_descent_margin(G.x_star, G.x_star, G, prm, dist)
    assert abs(m) <= 1e-14 and P == 0.0


def test_rcog_margin_scalar_og():
    G = make_separable_cocoercive(BlockPartition((1,)), [np.eye(1)], np.zeros(1))
    dist = BlockDistribution.uniform(1)
    prm = derive_rcog_params(1.0, 0.0, G.L, dist)
    m, _ = rcog_descent_margin(np.ones(1), np.ones(1), G, prm, dist)
    assert m <= 0


def test_rcog_margin_along_run(mono, rng):
    G, dist, prm = mono
    s = RcogSolver(G, G.x_star + rng.standard_normal(12), prm, dist)
    stream = UniformStream(4)
    for _ in range(500):
        m, P = rcog_descent_margin(s.current(), s.previous(), G, prm, dist)
        assert m <= 1e-12 * (1 + P)
        s.step(stream.next_block(dist))


@pytest.fixture
def coco(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(8, 24), rng)
    dist = BlockDistribution.uniform(8)
    sched = default_arcog_schedule(G)
    return G, dist, sched, sched.default_omega(dist)


def test_arcog_margin_along_run(coco, rng):
    G, dist, sched, omega = coco
    s = ArcogDirectSolver(G, G.x_star + rng.standard_normal(24), sched, omega, dist)
    stream = UniformStream(9)
    for k in range(500):
        m, P = arcog_descent_margin(s.current(), s.previous(), G, sched, omega, dist, k=k)
        assert m <= 1e-12 * (1 + P)
        assert P >= 0
        s.step(stream.next_block(dist))


def test_arcog_margin_fixed_point(coco):
    G, dist, sched, omega = coco
    m, P = arcog_descent_margin(G.x_star, G.x_star, G, sched, omega, dist, k=3)
    assert abs(m) <= 1e-14 and P == 0.0


def test_arcog_initial_potential_bound(coco, rng):
    G, dist, sched, omega = coco
    C = arcog_constants(sched.nu, omega, sched.beta, G.beta_bar, dist)
    for _ in range(20):
        x0 = G.x_star + 3 * rng.standard_normal(24)
        P0 = LyapunovArcog.evaluate(x0, x0, G, sched, omega, 0).value
        e = x0 - G.x_star
        assert P0 <= 2 * (1 + omega * C.Lambda0) * float(e @ e)


def test_arcog_direct_via_enumeration_accepts_tuple(coco, rng):
    G, dist, sched, omega = coco
    x = rng.standard_normal(24)
    val = exact_conditional_step(arcog_step_direct, x, x, G, (sched, omega), dist, lambda a, b: 1.0, k=0)
    assert val == pytest.approx(1.0)
    with pytest.raises(ValueError):
        exact_conditional_step(arcog_step_direct, x, x, G, (sched, omega), dist, lambda a, b: 1.0)


def test_residual_metrics_examples():
    G = make_separable_cocoercive(BlockPartition((2,)), [np.eye(2)], np.zeros(2))
    r = residual_metrics(np.array([3.0, 4.0]), np.array([3.0, 3.0]), G)
    assert (r.res_sq, r.step_sq, r.dist_sq) == (25.0, 1.0, 25.0)
    r0 = residual_metrics(np.zeros(2), np.ones(2), G)
    assert r0.res_sq == 0.0 and r0.dist_sq == 0.0


def test_fit_rate_slope_examples(rng):
    k = np.arange(1, 1001, dtype=float)
    assert abs(fit_rate_slope(1 / k ** 2, ks=k).slope + 2) <= 1e-6
    assert abs(fit_rate_slope(np.full(1000, 3.0), ks=k).slope) <= 1e-9
    noisy = 1 / k + 1e-3 * np.abs(rng.standard_normal(1000)) * (1 / k)
    assert -1.1 <= fit_rate_slope(noisy, ks=k).slope <= -0.9
    with pytest.raises(ValueError):
        fit_rate_slope(np.r_[1.0, -1.0, 1.0], (1, 2))


def test_decile_trend():
    first, last = decile_trend(np.linspace(10, 1, 100))
    assert last < first


def test_summable_checks_zero_residual(coco):
    G, dist, sched, omega = coco
    C = arcog_constants(sched.nu, omega, sched.beta, G.beta_bar, dist)
    zeros = {k: np.zeros(10) for k in ("corr_sq", "step_sq", "res_sq", "blockdiff")}
    rep = summable_checks(zeros, sched, C, 0.0, omega)
    assert rep.passed and all(v == 0 for v in rep.sums.values())


def test_summable_checks_exact_expectations(rng):
    # n = 2 blocks: propagate the exact distribution over all 2^K paths for small K
    G = random_separable_cocoercive(BlockPartition.uniform(2, 4), rng)
    dist = BlockDistribution.uniform(2)
    sched = default_arcog_schedule(G)
    omega = sched.default_omega(dist)
    x0 = G.x_star + rng.standard_normal(4)
    K = 12
    paths = [(1.0, x0, x0)]
    keys = ("corr_sq", "step_sq", "res_sq", "blockdiff")
    trace = {k: np.zeros(K + 1) for k in keys}
    for k in range(K + 1):
        _, eta, gamma = sched.coefficients(k)
        nxt = []
        for w, x, xp in paths:
            g, gp = G.eval_full(x), G.eval_full(xp)
            c, d = eta * g - gamma * gp, g - gp
            trace["corr_sq"][k] += w * float(c @ c)
            trace["step_sq"][k] += w * float((x - xp) @ (x - xp))
            trace["res_sq"][k] += w * float(g @ g)
            trace["blockdiff"][k] += w * sum(b * float(d[sl] @ d[sl])
                                             for b, sl in zip(G.beta_bar, G.partition.slices()))
            if k < K:
                for i in range(2):
                    nxt.append((w * dist.probs[i], arcog_step_direct(x, xp, G, sched, omega, dist, i, k), x))
        paths = nxt
    C = arcog_constants(sched.nu, omega, sched.beta, G.beta_bar, dist)
    e = x0 - G.x_star
    assert summable_checks(trace, sched, C, float(e @ e), omega, slack=1.0).passed
