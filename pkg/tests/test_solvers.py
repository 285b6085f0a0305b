import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksolve.blockcore import BlockDistribution, BlockPartition, UniformStream
from blocksolve.operators import (
    BlockOperator,
    make_linear_weak_minty,
    make_separable_cocoercive,
    random_separable_cocoercive,
)
from blocksolve.solvers import (
    ArcogDirectSolver,
    ArcogPracticalSolver,
    ArcogSchedule,
    ConstantSchedule,
    InfeasibleParameters,
    PracticalState,
    RcogParams,
    RcogSolver,
    RenormalizationNeeded,
    arcog_constants,
    arcog_schedule_at,
    arcog_step_direct,
    arcog_step_practical,
    check_schedule_conditions,
    default_arcog_schedule,
    derive_rcog_params,
    practical_update,
    rcog_rho_bar,
    rcog_step,
    reconstruct_iterate,
)


def scalar_identity():
    part = BlockPartition((1,))
    return make_separable_cocoercive(part, [np.eye(1)], np.zeros(1))


def test_derive_rcog_params_example():
    prm = derive_rcog_params(1.0, 0.0, [1.0] * 4, BlockDistribution.uniform(4))
    assert prm.rho_bar == 0.25
    assert prm.gamma == 0.125
    assert prm.eta == 0.1328125
    assert math.isclose(prm.psi, 0.0009765625, rel_tol=1e-12)
    assert prm.violations() == []


def test_rho_bar_takes_minimum():
    assert math.isclose(rcog_rho_bar([1.0, 2.0], BlockDistribution.uniform(2)), math.sqrt(0.5) / 4)


def test_rho_at_ceiling_rejected():
    dist = BlockDistribution.uniform(4)
    with pytest.raises(InfeasibleParameters):
        derive_rcog_params(1.0, 0.25, [1.0] * 4, dist)
    with pytest.raises(InfeasibleParameters):
        derive_rcog_params(0.0, 0.0, [1.0] * 4, dist)


@settings(max_examples=200)
@given(st.floats(0.01, 10), st.floats(-0.99, 0.99), st.integers(1, 10),
       st.lists(st.floats(0.1, 5), min_size=10, max_size=10))
def test_derived_params_always_feasible(omega, frac, n, Ls):
    dist = BlockDistribution.uniform(n)
    L = Ls[:n]
    rho = frac * rcog_rho_bar(L, dist)
    prm = derive_rcog_params(omega, rho, L, dist)
    assert prm.psi > 0
    assert max(rho, 0) / omega < prm.gamma <= prm.rho_bar / omega * (1 + 1e-15)
    assert prm.gamma < prm.eta < prm.gamma + (omega * prm.gamma - rho) * dist.p_min / (2 * omega)


def test_invalid_manual_params_reported():
    bad = RcogParams(1.0, 0.1, 0.05, 0.0, 0.25, 0.25)
    assert "gamma < eta" in bad.violations()
    with pytest.raises(InfeasibleParameters):
        bad.validate()


def test_rcog_step_examples():
    G = scalar_identity()
    dist = BlockDistribution.uniform(1)
    prm = RcogParams(1.0, 0.1, 0.2, 0.0, 1.0, 1.0)
    assert rcog_step(np.array([1.0]), np.array([2.0]), G, prm, dist, 0)[0] == 1.0
    assert rcog_step(np.zeros(1), np.zeros(1), G, prm, dist, 0)[0] == 0.0
    # one block: optimistic gradient x - omega (eta G x - gamma G x_prev)
    x = rcog_step(np.array([3.0]), np.array([1.0]), G, prm, dist, 0)
    assert x[0] == 3.0 - (0.2 * 3.0 - 0.1 * 1.0)


def test_schedule_examples():
    t0, theta, gamma, eta = arcog_schedule_at(4.0, 0)
    assert (t0, theta, gamma, eta) == (2.25, 0.1, 0.1, 0.5)
    assert arcog_schedule_at(4.0, 1)[0] == 2.5
    _, theta, _, eta = arcog_schedule_at(4.0, 10 ** 6)
    assert abs(theta - 1) < 1e-4 and abs(eta - 1) < 1e-4
    with pytest.raises(InfeasibleParameters):
        arcog_schedule_at(3.0, 0)


def test_schedule_lemma_conditions():
    chk = check_schedule_conditions(4.0, 10 ** 4)
    assert chk.passed and chk.worst_gamma_gap <= 1e-12


@given(st.floats(3.01, 50), st.integers(0, 10 ** 6))
def test_schedule_invariants(nu, k):
    t_k, theta, gamma, eta = arcog_schedule_at(nu, k)
    assert theta == gamma
    assert 0 < theta < 1
    assert t_k > 2


def test_arcog_direct_examples():
    G = scalar_identity()
    dist = BlockDistribution.uniform(1)
    sched = ConstantSchedule(theta=0.1, eta=0.5, gamma=0.1)
    x = arcog_step_direct(np.array([1.0]), np.array([0.5]), G, sched, 1.0, dist, 0, 0)
    assert math.isclose(x[0], 0.6, rel_tol=1e-15)
    assert arcog_step_direct(np.zeros(1), np.zeros(1), G, sched, 1.0, dist, 0, 0)[0] == 0.0


def test_zero_momentum_reproduces_rcog(rng):
    part = BlockPartition.uniform(4, 8)
    G = make_linear_weak_minty(np.kron(np.eye(4), np.array([[1.0, 2.0], [-2.0, 0.5]])) / 3,
                               rng.standard_normal(8), part)
    dist = BlockDistribution.uniform(4)
    prm = derive_rcog_params(1.0, 0.0, G.L, dist)
    x0 = rng.standard_normal(8)
    a = RcogSolver(G, x0, prm, dist)
    b = ArcogDirectSolver(G, x0, ConstantSchedule(0.0, prm.eta, prm.gamma), prm.omega, dist)
    stream = UniformStream(5)
    for _ in range(300):
        i = stream.next_block(dist)
        a.step(i)
        b.step(i)
        assert np.array_equal(a.current(), b.current())


def test_practical_first_step_matches_direct(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(3, 6), rng)
    dist = BlockDistribution.uniform(3)
    sched = default_arcog_schedule(G)
    omega = sched.default_omega(dist)
    x0 = rng.standard_normal(6)
    st0 = PracticalState.initial(x0)
    assert np.array_equal(reconstruct_iterate(st0), x0)
    st1 = arcog_step_practical(st0, G, sched, omega, dist, 1, k=0)
    assert st1.c == st1.tau == arcog_schedule_at(4.0, 0)[1]
    direct = arcog_step_direct(x0, x0, G, sched, omega, dist, 1, 0)
    assert np.allclose(reconstruct_iterate(st1), direct, rtol=1e-14, atol=1e-14)
    assert st0.k == 0  # pure step leaves the input untouched


def test_practical_zero_operator_is_static():
    part = BlockPartition((2, 2))
    G = BlockOperator(part, lambda x: np.zeros(4), beta_bar=[1.0, 1.0], x_star=np.zeros(4))
    dist = BlockDistribution.uniform(2)
    sched = ArcogSchedule(4.0, (1.0, 1.0))
    s = ArcogPracticalSolver(G, np.arange(4.0), sched, sched.default_omega(dist), dist)
    for i in [0, 1, 1, 0, 1]:
        s.step(i)
    assert np.array_equal(s.current(), np.arange(4.0))


def test_practical_tracks_direct(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(8, 40), rng)
    dist = BlockDistribution.uniform(8)
    sched = default_arcog_schedule(G)
    omega = sched.default_omega(dist)
    x0 = G.x_star + rng.standard_normal(40)
    a = ArcogDirectSolver(G, x0, sched, omega, dist)
    b = ArcogPracticalSolver(G, x0, sched, omega, dist)
    stream = UniformStream(2)
    worst = 0.0
    for _ in range(2000):
        i = stream.next_block(dist)
        a.step(i)
        b.step(i)
        worst = max(worst, np.linalg.norm(a.current() - b.current()) / (1 + np.linalg.norm(a.current())))
        assert np.allclose(b.previous(), a.previous(), rtol=1e-8, atol=1e-8)
    assert worst <= 1e-6
    assert b.state.rebases > 0


def test_tau_and_c_recursion_without_rebase(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(2, 4), rng)
    dist = BlockDistribution.uniform(2)
    sched = default_arcog_schedule(G)
    st = PracticalState.initial(np.zeros(4))
    tau, c = 1.0, 0.0
    for k in range(50):
        practical_update(st, G, sched, sched.default_omega(dist), dist, k % 2)
        tau *= arcog_schedule_at(4.0, k)[1]
        c += tau
        assert st.tau == tau and st.c == c
    assert st.tau < 1 and st.c > 0


def test_tau_floor_raises_without_rebase(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(2, 4), rng)
    dist = BlockDistribution.uniform(2)
    sched = default_arcog_schedule(G)
    st = PracticalState.initial(np.ones(4))
    st.tau = 1e-249 * 0.5
    with pytest.raises(RenormalizationNeeded):
        practical_update(st, G, sched, sched.default_omega(dist), dist, 0)


def test_arcog_constants_examples():
    dist = BlockDistribution.uniform(2)
    C = arcog_constants(4.0, 0.5, [1.0, 1.0], [1.0, 1.0], dist)
    assert (C.Lambda0, C.Lambda1, C.Lambda2, C.Lambda3) == (1.0, 1.0, 1.0, 2.0)
    n, beta = 5, 0.7
    C = arcog_constants(4.0, beta / n, [beta] * n, [beta] * n, BlockDistribution.uniform(n))
    assert math.isclose(C.Lambda0, 1 / beta)
    assert math.isclose(C.Lambda1, beta)
    assert math.isclose(C.Lambda2, (n - 1) / beta)
    assert math.isclose(C.Lambda3, n / beta)
    with pytest.raises(InfeasibleParameters):
        arcog_constants(4.0, 1.0, [1.0, 1.0], [1.0, 1.0], dist)


def test_schedule_checks_omega_and_beta():
    dist = BlockDistribution.uniform(2)
    sched = ArcogSchedule(4.0, (1.0, 1.0))
    assert sched.default_omega(dist) == 0.5
    with pytest.raises(InfeasibleParameters):
        sched.check(1.0, dist)
    with pytest.raises(InfeasibleParameters):
        sched.check(0.5, dist, beta_bar=[0.5, 0.5])


def test_same_seed_bit_identical(rng):
    G = random_separable_cocoercive(BlockPartition.uniform(4, 8), rng)
    dist = BlockDistribution.uniform(4)
    sched = default_arcog_schedule(G)
    x0 = rng.standard_normal(8)
    runs = []
    for _ in range(2):
        s = ArcogPracticalSolver(G, x0, sched, sched.default_omega(dist), dist)
        stream = UniformStream(11)
        for _ in range(500):
            s.step(stream.next_block(dist))
        runs.append(s.current().tobytes())
    assert runs[0] == runs[1]
