import json

import numpy as np
import pytest

from blocksolve.blockcore import BlockDistribution, UniformStream
from blocksolve.fedsim import (
    FLOAT_BYTES,
    AcFedDrSimulation,
    FedOgSimulation,
    run_federated,
)
from blocksolve.solvers import ArcogDirectSolver, ArcogSchedule, RcogSolver, derive_rcog_params
from blocksolve.splitting import (
    DRSOperator,
    FBFSOperator,
    consensus_resolvent,
    lambda_range,
    random_affine_split_problem,
)

N, P = 4, 3


@pytest.fixture
def prob(rng):
    return random_affine_split_problem(N, P, rng)


def fedog(prob, x0):
    lam = lambda_range(prob.L, prob.rho).midpoint()
    dist = BlockDistribution.uniform(N)
    prm = derive_rcog_params(1.0, 0.0, FBFSOperator(prob, lam).L, dist)
    return FedOgSimulation(prob, lam, prm, x0, dist)


def acfeddr(prob, u0, beta=1.0, rebase_ratio=1e4):
    dist = BlockDistribution.uniform(N)
    sched = ArcogSchedule(4.0, (beta,) * N)
    return AcFedDrSimulation(prob, beta, sched, sched.default_omega(dist), u0, dist, rebase_ratio)


def test_fedog_fixed_point_is_stationary(prob):
    sim = fedog(prob, prob.product_solution())
    for i in [0, 3, 1, 1, 2]:
        sim.step(i)
    assert np.allclose(sim.iterate(), prob.product_solution(), atol=1e-13)
    assert sim.certificate() <= 1e-24


def test_acfeddr_fixed_point_is_stationary(prob):
    u_star = prob.drs_solution(1.0)
    sim = acfeddr(prob, u_star)
    for i in [0, 3, 1, 1, 2]:
        sim.step(i)
    assert np.allclose(sim.iterate(), u_star, atol=1e-12)
    assert np.allclose(sim.server.u_hat_cur, prob.x_star, atol=1e-12)


def test_fedog_matches_reference(prob, rng):
    x0 = rng.standard_normal((N, P))
    sim = fedog(prob, x0)
    ref = RcogSolver(FBFSOperator(prob, sim.lam), x0.ravel(), sim.params, sim.dist)
    stream = UniformStream(3)
    for _ in range(300):
        i = stream.next_block(sim.dist)
        sim.step(i)
        ref.step(i)
        x = ref.current()
        assert np.linalg.norm(sim.iterate().ravel() - x) <= 1e-10 * np.linalg.norm(x)
        assert np.allclose(sim.previous_iterate().ravel(), ref.previous(), atol=1e-10)
        assert sim.mean_error() <= 1e-12
        u = sim.users[i]
        assert np.allclose(u.u_cur, u.x_cur - sim.lam * prob.forward(i, u.x_cur), atol=1e-12)


@pytest.mark.parametrize("ratio", [1e4, 10.0])
def test_acfeddr_matches_reference(prob, rng, ratio):
    u0 = rng.standard_normal((N, P))
    sim = acfeddr(prob, u0, rebase_ratio=ratio)
    ref = ArcogDirectSolver(DRSOperator(prob, 1.0), u0.ravel(), sim.schedule, sim.omega, sim.dist)
    stream = UniformStream(4)
    for _ in range(500):
        i = stream.next_block(sim.dist)
        sim.step(i)
        ref.step(i)
        u = ref.current()
        U = sim.iterate()
        assert np.linalg.norm(U.ravel() - u) <= 1e-6 * np.linalg.norm(u)
        h = consensus_resolvent(U, 1.0, prob.B)[0]
        assert np.allclose(sim.server.u_hat_cur, h, atol=1e-12 * (1 + np.linalg.norm(h)))
        assert sim.mean_error() <= 1e-12


def test_zero_rounds(prob, rng):
    x0 = rng.standard_normal((N, P))
    sim = fedog(prob, x0)
    tr = run_federated(sim, 0, seed=0)
    assert len(tr.rows) == 1 and tr.rows[0][1] == -1
    assert tr.ledger == []
    assert np.array_equal(sim.iterate(), x0)
    with pytest.raises(ValueError):
        run_federated(sim, -1, seed=0)


def test_same_seed_same_trace(prob, rng):
    u0 = rng.standard_normal((N, P))
    a = run_federated(acfeddr(prob, u0), 200, seed=5)
    b = run_federated(acfeddr(prob, u0), 200, seed=5)
    assert a.rows == b.rows


def test_ledger_carries_only_p_vectors(prob, rng):
    for sim in (fedog(prob, rng.standard_normal((N, P))), acfeddr(prob, rng.standard_normal((N, P)))):
        tr = run_federated(sim, 50, seed=1)
        assert len(tr.ledger) == 100
        for m in tr.ledger:
            assert m.direction in ("server->user", "user->server")
            vectors = sum(name.startswith(("u_hat", "delta")) for name in m.payload)
            scalars = m.nbytes // FLOAT_BYTES - vectors * P
            # a user never sees more than p-vectors plus a handful of scalars
            assert m.nbytes % FLOAT_BYTES == 0 and 0 <= scalars <= 3 + 2 * 50
            assert not any("A" in name or "M" in name for name in m.payload)
        assert tr.rows[-1][4] == sum(m.nbytes for m in tr.ledger)


def test_trace_files(prob, rng, tmp_path):
    tr = run_federated(fedog(prob, rng.standard_normal((N, P))), 20, seed=2, record_every=5)
    assert [r[0] for r in tr.rows] == [0, 5, 10, 15, 20]
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.HEADER) and len(lines) == 6
    tr.write_ledger(tmp_path / "l.jsonl")
    msgs = [json.loads(line) for line in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert len(msgs) == 40 and msgs[0]["direction"] == "server->user"


def test_fedog_rejects_bad_lambda(prob, rng):
    dist = BlockDistribution.uniform(N)
    prm = derive_rcog_params(1.0, 0.0, [1.0] * N, dist)
    with pytest.raises(ValueError):
        FedOgSimulation(prob, 0.0, prm, rng.standard_normal((N, P)), dist)


def test_fedog_certificate_decreases(rng):
    prob = random_affine_split_problem(N, P, rng, B_kind="zero")
    tr = run_federated(fedog(prob, rng.standard_normal((N, P))), 3000, seed=0)
    c = tr.certificates()
    assert c[-1] < c[0]
