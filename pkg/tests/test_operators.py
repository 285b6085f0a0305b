import json

import numpy as np
import pytest

from blocksolve.blockcore import BlockPartition
from blocksolve.operators import (
    CertificateUnavailable,
    MissingCertificate,
    Resolvent,
    check_block_cocoercive,
    check_block_consistency,
    check_block_lipschitz,
    check_firm_nonexpansive,
    check_weak_minty,
    load_operator,
    make_linear_weak_minty,
    make_separable_cocoercive,
    operator_from_dict,
    random_monotone_linear,
    random_separable_cocoercive,
    resolvent_affine,
    resolvent_prox,
    save_operator,
    weak_minty_rho,
)


def test_identity_blocks_give_unit_constants():
    part = BlockPartition((2, 2, 1))
    x_star = np.array([1.0, -1.0, 2.0, 0.5, 3.0])
    G = make_separable_cocoercive(part, [np.eye(2), np.eye(2), np.eye(1)], x_star)
    assert G.beta_bar == (1.0, 1.0, 1.0)
    assert G.L == (1.0, 1.0, 1.0)
    x = np.arange(5.0)
    assert np.allclose(G.eval_full(x), x - x_star)
    assert np.abs(G.eval_full(x_star)).max() == 0.0


def test_non_symmetric_block_rejected():
    with pytest.raises(ValueError):
        make_separable_cocoercive(BlockPartition((2,)), [np.array([[1.0, 1.0], [0.0, 1.0]])], np.zeros(2))


def test_random_separable_certificates_hold(rng):
    part = BlockPartition((3, 2, 4))
    G = random_separable_cocoercive(part, rng)
    assert np.linalg.norm(G.eval_full(G.x_star)) <= 1e-10 * (1 + np.linalg.norm(G.x_star))
    assert check_block_cocoercive(G, rng, n_pairs=10_000).passed
    assert check_block_lipschitz(G, rng, n_pairs=10_000).passed
    assert check_block_consistency(G, rng).passed


def test_weak_minty_rho_examples():
    assert weak_minty_rho(np.array([[0.0, 1.0], [-1.0, 0.0]])) <= 1e-8
    assert weak_minty_rho(np.eye(3)) <= 1e-8
    assert abs(weak_minty_rho(-np.eye(2)) - 1.0) <= 1e-8


def test_weak_minty_rho_unavailable():
    # M + M^T + 2 rho M^T M = [[0, 1], [1, 2 rho]] is indefinite for every rho
    M = np.array([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(CertificateUnavailable):
        weak_minty_rho(M)


def test_check_weak_minty_examples(rng):
    G = make_linear_weak_minty(-np.eye(1), np.zeros(1))
    assert check_weak_minty(G, 1.0, [np.zeros(1)]).passed
    assert not check_weak_minty(G, 0.5, [np.ones(1)]).passed
    mono = random_monotone_linear(BlockPartition.uniform(3, 9), rng, separable=False)
    pts = [rng.standard_normal(9) for _ in range(1000)]
    assert check_weak_minty(mono, 0.0, pts).passed


def test_block_lipschitz_constants_are_block_row_norms(rng):
    part = BlockPartition((2, 3))
    G = random_monotone_linear(part, rng, separable=True)
    assert G.separable
    assert check_block_lipschitz(G, rng, n_pairs=2000).passed


def test_missing_certificates(rng):
    G = random_monotone_linear(BlockPartition((2, 2)), rng)
    with pytest.raises(MissingCertificate):
        check_block_cocoercive(G, rng, n_pairs=1)


def test_serialization_round_trip(tmp_path, rng):
    G = random_separable_cocoercive(BlockPartition((2, 3)), rng)
    path = tmp_path / "op.json"
    save_operator(G, path)
    H = load_operator(path)
    x = rng.standard_normal(5)
    assert np.array_equal(G.eval_full(x), H.eval_full(x))
    assert H.beta_bar == G.beta_bar and H.L == G.L
    again = operator_from_dict(json.loads(json.dumps(H.to_dict())))
    assert np.array_equal(again.eval_full(x), H.eval_full(x))


def test_resolvent_affine_examples():
    v = np.array([1.0, -2.0])
    assert np.array_equal(resolvent_affine(np.zeros((2, 2)), np.zeros(2), 0.7, v), v)
    assert np.array_equal(resolvent_affine(np.eye(2), np.zeros(2), 0.0, v), v)
    assert np.allclose(resolvent_affine(np.eye(1), np.zeros(1), 1.0, np.array([2.0])), [1.0])


def test_resolvent_prox_examples():
    v = np.array([2.0, -0.5])
    assert np.array_equal(resolvent_prox("zero", 1.0, v), v)
    assert np.allclose(resolvent_prox("soft_threshold", 1.0, v, mu=1.0), [1.0, 0.0])
    box = resolvent_prox("box", 1.0, np.array([-1.0, 0.5, 3.0]), lo=0.0, hi=1.0)
    assert np.array_equal(box, [0.0, 0.5, 1.0])


def test_resolvent_inverts_forward(rng):
    M = rng.standard_normal((4, 4))
    M = M @ M.T + (M - M.T)
    J = Resolvent("affine", M=M, b=rng.standard_normal(4))
    for _ in range(20):
        y = rng.standard_normal(4)
        lam = rng.uniform(0.1, 2.0)
        assert np.allclose(J.apply(y + lam * J.forward(y), lam), y, atol=1e-10)


@pytest.mark.parametrize("J", [
    Resolvent("zero"),
    Resolvent("soft_threshold", mu=0.3),
    Resolvent("box", lo=-1.0, hi=0.5),
    Resolvent("affine", M=np.array([[2.0, 1.0], [-1.0, 0.5]]), b=np.array([1.0, 0.0])),
])
def test_resolvents_firmly_nonexpansive(J, rng):
    assert check_firm_nonexpansive(J, 0.8, 2, rng, n_pairs=2000).passed


def test_resolvent_dict_round_trip():
    J = Resolvent("affine", M=np.eye(2) * 2, b=np.ones(2))
    K = Resolvent.from_dict(J.to_dict())
    v = np.array([3.0, 1.0])
    assert np.array_equal(J.apply(v, 0.5), K.apply(v, 0.5))
