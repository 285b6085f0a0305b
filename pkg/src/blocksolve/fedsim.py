"""Message-passing simulation of the two federated algorithms.

FedOG runs the non-accelerated scheme on the FBFS operator and AcFedDR the
accelerated one on the Douglas-Rachford residual, with one sampled user per
round.  Users keep their previous local state next to the current one; the
global previous-round value of a user's block is the stored previous state
only when that user was also the one sampled in the round before.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from blocksolve.blockcore import BlockDistribution, UniformStream
from blocksolve.operators import Resolvent
from blocksolve.solvers import TAU_FLOOR, RcogParams, RenormalizationNeeded
from blocksolve.splitting import SplitProblem, consensus_resolvent, lambda_range

FLOAT_BYTES = 8


@dataclass(frozen=True)
class RoundMessage:
    direction: str  # "server->user" or "user->server"
    round: int
    user: int
    payload: tuple[str, ...]
    nbytes: int

    def to_json(self) -> str:
        d = asdict(self)
        d["payload"] = list(self.payload)
        return json.dumps(d)


def _msg(direction, k, i, names, floats) -> RoundMessage:
    return RoundMessage(direction, k, i, tuple(names), FLOAT_BYTES * int(floats))


# -- FedOG --------------------------------------------------------------------

@dataclass
class FedOgServerState:
    u_bar: np.ndarray
    u_hat_cur: np.ndarray
    u_hat_prev: np.ndarray
    round: int = 0


@dataclass
class FedOgUserState:
    x_cur: np.ndarray
    x_prev: np.ndarray
    u_cur: np.ndarray
    last_active: int | None = None

    def previous_block(self, k: int) -> np.ndarray:
        """This user's block of the global iterate ``x^{k-1}``."""
        return self.x_prev if self.last_active == k - 1 else self.x_cur


def fedog_init(problem: SplitProblem, lam: float, x0) -> tuple[FedOgServerState, list[FedOgUserState]]:
    """States at round 0 with ``x^{-1} = x^0`` and ``u_bar`` the mean of ``u_i^0``."""
    x0 = np.asarray(x0, dtype=float).reshape(problem.n, problem.p)
    users = []
    for i in range(problem.n):
        xi = x0[i].copy()
        users.append(FedOgUserState(xi, xi.copy(), xi - lam * problem.forward(i, xi)))
    u_bar = np.mean([u.u_cur for u in users], axis=0)
    u_hat, _ = consensus_resolvent(u_bar[None, :], lam, problem.B)
    return FedOgServerState(u_bar, u_hat, u_hat.copy()), users


def fedog_round(server: FedOgServerState, users: list[FedOgUserState], problem: SplitProblem,
                params: RcogParams, lam: float, i_k: int, dist: BlockDistribution) -> list[RoundMessage]:
    """One round: user ``i_k`` takes an optimistic step, the server refreshes ``u_hat``."""
    k = server.round
    n, p = problem.n, problem.p
    A = problem.A[i_k]
    user = users[i_k]
    ledger = [_msg("server->user", k, i_k, ("u_hat_cur", "u_hat_prev"), 2 * p)]

    x_k, x_km1 = user.x_cur, user.previous_block(k)
    h, h_prev = server.u_hat_cur, server.u_hat_prev
    d_k = x_k - h - lam * (A.forward(x_k) - A.forward(h))
    d_km1 = x_km1 - h_prev - lam * (A.forward(x_km1) - A.forward(h_prev))
    x_new = x_k - (params.omega / dist.probs[i_k]) * (params.eta * d_k - params.gamma * d_km1)
    u_new = x_new - lam * A.forward(x_new)
    delta_u = u_new - user.u_cur
    user.x_prev, user.x_cur, user.u_cur = x_k, x_new, u_new
    user.last_active = k
    ledger.append(_msg("user->server", k, i_k, ("delta_u",), p))

    server.u_bar = server.u_bar + delta_u / n
    server.u_hat_prev = server.u_hat_cur
    server.u_hat_cur = problem.B.apply(server.u_bar, lam)
    server.round = k + 1
    return ledger


class FedOgSimulation:
    """FedOG driver holding the server, the users and the message ledger."""

    algorithm = "fedog"

    def __init__(self, problem: SplitProblem, lam: float, params: RcogParams, x0,
                 dist: BlockDistribution | None = None):
        if problem.L is None or not lambda_range(problem.L, problem.rho).contains(lam):
            raise ValueError(f"lam={lam} is outside the feasible FBFS range")
        self.problem, self.lam, self.params = problem, float(lam), params
        self.dist = dist or BlockDistribution.uniform(problem.n)
        self.server, self.users = fedog_init(problem, lam, x0)
        self.ledger: list[RoundMessage] = []

    @property
    def round(self) -> int:
        return self.server.round

    def step(self, i_k: int) -> list[RoundMessage]:
        msgs = fedog_round(self.server, self.users, self.problem, self.params, self.lam, i_k, self.dist)
        self.ledger.extend(msgs)
        return msgs

    def iterate(self) -> np.ndarray:
        """Global ``x^k`` as an ``(n, p)`` array (simulator view, not communicated)."""
        return np.stack([u.x_cur for u in self.users])

    def previous_iterate(self) -> np.ndarray:
        k = self.server.round
        return np.stack([u.previous_block(k) for u in self.users])

    def mean_error(self) -> float:
        """Relative gap between ``u_bar`` and the recomputed mean of ``u_i``."""
        ref = np.mean([u.u_cur for u in self.users], axis=0)
        return float(np.linalg.norm(self.server.u_bar - ref) / (1.0 + np.linalg.norm(ref)))

    def certificate(self) -> float:
        """``sum_i ||x_i - u_hat||^2`` at the current round."""
        X = self.iterate()
        return float(np.sum((X - self.server.u_hat_cur) ** 2))


# -- AcFedDR ------------------------------------------------------------------

@dataclass
class AcFedDrUserState:
    z_cur: np.ndarray
    w_cur: np.ndarray
    z_prev: np.ndarray
    w_prev: np.ndarray
    last_active: int | None = None
    epoch: int = 0  # number of server re-anchorings already applied

    def previous_slot(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.last_active == k - 1:
            return self.z_prev, self.w_prev
        return self.z_cur, self.w_cur


@dataclass
class AcFedDrServerState:
    z_bar: np.ndarray
    w_bar: np.ndarray
    u_hat_cur: np.ndarray
    u_hat_prev: np.ndarray
    tau: float = 1.0
    c: float = 0.0
    c_prev: float = 0.0
    round: int = 0
    # (shift, scale) pairs of every re-anchoring, applied lazily by users
    anchors: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class AcFedDrStates:
    server: AcFedDrServerState
    users: list[AcFedDrUserState]


def acfeddr_init(problem: SplitProblem, beta: float, u0) -> AcFedDrStates:
    """``z_i = u_i^0``, ``w_i = 0``, ``c = 0``, ``tau = 1`` and ``u_hat^0 = u_hat^{-1} = J(mean u^0)``."""
    u0 = np.asarray(u0, dtype=float).reshape(problem.n, problem.p)
    users = [AcFedDrUserState(u.copy(), np.zeros(problem.p), u.copy(), np.zeros(problem.p)) for u in u0]
    z_bar = u0.mean(axis=0)
    u_hat = problem.B.apply(z_bar, beta)
    server = AcFedDrServerState(z_bar, np.zeros(problem.p), u_hat, u_hat.copy())
    return AcFedDrStates(server, users)


def _catch_up(user: AcFedDrUserState, anchors) -> None:
    for a, s in anchors[user.epoch:]:
        user.z_cur += a * user.w_cur
        user.z_prev += a * user.w_prev
        user.w_cur *= s
        user.w_prev *= s
    user.epoch = len(anchors)


def reanchor(server: AcFedDrServerState) -> None:
    """Fold ``c w`` into ``z`` and reset ``tau`` to 1 without moving any ``u_i``."""
    a, s = server.c, server.tau
    server.z_bar = server.z_bar + a * server.w_bar
    server.w_bar = s * server.w_bar
    server.c_prev = (server.c_prev - a) / s
    server.c = 0.0
    server.tau = 1.0
    server.anchors.append((a, s))


def acfeddr_round(states: AcFedDrStates, problem: SplitProblem, schedule, omega: float, beta: float,
                  i_k: int, k: int, dist: BlockDistribution,
                  rebase_ratio: float | None = None) -> list[RoundMessage]:
    """One round of the accelerated Douglas-Rachford method on user ``i_k``."""
    server, user = states.server, states.users[i_k]
    if k != server.round:
        raise ValueError(f"server is at round {server.round}, got k={k}")
    p, n = problem.p, problem.n
    if rebase_ratio is not None and abs(server.c) / server.tau > rebase_ratio:
        reanchor(server)
    theta, eta, gamma = schedule.coefficients(k)
    tau_next = server.tau * theta
    if tau_next < TAU_FLOOR:
        raise RenormalizationNeeded(f"tau_{k + 1} = {tau_next:.3e} fell below {TAU_FLOOR:g}")
    ledger = [_msg("server->user", k, i_k, ("u_hat_cur", "u_hat_prev", "c_cur", "c_prev", "tau_next",
                                            "anchors"), 2 * p + 3 + 2 * (len(server.anchors) - user.epoch))]
    _catch_up(user, server.anchors)

    J = problem.A[i_k]
    z_pk, w_pk = user.previous_slot(k)
    u_k = user.z_cur + server.c * user.w_cur
    u_km1 = z_pk + server.c_prev * w_pk
    h, h_prev = server.u_hat_cur, server.u_hat_prev
    g_k = (h - J.apply(2 * h - u_k, beta)) / beta
    g_km1 = (h_prev - J.apply(2 * h_prev - u_km1, beta)) / beta
    d = eta * g_k - gamma * g_km1
    step = omega / (dist.probs[i_k] * tau_next)
    delta_w = -step * d
    delta_z = (step * server.c) * d
    user.z_prev, user.w_prev = user.z_cur, user.w_cur
    user.z_cur = user.z_cur + delta_z
    user.w_cur = user.w_cur + delta_w
    user.last_active = k
    ledger.append(_msg("user->server", k, i_k, ("delta_z", "delta_w"), 2 * p))

    server.z_bar = server.z_bar + delta_z / n
    server.w_bar = server.w_bar + delta_w / n
    server.c_prev = server.c
    server.c = server.c + tau_next
    server.tau = tau_next
    server.u_hat_prev = server.u_hat_cur
    server.u_hat_cur = problem.B.apply(server.z_bar + server.c * server.w_bar, beta)
    server.round = k + 1
    return ledger


class AcFedDrSimulation:
    algorithm = "acfeddr"

    def __init__(self, problem: SplitProblem, beta: float, schedule, omega: float, u0,
                 dist: BlockDistribution | None = None, rebase_ratio: float | None = 1e4):
        self.dist = dist or BlockDistribution.uniform(problem.n)
        schedule.check(omega, self.dist)
        self.problem, self.beta, self.schedule, self.omega = problem, float(beta), schedule, float(omega)
        self.rebase_ratio = rebase_ratio
        self.states = acfeddr_init(problem, beta, u0)
        self.ledger: list[RoundMessage] = []

    @property
    def server(self) -> AcFedDrServerState:
        return self.states.server

    @property
    def users(self) -> list[AcFedDrUserState]:
        return self.states.users

    @property
    def round(self) -> int:
        return self.server.round

    def step(self, i_k: int) -> list[RoundMessage]:
        msgs = acfeddr_round(self.states, self.problem, self.schedule, self.omega, self.beta, i_k,
                             self.server.round, self.dist, self.rebase_ratio)
        self.ledger.extend(msgs)
        return msgs

    def _user_view(self, user: AcFedDrUserState) -> tuple[np.ndarray, np.ndarray]:
        z, w = user.z_cur, user.w_cur
        for a, s in self.server.anchors[user.epoch:]:
            z, w = z + a * w, s * w
        return z, w

    def iterate(self) -> np.ndarray:
        """Reconstructed ``u_i^k = z_i + c_k w_i`` as an ``(n, p)`` array."""
        rows = []
        for user in self.users:
            z, w = self._user_view(user)
            rows.append(z + self.server.c * w)
        return np.stack(rows)

    def mean_error(self) -> float:
        zs, ws = zip(*(self._user_view(u) for u in self.users))
        z_ref, w_ref = np.mean(zs, axis=0), np.mean(ws, axis=0)
        ez = np.linalg.norm(self.server.z_bar - z_ref) / (1.0 + np.linalg.norm(z_ref))
        ew = np.linalg.norm(self.server.w_bar - w_ref) / (1.0 + np.linalg.norm(w_ref))
        return float(max(ez, ew))

    def certificate(self) -> float:
        """``sum_i ||u_hat - J_{beta A_i}(2 u_hat - u_i)||^2`` at the current round."""
        U = self.iterate()
        h = self.server.u_hat_cur
        return float(sum(np.sum((h - J.apply(2 * h - U[i], self.beta)) ** 2)
                         for i, J in enumerate(self.problem.A)))


# -- driver -------------------------------------------------------------------

@dataclass
class FederatedTrace:
    algorithm: str
    seed: int
    rows: list[tuple[int, int, float, float, int]]  # round, sampled_user, certificate, lyapunov, bytes
    ledger: list[RoundMessage]

    HEADER = ("round", "sampled_user", "certificate_residual", "lyapunov", "cumulative_bytes")

    def certificates(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.HEADER)
            for r in self.rows:
                wr.writerow([r[0], r[1], repr(r[2]), "" if r[3] is None else repr(r[3]), r[4]])

    def write_ledger(self, path) -> None:
        with open(path, "w") as fh:
            for m in self.ledger:
                fh.write(m.to_json() + "\n")


def run_federated(sim, rounds: int, seed: int, record_every: int = 1) -> FederatedTrace:
    """Drive ``sim`` for ``rounds`` rounds with users drawn from ``seed``'s stream.

    Row 0 holds the initial certificate with ``sampled_user = -1``.
    """
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    stream = UniformStream(seed)
    rows = [(0, -1, sim.certificate(), None, 0)]
    total = 0
    for k in range(rounds):
        i = stream.next_block(sim.dist)
        msgs = sim.step(i)
        total += sum(m.nbytes for m in msgs)
        if (k + 1) % record_every == 0 or k + 1 == rounds:
            rows.append((k + 1, i, sim.certificate(), None, total))
    return FederatedTrace(sim.algorithm, int(seed), rows, sim.ledger)
