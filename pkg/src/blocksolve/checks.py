"""Acceptance check suites run by ``blocksolve check``.

Each check returns a :class:`CriterionResult`; the runtime limit is part of
the pass condition.  The lemma-level checks read instances from the shipped
fixture directory so that a corrupted fixture makes the named check fail.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from blocksolve.blockcore import BlockDistribution, BlockPartition, UniformStream
from blocksolve.diagnostics import (
    arcog_descent_margin,
    decile_trend,
    fit_rate_slope,
    rcog_descent_margin,
)
from blocksolve.fedsim import AcFedDrSimulation, FedOgSimulation, run_federated
from blocksolve.operators import (
    Resolvent,
    load_operator,
    random_monotone_linear,
    random_psd,
    random_separable_cocoercive,
    save_operator,
)
from blocksolve.solvers import (
    ArcogDirectSolver,
    ArcogPracticalSolver,
    ArcogSchedule,
    RcogSolver,
    arcog_constants,
    default_arcog_schedule,
    derive_rcog_params,
)
from blocksolve.splitting import (
    DRSOperator,
    FBFSOperator,
    SplitProblem,
    consensus_resolvent,
    drs_apply,
    fbfs_apply,
    fbfs_rho_hat,
    lambda_range,
    random_affine_split_problem,
)

SLACK = 1.2
SLOPE_MAX = -1.7


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    summary: str
    runtime: float
    limit: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} [{self.number:2d}] {self.name}: {self.summary} "
                f"({self.runtime:.1f}s, limit {self.limit:g}s)")


def _timed(number: int, name: str, limit: float, fn: Callable[[], tuple[bool, str]]) -> CriterionResult:
    t0 = time.perf_counter()
    ok, summary = fn()
    dt = time.perf_counter() - t0
    return CriterionResult(number, name, bool(ok and dt < limit), summary, dt, limit)


# -- fixtures -----------------------------------------------------------------

FIXTURES = {
    "rcog_linear": "rcog_linear_4blocks.json",
    "arcog_separable": "arcog_separable_8blocks.json",
    "split_affine": "split_affine_4users.json",
}


def default_fixture_dir() -> Path:
    return Path(str(resources.files("blocksolve") / "fixtures"))


def make_fixtures(directory) -> None:
    """Write the fixture instances (deterministic)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240101)
    save_operator(random_monotone_linear(BlockPartition.uniform(4, 12), rng, separable=True),
                  directory / FIXTURES["rcog_linear"])
    save_operator(random_separable_cocoercive(BlockPartition.uniform(8, 24), rng),
                  directory / FIXTURES["arcog_separable"])
    prob = random_affine_split_problem(4, 5, rng, B_kind="affine")
    (directory / FIXTURES["split_affine"]).write_text(json.dumps(prob.to_dict()))


def load_split(path) -> SplitProblem:
    return SplitProblem.from_dict(json.loads(Path(path).read_text()))


# -- lemmas -------------------------------------------------------------------

def check_rcog_descent(fixtures: Path, iters: int = 500, seed: int = 0) -> CriterionResult:
    def run():
        G = load_operator(fixtures / FIXTURES["rcog_linear"])
        dist = BlockDistribution.uniform(G.n)
        prm = derive_rcog_params(1.0, G.rho, G.L, dist)
        rng = np.random.default_rng(seed)
        s = RcogSolver(G, G.x_star + rng.standard_normal(G.p), prm, dist)
        stream = UniformStream(seed)
        worst = -np.inf
        for _ in range(iters):
            m, P = rcog_descent_margin(s.current(), s.previous(), G, prm, dist)
            worst = max(worst, m / (1e-12 * (1 + P)))
            s.step(stream.next_block(dist))
        return worst <= 1.0, f"worst margin/(1e-12(1+P)) = {worst:.3e} over {iters} iterates"
    return _timed(2, "rcog_descent", 5.0, run)


def check_arcog_descent(fixtures: Path, iters: int = 500, seed: int = 0) -> CriterionResult:
    def run():
        G = load_operator(fixtures / FIXTURES["arcog_separable"])
        dist = BlockDistribution.uniform(G.n)
        sched = default_arcog_schedule(G)
        omega = sched.default_omega(dist)
        rng = np.random.default_rng(seed)
        s = ArcogDirectSolver(G, G.x_star + rng.standard_normal(G.p), sched, omega, dist)
        stream = UniformStream(seed)
        worst = -np.inf
        for k in range(iters):
            m, P = arcog_descent_margin(s.current(), s.previous(), G, sched, omega, dist, k=k)
            worst = max(worst, m / (1e-12 * (1 + P)))
            s.step(stream.next_block(dist))
        return worst <= 1.0, f"worst margin/(1e-12(1+P)) = {worst:.3e} over {iters} iterates"
    return _timed(3, "arcog_descent", 10.0, run)


def consensus_resolvent_bruteforce(U: np.ndarray, beta: float, Q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Resolvent of ``beta (B_lift + N_L)`` for ``B y = Q y + c`` by one dense solve.

    Unknowns are the product point ``y`` and a multiplier ``s`` with
    ``sum_i s_i = 0``; ``B_lift`` applies ``n B`` to the first copy only.
    """
    n, p = U.shape
    N = n * p
    K = np.zeros((2 * N, 2 * N))
    rhs = np.zeros(2 * N)
    eye = np.eye(p)
    for i in range(n):
        r = slice(i * p, (i + 1) * p)
        K[r, r] = eye + (beta * n * Q if i == 0 else 0.0)
        K[r, N + i * p:N + (i + 1) * p] = beta * eye
        rhs[r] = U[i] - (beta * n * c if i == 0 else 0.0)
    row = N
    for i in range(1, n):
        K[row:row + p, i * p:(i + 1) * p] = eye
        K[row:row + p, 0:p] = -eye
        row += p
    for i in range(n):
        K[row:row + p, N + i * p:N + (i + 1) * p] = eye
    sol = np.linalg.solve(K, rhs)
    return sol[:N].reshape(n, p)


def check_consensus_resolvent(trials: int = 100, n: int = 5, p: int = 6, seed: int = 6) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            Q = random_psd(p, rng, 0.0, rng.uniform(0.5, 3.0))
            c = rng.standard_normal(p)
            beta = rng.uniform(0.1, 2.0)
            U = 3.0 * rng.standard_normal((n, p))
            _, copies = consensus_resolvent(U, beta, Resolvent("affine", M=Q, b=c))
            ref = consensus_resolvent_bruteforce(U, beta, Q, c)
            worst = max(worst, float(np.abs(copies - ref).max()))
        return worst <= 1e-8, f"max deviation {worst:.3e} over {trials} inputs"
    return _timed(6, "consensus_resolvent", 5.0, run)


def check_fbfs(fixtures: Path, samples: int = 10_000, seed: int = 7) -> CriterionResult:
    def run():
        prob = load_split(fixtures / FIXTURES["split_affine"])
        lr = lambda_range(prob.L, prob.rho)
        lam = lr.midpoint()
        L_s = lr.L_s(lam)
        rho_hat = fbfs_rho_hat(lam, prob.L, prob.rho)
        xs = prob.product_solution()
        fixed = float(np.abs(fbfs_apply(xs, lam, prob)).max())
        rng = np.random.default_rng(seed)
        worst_lip = 0.0
        worst_star = np.inf
        for _ in range(samples):
            x = xs + 2.0 * rng.standard_normal(xs.shape)
            y = x + rng.standard_normal(xs.shape) * rng.uniform(1e-3, 2.0)
            Sx, Sy = fbfs_apply(x, lam, prob), fbfs_apply(y, lam, prob)
            worst_lip = max(worst_lip, np.linalg.norm(Sx - Sy) / np.linalg.norm(x - y) / L_s)
            lhs = float(np.sum(Sx * (x - xs)))
            rhs = rho_hat * float(np.sum(Sx * Sx))
            worst_star = min(worst_star, (lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
        ok = fixed <= 1e-10 and worst_lip <= 1 + 1e-10 and worst_star >= -1e-10
        return ok, (f"|S x*| = {fixed:.2e}, Lipschitz ratio/L_s = {worst_lip:.4f}, "
                    f"star margin {worst_star:.3e}")
    return _timed(7, "fbfs_properties", 10.0, run)


def check_drs_cocoercive(fixtures: Path, samples: int = 10_000, beta: float = 1.0, seed: int = 8) -> CriterionResult:
    def run():
        prob = load_split(fixtures / FIXTURES["split_affine"])
        rng = np.random.default_rng(seed)
        worst = np.inf
        for _ in range(samples):
            u = 3.0 * rng.standard_normal((prob.n, prob.p))
            v = u + rng.standard_normal(u.shape) * rng.uniform(1e-3, 3.0)
            dg = drs_apply(u, beta, prob) - drs_apply(v, beta, prob)
            lhs = float(np.sum(dg * (u - v)))
            rhs = beta * float(np.sum(dg * dg))
            worst = min(worst, (lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
        return worst >= -1e-10, f"worst scaled margin {worst:.3e} over {samples} pairs"
    return _timed(8, "drs_cocoercive", 10.0, run)


# -- solvers ------------------------------------------------------------------

def check_practical_identity(n: int = 8, p: int = 40, K: int = 5000, seed: int = 1) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        G = random_separable_cocoercive(BlockPartition.uniform(n, p), rng)
        dist = BlockDistribution.uniform(n)
        sched = default_arcog_schedule(G)
        omega = sched.default_omega(dist)
        x0 = G.x_star + rng.standard_normal(p)
        direct = ArcogDirectSolver(G, x0, sched, omega, dist)
        prac = ArcogPracticalSolver(G, x0, sched, omega, dist)
        stream = UniformStream(seed)
        worst = 0.0
        for _ in range(K):
            i = stream.next_block(dist)
            direct.step(i)
            prac.step(i)
            x = direct.current()
            worst = max(worst, float(np.linalg.norm(prac.current() - x) / np.linalg.norm(x)))
        return worst <= 1e-6, f"max relative deviation {worst:.3e} ({prac.state.rebases} re-anchorings)"
    return _timed(1, "practical_identity", 10.0, run)


def _arcog_runs(n, p, K, seeds, inst_seed):
    rng = np.random.default_rng(inst_seed)
    G = random_separable_cocoercive(BlockPartition.uniform(n, p), rng)
    dist = BlockDistribution.uniform(n)
    sched = default_arcog_schedule(G)
    omega = sched.default_omega(dist)
    x0 = G.x_star + rng.standard_normal(p)
    R = np.empty((len(seeds), K + 1))
    for j, seed in enumerate(seeds):
        s = ArcogPracticalSolver(G, x0, sched, omega, dist)
        stream = UniformStream(seed)
        R[j, 0] = G.residual_sq(x0)
        for k in range(K):
            s.step(stream.next_block(dist))
            R[j, k + 1] = G.residual_sq(s.current())
    e = x0 - G.x_star
    C = arcog_constants(sched.nu, omega, sched.beta, G.beta_bar, dist)
    env = C.grad_envelope(np.arange(K + 1), omega, sched.nu, float(e @ e))
    return R, env, sched.nu


def check_arcog_rate(n: int = 20, p: int = 100, K: int = 10_000, seeds: int = 20, inst_seed: int = 4) -> CriterionResult:
    def run():
        R, env, _ = _arcog_runs(n, p, K, range(seeds), inst_seed)
        mean = R.mean(axis=0)
        fit = fit_rate_slope(mean, (100, K))
        ratio = float(np.max(mean / env))
        ok = fit.slope <= SLOPE_MAX and ratio <= SLACK
        return ok, f"slope {fit.slope:.3f}, max mean/envelope {ratio:.3e}"
    return _timed(4, "arcog_rate", 60.0, run)


def check_rcog_ergodic(K: int = 2000, seeds: int = 100, inst_seed: int = 5) -> CriterionResult:
    def run():
        rng = np.random.default_rng(inst_seed)
        G = random_monotone_linear(BlockPartition.uniform(4, 12), rng, separable=True)
        dist = BlockDistribution.uniform(4)
        prm = derive_rcog_params(1.0, 0.0, G.L, dist)
        x0 = G.x_star + rng.standard_normal(G.p)
        e = x0 - G.x_star
        vals = []
        for seed in range(seeds):
            s = RcogSolver(G, x0, prm, dist)
            stream = UniformStream(seed)
            acc = G.residual_sq(x0)
            for _ in range(K):
                s.step(stream.next_block(dist))
                acc += G.residual_sq(s.current())
            vals.append(acc / (K + 1))
        bound = 5 * float(e @ e) / (2 * prm.psi * (K + 1))
        value = float(np.mean(vals))
        return value <= SLACK * bound, f"ergodic mean {value:.3e} vs bound {bound:.3e}"
    return _timed(5, "rcog_ergodic", 60.0, run)


def check_as_surrogate(n: int = 8, p: int = 40, K: int = 5000, seeds: int = 20, inst_seed: int = 12) -> CriterionResult:
    def run():
        R, _, nu = _arcog_runs(n, p, K, range(seeds), inst_seed)
        weighted = (np.arange(K + 1) + nu) * R
        good = sum(last < first for first, last in map(decile_trend, weighted))
        return good >= seeds - 1, f"{good}/{seeds} seeds with decreasing (k+nu)||Gx||^2"
    return _timed(12, "almost_sure_surrogate", 30.0, run)


# -- federated ----------------------------------------------------------------

def check_fedog_fidelity(rounds: int = 2000, n: int = 6, p: int = 5, seed: int = 9) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        prob = random_affine_split_problem(n, p, rng)
        lam = lambda_range(prob.L, prob.rho).midpoint()
        S = FBFSOperator(prob, lam)
        dist = BlockDistribution.uniform(n)
        prm = derive_rcog_params(1.0, 0.0, S.L, dist)
        x0 = rng.standard_normal((n, p))
        sim = FedOgSimulation(prob, lam, prm, x0, dist)
        ref = RcogSolver(S, x0.ravel(), prm, dist)
        stream = UniformStream(seed)
        dev = mean_err = u_err = 0.0
        for _ in range(rounds):
            i = stream.next_block(dist)
            sim.step(i)
            ref.step(i)
            x = ref.current()
            dev = max(dev, float(np.linalg.norm(sim.iterate().ravel() - x) / np.linalg.norm(x)))
            mean_err = max(mean_err, sim.mean_error())
            user = sim.users[i]
            u_ref = user.x_cur - lam * prob.forward(i, user.x_cur)
            u_err = max(u_err, float(np.linalg.norm(user.u_cur - u_ref) / (1 + np.linalg.norm(u_ref))))
        ok = dev <= 1e-10 and mean_err <= 1e-12 and u_err <= 1e-12
        return ok, f"iterate deviation {dev:.3e}, mean error {mean_err:.3e}, u error {u_err:.3e}"
    return _timed(9, "fedog_fidelity", 10.0, run)


def _acfeddr_setup(rng, n, p, beta):
    prob = random_affine_split_problem(n, p, rng)
    dist = BlockDistribution.uniform(n)
    sched = ArcogSchedule(4.0, (beta,) * n)
    omega = sched.default_omega(dist)
    return prob, dist, sched, omega


def check_acfeddr(fid_rounds: int = 2000, K: int = 5000, seeds: int = 20, n: int = 6, p: int = 5,
                  beta: float = 1.0, seed: int = 10) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        prob, dist, sched, omega = _acfeddr_setup(rng, n, p, beta)
        G = DRSOperator(prob, beta)
        u0 = rng.standard_normal((n, p))
        sim = AcFedDrSimulation(prob, beta, sched, omega, u0, dist)
        ref = ArcogDirectSolver(G, u0.ravel(), sched, omega, dist)
        stream = UniformStream(seed)
        dev = hat_err = mean_err = 0.0
        for _ in range(fid_rounds):
            i = stream.next_block(dist)
            sim.step(i)
            ref.step(i)
            u = ref.current()
            U = sim.iterate()
            dev = max(dev, float(np.linalg.norm(U.ravel() - u) / np.linalg.norm(u)))
            h = consensus_resolvent(U, beta, prob.B)[0]
            hat_err = max(hat_err, float(np.linalg.norm(h - sim.server.u_hat_cur) / (1 + np.linalg.norm(h))))
            mean_err = max(mean_err, sim.mean_error())

        C = arcog_constants(sched.nu, omega, sched.beta, G.beta_bar, dist)
        e = u0.ravel() - G.x_star
        env = beta ** 2 * C.grad_envelope(np.arange(K + 1), omega, sched.nu, float(e @ e))
        certs = []
        for s in range(seeds):
            sim = AcFedDrSimulation(prob, beta, sched, omega, u0, dist)
            certs.append(run_federated(sim, K, s).certificates())
        mean = np.mean(certs, axis=0)
        ratio = float(np.max(mean / env))
        fit = fit_rate_slope(mean, (100, K))
        ok = dev <= 1e-6 and hat_err <= 1e-12 and mean_err <= 1e-12 and ratio <= SLACK and fit.slope <= SLOPE_MAX
        return ok, (f"deviation {dev:.3e}, u_hat error {hat_err:.3e}, mean error {mean_err:.3e}, "
                    f"max mean/envelope {ratio:.3e}, slope {fit.slope:.3f}")
    return _timed(10, "acfeddr_fidelity_rate", 120.0, run)


def check_fedog_bound(K: int = 2000, seeds: int = 50, n: int = 6, p: int = 5, seed: int = 11) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        prob = random_affine_split_problem(n, p, rng, B_kind="zero")
        lam = lambda_range(prob.L, 0.0).midpoint()
        S = FBFSOperator(prob, lam)
        dist = BlockDistribution.uniform(n)
        prm = derive_rcog_params(1.0, 0.0, S.L, dist)
        x0 = rng.standard_normal((n, p))
        D = float(np.sum((x0 - prob.product_solution()) ** 2))
        vals = []
        for s in range(seeds):
            sim = FedOgSimulation(prob, lam, prm, x0, dist)
            vals.append(run_federated(sim, K, s).certificates().mean())
        bound = 5 * D / (2 * prm.psi * (1 - prob.L * lam) ** 2 * (K + 1))
        value = float(np.mean(vals))
        return value <= SLACK * bound, f"ergodic certificate {value:.3e} vs bound {bound:.3e}"
    return _timed(11, "fedog_bound", 60.0, run)


# -- suites -------------------------------------------------------------------

def suite_checks(name: str, fixtures: Path | None = None) -> list[tuple[str, Callable[[], CriterionResult]]]:
    fx = Path(fixtures) if fixtures is not None else default_fixture_dir()
    lemmas = [("rcog_descent", lambda: check_rcog_descent(fx)),
              ("arcog_descent", lambda: check_arcog_descent(fx)),
              ("consensus_resolvent", check_consensus_resolvent),
              ("fbfs_properties", lambda: check_fbfs(fx)),
              ("drs_cocoercive", lambda: check_drs_cocoercive(fx))]
    solvers = [("practical_identity", check_practical_identity), ("arcog_rate", check_arcog_rate),
               ("rcog_ergodic", check_rcog_ergodic), ("almost_sure_surrogate", check_as_surrogate)]
    federated = [("fedog_fidelity", check_fedog_fidelity), ("acfeddr_fidelity_rate", check_acfeddr),
                 ("fedog_bound", check_fedog_bound)]
    suites = {"lemmas": lemmas, "solvers": solvers, "federated": federated,
              "all": lemmas + solvers + federated}
    if name not in suites:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(suites)}")
    return suites[name]


def run_suite(name: str, fixtures: Path | None = None,
              echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    results = []
    for label, check in suite_checks(name, fixtures):
        try:
            res = check()
        except Exception as exc:  # a broken fixture fails its own check, not the whole suite
            res = CriterionResult(0, label, False, f"{type(exc).__name__}: {exc}", 0.0, 0.0)
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
