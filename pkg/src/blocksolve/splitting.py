"""Consensus reformulation of ``0 in (1/n) sum_i A_i x + B x``.

Points of the product space are ``(n, p)`` arrays whose row ``i`` is user
``i``'s copy of the variable.  The two root-finding reformulations used by
the federated algorithms live here: the forward-backward-forward operator
``S^lam`` (needs forward maps ``A_i``) and the Douglas-Rachford residual
``G^beta`` (needs resolvents of ``A_i``).  Both depend on the other users
only through ``u_hat = J_{lam B}(mean_i u_i)``, which the operator classes
cache per input point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blocksolve.blockcore import BlockPartition, DimensionError
from blocksolve.operators import BlockOperator, CheckReport, Resolvent, random_psd


class InfeasibleLambda(ValueError):
    """``lam`` outside the range where ``S^lam`` is star-monotone."""


class SplitProblem:
    """Finite-sum inclusion data: per-user operators ``A_i`` and a central ``B``.

    ``L`` is a common Lipschitz constant of the ``A_i`` and ``rho`` the
    weak-Minty parameter of the reformulated inclusion (0 for monotone data).
    """

    def __init__(self, A: Sequence[Resolvent], B: Resolvent, *, L: float | None = None,
                 rho: float = 0.0, x_star=None, monotone: bool = True):
        if not A:
            raise ValueError("need at least one user operator")
        self.A = list(A)
        self.B = B
        self.L = None if L is None else float(L)
        self.rho = float(rho)
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float).copy()
        self.monotone = bool(monotone)
        dims = {a.M.shape[0] for a in self.A if a.kind == "affine"}
        if len(dims) > 1:
            raise DimensionError(f"user operators disagree on dimension: {sorted(dims)}")
        if self.x_star is not None:
            self._p = self.x_star.shape[0]
        elif dims:
            self._p = dims.pop()
        else:
            raise DimensionError("cannot infer the dimension p; pass x_star")

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def p(self) -> int:
        return self._p

    @property
    def supports_fbfs(self) -> bool:
        return all(a.has_forward for a in self.A)

    def forward(self, i: int, y: np.ndarray) -> np.ndarray:
        return self.A[i].forward(y)

    def product_solution(self) -> np.ndarray:
        """``[x*, ..., x*]`` as an ``(n, p)`` array."""
        if self.x_star is None:
            raise ValueError("problem has no known solution")
        return np.tile(self.x_star, (self.n, 1))

    def drs_solution(self, beta: float) -> np.ndarray:
        """``u*_i = x* - beta A_i x*``, a zero of ``G^beta`` (needs forward maps)."""
        if self.x_star is None or not self.supports_fbfs:
            raise ValueError("DRS solution needs x_star and single-valued A_i")
        return np.stack([self.x_star - beta * a.forward(self.x_star) for a in self.A])

    def to_dict(self) -> dict:
        return {
            "kind": "split",
            "A": [a.to_dict() for a in self.A],
            "B": self.B.to_dict(),
            "L": self.L,
            "rho": self.rho,
            "monotone": self.monotone,
            "x_star": None if self.x_star is None else self.x_star.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitProblem":
        return cls([Resolvent.from_dict(a) for a in data["A"]], Resolvent.from_dict(data["B"]),
                   L=data.get("L"), rho=data.get("rho", 0.0), x_star=data.get("x_star"),
                   monotone=data.get("monotone", True))


def random_affine_split_problem(n: int, p: int, rng: np.random.Generator, *, B_kind: str = "affine",
                                skew: float = 0.5, mu: float = 0.1, lipschitz: float = 1.0,
                                eig_lo: float = 0.0) -> SplitProblem:
    """Monotone affine users ``A_i y = M_i y + b_i`` with a planted solution.

    ``M_i = S_i + K_i`` (PSD plus skew) scaled to spectral norm ``lipschitz``.
    ``B`` is affine PSD, ``zero`` or ``soft_threshold`` (``mu ||.||_1``); the
    offsets ``b_i`` are chosen so that a random ``x*`` solves the inclusion.
    """
    Ms = []
    for _ in range(n):
        S = random_psd(p, rng, eig_lo, 1.0)
        K = rng.standard_normal((p, p))
        M = S + skew * (K - K.T) / 2.0
        Ms.append(lipschitz * M / np.linalg.norm(M, 2))
    x_star = rng.standard_normal(p)
    if B_kind == "affine":
        Q = random_psd(p, rng, 0.0, 0.5)
        c = rng.standard_normal(p)
        B = Resolvent("affine", M=Q, b=c)
        s = Q @ x_star + c
    elif B_kind == "zero":
        B = Resolvent("zero")
        s = np.zeros(p)
    elif B_kind == "soft_threshold":
        x_star[rng.random(p) < 0.4] = 0.0
        s = np.where(x_star != 0, mu * np.sign(x_star), rng.uniform(-mu, mu, p))
        B = Resolvent("soft_threshold", mu=mu)
    else:
        raise ValueError(f"unknown B kind {B_kind!r}")
    bs = [rng.standard_normal(p) for _ in range(n)]
    # shift the offsets so that mean_i (M_i x* + b_i) = -s
    mean_val = np.mean([M @ x_star + b for M, b in zip(Ms, bs)], axis=0)
    bs = [b - mean_val - s for b in bs]
    A = [Resolvent("affine", M=M, b=b) for M, b in zip(Ms, bs)]
    L = max(float(np.linalg.norm(M, 2)) for M in Ms)
    return SplitProblem(A, B, L=L, rho=0.0, x_star=x_star)


def as_product(u, n: int, p: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.size != n * p:
        raise DimensionError(f"product point with {u.size} entries for n={n}, p={p}")
    return u.reshape(n, p)


# -- resolvent of the consensus part -----------------------------------------

def consensus_resolvent(u: np.ndarray, beta: float, J_B: Resolvent) -> tuple[np.ndarray, np.ndarray]:
    """``J_{beta (B + N_L)}`` at ``u``: returns ``u_hat`` and ``n`` copies of it."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    u = np.asarray(u, dtype=float)
    u_hat = J_B.apply(u.mean(axis=0), beta)
    return u_hat, np.tile(u_hat, (u.shape[0], 1))


# -- forward-backward-forward -------------------------------------------------

@dataclass(frozen=True)
class LambdaRange:
    lo: float
    hi: float
    L: float
    rho: float

    @property
    def open_at_zero(self) -> bool:
        return self.lo == 0.0

    def contains(self, lam: float) -> bool:
        if self.open_at_zero:
            return 0.0 < lam <= self.hi
        return self.lo <= lam <= self.hi

    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def L_s(self, lam: float) -> float:
        """Lipschitz constant ``(1 + lam L)(2 + lam L)`` of ``S^lam``."""
        if not self.contains(lam):
            raise InfeasibleLambda(f"lam={lam} outside [{self.lo}, {self.hi}]")
        return (1 + lam * self.L) * (2 + lam * self.L)


def lambda_range(L: float, rho: float) -> LambdaRange:
    """Interval of ``lam`` for which ``S^lam`` is star-monotone (needs ``8 L rho <= 1``)."""
    if not L > 0:
        raise ValueError("L must be positive")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    disc = 1 - 8 * L * rho
    if disc < 0:
        raise InfeasibleLambda(f"8 L rho = {8 * L * rho} exceeds 1")
    root = math.sqrt(disc)
    den = 2 * L * (1 + L * rho)
    return LambdaRange((1 - 2 * rho * L - root) / den, (1 - 2 * rho * L + root) / den, float(L), float(rho))


def fbfs_rho_hat(lam: float, L: float, rho: float) -> float:
    return (1 - lam * L) / (1 + lam * L) ** 2 - rho / lam


def fbfs_apply(x: np.ndarray, lam: float, problem: SplitProblem) -> np.ndarray:
    """``S^lam x`` with rows ``x_i - u_hat - lam (A_i x_i - A_i u_hat)``."""
    x = as_product(x, problem.n, problem.p)
    Ax = np.stack([problem.forward(i, x[i]) for i in range(problem.n)])
    u_hat, _ = consensus_resolvent(x - lam * Ax, lam, problem.B)
    AU = np.stack([problem.forward(i, u_hat) for i in range(problem.n)])
    return x - u_hat - lam * (Ax - AU)


class _HatCache:
    """Remembers ``u_hat`` for the last few input points."""

    def __init__(self, size: int = 4):
        self.size = size
        self._keys: list[bytes] = []
        self._vals: list[np.ndarray] = []

    def get(self, x: np.ndarray, compute):
        key = x.tobytes()
        for k, v in zip(self._keys, self._vals):
            if k == key:
                return v
        v = compute(x)
        self._keys.insert(0, key)
        self._vals.insert(0, v)
        del self._keys[self.size:], self._vals[self.size:]
        return v


class FBFSOperator(BlockOperator):
    """``S^lam`` as a block operator on the flattened product space.

    Block ``i`` is user ``i``'s row.  Certificates: ``L_i = L_s`` for every
    block and ``rho = 0`` (star-monotone for ``lam`` in the feasible range).
    """

    kind = "fbfs"

    def __init__(self, problem: SplitProblem, lam: float):
        if not problem.supports_fbfs:
            raise ValueError("FBFS needs single-valued forward maps A_i")
        if problem.L is None:
            raise ValueError("FBFS needs the Lipschitz constant L of the A_i")
        rng_ = lambda_range(problem.L, problem.rho)
        if not rng_.contains(lam):
            raise InfeasibleLambda(f"lam={lam} outside the feasible range [{rng_.lo}, {rng_.hi}]")
        self.problem, self.lam = problem, float(lam)
        self.L_s = rng_.L_s(lam)
        n, p = problem.n, problem.p
        x_star = None if problem.x_star is None else problem.product_solution().ravel()
        super().__init__(BlockPartition((p,) * n), self._full, self._block,
                         L=[self.L_s] * n, rho=0.0, x_star=x_star)
        self._cache = _HatCache()

    def u_hat(self, x: np.ndarray) -> np.ndarray:
        return self._cache.get(np.asarray(x, dtype=float), self._compute_hat)

    def _compute_hat(self, x):
        X = as_product(x, self.problem.n, self.problem.p)
        U = np.stack([X[i] - self.lam * self.problem.forward(i, X[i]) for i in range(self.problem.n)])
        return consensus_resolvent(U, self.lam, self.problem.B)[0]

    def _full(self, x):
        return fbfs_apply(x, self.lam, self.problem).ravel()

    def _block(self, x, i):
        sl = self.partition.slice(i)
        xi = x[sl]
        u_hat = self.u_hat(x)
        A = self.problem.A[i]
        return xi - u_hat - self.lam * (A.forward(xi) - A.forward(u_hat))


def fbfs_star_check(x: np.ndarray, lam: float, problem: SplitProblem, x_star=None,
                    slack: float = 1e-10) -> CheckReport:
    """Check ``<S x, x - x*> >= rho_hat ||S x||^2`` at one product point ``x``."""
    if problem.L is None:
        raise ValueError("star check needs the Lipschitz constant L")
    rng_ = lambda_range(problem.L, problem.rho)
    if not rng_.contains(lam):
        raise InfeasibleLambda(f"lam={lam} outside [{rng_.lo}, {rng_.hi}]")
    x = as_product(x, problem.n, problem.p)
    xs = problem.product_solution() if x_star is None else as_product(
        np.broadcast_to(x_star, (problem.n, problem.p)), problem.n, problem.p)
    S = fbfs_apply(x, lam, problem)
    rho_hat = fbfs_rho_hat(lam, problem.L, problem.rho)
    lhs = float(np.sum(S * (x - xs)))
    rhs = rho_hat * float(np.sum(S * S))
    scale = 1.0 + abs(lhs) + abs(rhs)
    margin = (lhs - rhs) / scale
    return CheckReport("fbfs_star", bool(margin >= -slack), margin, 1, {"rho_hat": rho_hat})


# -- Douglas-Rachford ---------------------------------------------------------

def drs_apply(u: np.ndarray, beta: float, problem: SplitProblem) -> np.ndarray:
    """``G^beta u`` with rows ``(u_hat - J_{beta A_i}(2 u_hat - u_i)) / beta``."""
    u = as_product(u, problem.n, problem.p)
    u_hat, _ = consensus_resolvent(u, beta, problem.B)
    J = np.stack([problem.A[i].apply(2 * u_hat - u[i], beta) for i in range(problem.n)])
    return (u_hat - J) / beta


class DRSOperator(BlockOperator):
    """``G^beta`` as a block operator; ``beta``-co-coercive for monotone data."""

    kind = "drs"

    def __init__(self, problem: SplitProblem, beta: float):
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.problem, self.beta = problem, float(beta)
        n, p = problem.n, problem.p
        x_star = None
        if problem.x_star is not None and problem.supports_fbfs:
            x_star = problem.drs_solution(beta).ravel()
        super().__init__(BlockPartition((p,) * n), self._full, self._block,
                         beta_bar=[self.beta] * n, x_star=x_star)
        self._cache = _HatCache()

    def u_hat(self, u: np.ndarray) -> np.ndarray:
        return self._cache.get(np.asarray(u, dtype=float), self._compute_hat)

    def _compute_hat(self, u):
        U = as_product(u, self.problem.n, self.problem.p)
        return consensus_resolvent(U, self.beta, self.problem.B)[0]

    def _full(self, u):
        return drs_apply(u, self.beta, self.problem).ravel()

    def _block(self, u, i):
        sl = self.partition.slice(i)
        u_hat = self.u_hat(u)
        return (u_hat - self.problem.A[i].apply(2 * u_hat - u[sl], self.beta)) / self.beta


# -- solution certificates ----------------------------------------------------

def solution_certificate_a(x: np.ndarray, v: np.ndarray, lam: float, J_B: Resolvent):
    """From graph pairs ``v_i in A_i x_i``: ``u_hat`` and ``sum_i ||x_i - u_hat||^2``."""
    x = np.asarray(x, dtype=float)
    u = x - lam * np.asarray(v, dtype=float)
    u_hat = J_B.apply(u.mean(axis=0), lam)
    return u_hat, float(np.sum((x - u_hat) ** 2))


def solution_certificate_b(u: np.ndarray, lam: float, J_B: Resolvent, J_A: Sequence[Resolvent]):
    """``u_hat`` and ``sum_i ||u_hat - J_{lam A_i}(2 u_hat - u_i)||^2``."""
    u = np.asarray(u, dtype=float)
    u_hat = J_B.apply(u.mean(axis=0), lam)
    res = 0.0
    for i, J in enumerate(J_A):
        r = u_hat - J.apply(2 * u_hat - u[i], lam)
        res += float(r @ r)
    return u_hat, res
