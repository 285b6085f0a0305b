"""Operators, resolvents, synthetic instances and certificate checkers.

A :class:`BlockOperator` evaluates ``G`` whole or one block at a time and
carries the regularity constants it claims: per-block Lipschitz constants
``L``, per-block co-coercivity constants ``beta_bar`` and a weak-Minty
parameter ``rho``.  Only block-separable constructions certify
``beta_bar`` exactly; anything else is checked by sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from blocksolve.blockcore import BlockPartition, DimensionError

SYM_TOL = 1e-12
RESOLVENT_RTOL = 1e-10


class CertificateUnavailable(ValueError):
    """No finite certificate of the requested kind exists for the operator."""


class MissingCertificate(ValueError):
    """A check needs a certificate (or known solution) the operator lacks."""


class ResolventError(ValueError):
    """The resolvent linear system could not be solved accurately."""


class BlockOperator:
    """Operator ``G: R^p -> R^p`` with block access and declared certificates.

    Parameters
    ----------
    partition : BlockPartition
    full : callable
        ``x -> G(x)``.
    block : callable, optional
        ``(x, i) -> [G(x)]_i``.  Defaults to slicing ``full(x)``.
    L, beta_bar : sequence of float, optional
        Per-block Lipschitz and co-coercivity constants.
    rho : float, optional
        Weak-Minty parameter relative to ``x_star``.
    x_star : array, optional
        A known root.
    separable : bool
        ``[G(x)]_i`` depends on ``x_i`` only.
    """

    kind = "generic"

    def __init__(self, partition: BlockPartition, full: Callable, block: Callable | None = None,
                 *, L=None, beta_bar=None, rho=None, x_star=None, separable=False):
        self.partition = partition
        self._full = full
        self._block = block
        self.L = None if L is None else tuple(float(v) for v in L)
        self.beta_bar = None if beta_bar is None else tuple(float(v) for v in beta_bar)
        self.rho = None if rho is None else float(rho)
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float).copy()
        self.separable = bool(separable)
        self._slices = partition.slices()
        for name, vals in (("L", self.L), ("beta_bar", self.beta_bar)):
            if vals is not None and len(vals) != partition.n:
                raise DimensionError(f"{name} has {len(vals)} entries for {partition.n} blocks")

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def p(self) -> int:
        return self.partition.p

    def eval_full(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._full(x), dtype=float)

    def eval_block(self, x: np.ndarray, i: int) -> np.ndarray:
        if self._block is None:
            return self.eval_full(x)[self._slices[i]]
        return np.asarray(self._block(x, i), dtype=float)

    def eval_block_affine(self, z: np.ndarray, w: np.ndarray, c: float, i: int) -> np.ndarray:
        """``[G(z + c w)]_i``; separable operators only touch block ``i``."""
        if self.separable:
            sl = self._slices[i]
            x = np.zeros(self.p)
            x[sl] = z[sl] + c * w[sl]
            return self.eval_block(x, i)
        return self.eval_block(z + c * w, i)

    def residual_sq(self, x: np.ndarray) -> float:
        g = self.eval_full(x)
        return float(g @ g)


class LinearBlockOperator(BlockOperator):
    """``G(x) = M (x - x_star)`` on a block partition.

    When ``blocks`` is given the operator is block-diagonal with those
    diagonal blocks and block evaluation costs one small mat-vec.
    """

    kind = "linear"

    def __init__(self, partition: BlockPartition, M, x_star, *, blocks=None, L=None,
                 beta_bar=None, rho=None):
        M = np.asarray(M, dtype=float)
        if M.shape != (partition.p, partition.p):
            raise DimensionError(f"matrix of shape {M.shape} for p={partition.p}")
        x_star = np.asarray(x_star, dtype=float)
        self.M = M
        self.b = M @ x_star
        self.blocks = None if blocks is None else [np.asarray(Q, dtype=float) for Q in blocks]
        super().__init__(partition, self._apply, self._apply_block, L=L, beta_bar=beta_bar,
                         rho=rho, x_star=x_star, separable=blocks is not None)
        self._rows = [M[sl] for sl in self._slices]

    def _apply(self, x):
        return self.M @ (x - self.x_star)

    def _apply_block(self, x, i):
        sl = self._slices[i]
        if self.blocks is not None:
            return self.blocks[i] @ (x[sl] - self.x_star[sl])
        return self._rows[i] @ x - self.b[sl]

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "partition": list(self.partition.sizes),
            "M": self.M.tolist(),
            "x_star": self.x_star.tolist(),
            "separable": self.blocks is not None,
            "certificates": {
                "L": None if self.L is None else list(self.L),
                "beta_bar": None if self.beta_bar is None else list(self.beta_bar),
                "rho": self.rho,
            },
        }


def _check_symmetric_psd(Q: np.ndarray, label: str) -> float:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionError(f"{label}: expected a square matrix, got shape {Q.shape}")
    scale = max(1.0, float(np.abs(Q).max()))
    if np.abs(Q - Q.T).max() > SYM_TOL * scale:
        raise ValueError(f"{label} is not symmetric")
    eig = np.linalg.eigvalsh(Q)
    lam_max = float(eig[-1])
    if lam_max <= 0:
        raise ValueError(f"{label} needs a positive largest eigenvalue, got {lam_max}")
    if eig[0] < -SYM_TOL * scale:
        raise ValueError(f"{label} is not positive semidefinite (min eigenvalue {eig[0]})")
    return lam_max


def make_separable_cocoercive(partition: BlockPartition, Q_blocks: Sequence, x_star) -> LinearBlockOperator:
    """``[G(x)]_i = Q_i (x_i - x*_i)`` with symmetric PSD ``Q_i``.

    Declares ``beta_bar_i = 1/lambda_max(Q_i)`` and ``L_i = lambda_max(Q_i)``;
    both are exact for this construction, and ``rho = 0``.
    """
    if len(Q_blocks) != partition.n:
        raise DimensionError(f"{len(Q_blocks)} blocks for a {partition.n}-block partition")
    lam = []
    for i, (Q, size) in enumerate(zip(Q_blocks, partition.sizes)):
        Q = np.asarray(Q, dtype=float)
        if Q.shape != (size, size):
            raise DimensionError(f"Q_{i} has shape {Q.shape}, block size is {size}")
        lam.append(_check_symmetric_psd(Q, f"Q_{i}"))
    M = scipy.linalg.block_diag(*[np.asarray(Q, dtype=float) for Q in Q_blocks])
    return LinearBlockOperator(partition, M, x_star, blocks=Q_blocks, L=lam,
                               beta_bar=[1.0 / v for v in lam], rho=0.0)


def weak_minty_rho(M: np.ndarray, tol: float = 1e-8, rho_cap: float = 1e8) -> float:
    """Smallest ``rho >= 0`` with ``M + M^T + 2 rho M^T M`` PSD (bisection)."""
    M = np.asarray(M, dtype=float)
    S = M + M.T
    K = M.T @ M
    scale = max(1.0, float(np.abs(S).max()))

    def feasible(rho):
        return np.linalg.eigvalsh(S + 2.0 * rho * K)[0] >= -1e-12 * scale

    if feasible(0.0):
        return 0.0
    hi = 1.0
    while not feasible(hi):
        hi *= 2.0
        if hi > rho_cap:
            raise CertificateUnavailable(
                "no finite weak-Minty parameter: M^T M is singular in a direction "
                "where the symmetric part of M is negative"
            )
    lo = 0.0 if hi == 1.0 else hi / 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def make_linear_weak_minty(M, x_star, partition: BlockPartition | None = None,
                           separable: bool | None = None) -> LinearBlockOperator:
    """``G(x) = M (x - x*)`` with computed ``L_i`` and ``rho`` certificates.

    ``L_i`` is the spectral norm of block-row ``i`` of ``M``; ``rho`` comes
    from :func:`weak_minty_rho`.  A block-diagonal ``M`` is detected (or
    forced with ``separable``) and evaluated blockwise.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"M must be square, got shape {M.shape}")
    if partition is None:
        partition = BlockPartition((M.shape[0],))
    slices = partition.slices()
    L = [float(np.linalg.norm(M[sl], 2)) for sl in slices]
    rho = weak_minty_rho(M)
    if separable is None:
        mask = np.zeros_like(M, dtype=bool)
        for sl in slices:
            mask[sl, sl] = True
        separable = not np.any(M[~mask])
    blocks = [M[sl, sl].copy() for sl in slices] if separable else None
    return LinearBlockOperator(partition, M, x_star, blocks=blocks, L=L, rho=rho)


def operator_from_dict(data: dict) -> LinearBlockOperator:
    """Inverse of :meth:`LinearBlockOperator.to_dict`."""
    if data.get("kind") != "linear":
        raise ValueError(f"unsupported operator kind {data.get('kind')!r}")
    partition = BlockPartition(tuple(data["partition"]))
    M = np.asarray(data["M"], dtype=float)
    cert = data.get("certificates", {}) or {}
    blocks = None
    if data.get("separable"):
        blocks = [M[sl, sl].copy() for sl in partition.slices()]
    return LinearBlockOperator(partition, M, data["x_star"], blocks=blocks, L=cert.get("L"),
                               beta_bar=cert.get("beta_bar"), rho=cert.get("rho"))


def save_operator(G: LinearBlockOperator, path) -> None:
    with open(path, "w") as fh:
        json.dump(G.to_dict(), fh)


def load_operator(path) -> LinearBlockOperator:
    with open(path) as fh:
        return operator_from_dict(json.load(fh))


# -- random instances ---------------------------------------------------------

def random_psd(size: int, rng: np.random.Generator, eig_lo: float = 0.0, eig_hi: float = 1.0,
               rank: int | None = None) -> np.ndarray:
    """Random symmetric PSD matrix with spectrum drawn in ``[eig_lo, eig_hi]``.

    The largest eigenvalue is pinned to ``eig_hi``.
    """
    Qm, _ = np.linalg.qr(rng.standard_normal((size, size)))
    eig = rng.uniform(eig_lo, eig_hi, size)
    eig[0] = eig_hi
    if rank is not None:
        eig[rank:] = 0.0
    Q = (Qm * eig) @ Qm.T
    return 0.5 * (Q + Q.T)


def random_separable_cocoercive(partition: BlockPartition, rng: np.random.Generator,
                                eig_hi: Sequence[float] | float = 1.0, eig_lo: float = 0.0,
                                x_star=None) -> LinearBlockOperator:
    if np.isscalar(eig_hi):
        eig_hi = [float(eig_hi)] * partition.n
    Q = [random_psd(s, rng, eig_lo, h) for s, h in zip(partition.sizes, eig_hi)]
    if x_star is None:
        x_star = rng.standard_normal(partition.p)
    return make_separable_cocoercive(partition, Q, x_star)


def random_monotone_linear(partition: BlockPartition, rng: np.random.Generator,
                           separable: bool = True, skew: float = 1.0, x_star=None,
                           scale: float = 1.0) -> LinearBlockOperator:
    """``M = S + K`` with ``S`` PSD and ``K`` skew-symmetric (so ``rho = 0``).

    With ``separable`` both parts are block-diagonal.
    """
    p = partition.p
    if separable:
        S = scipy.linalg.block_diag(*[random_psd(s, rng, 0.0, 1.0) for s in partition.sizes])
        Ks = []
        for s in partition.sizes:
            A = rng.standard_normal((s, s))
            Ks.append(skew * (A - A.T) / 2.0)
        K = scipy.linalg.block_diag(*Ks)
    else:
        S = random_psd(p, rng, 0.0, 1.0)
        A = rng.standard_normal((p, p))
        K = skew * (A - A.T) / 2.0
    M = scale * (S + K) / max(1.0, np.linalg.norm(S + K, 2))
    if x_star is None:
        x_star = rng.standard_normal(p)
    return make_linear_weak_minty(M, x_star, partition, separable=separable)


# -- certificate checks -------------------------------------------------------

@dataclass
class CheckReport:
    """Outcome of a sampled inequality check; ``worst`` is the smallest margin."""

    name: str
    passed: bool
    worst: float
    samples: int
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst margin {self.worst:.3e} over {self.samples} samples"


def check_weak_minty(G: BlockOperator, rho: float, points, slack: float = 1e-10) -> CheckReport:
    """Check ``<Gx, x - x*> + rho ||Gx||^2 >= -slack`` at each trial point."""
    if G.x_star is None:
        raise MissingCertificate("weak-Minty check needs the operator's known solution")
    worst = np.inf
    count = 0
    for x in points:
        x = np.asarray(x, dtype=float)
        g = G.eval_full(x)
        margin = float(g @ (x - G.x_star) + rho * (g @ g))
        worst = min(worst, margin)
        count += 1
    return CheckReport("weak_minty", bool(worst >= -slack), float(worst), count, {"rho": rho})


def check_block_lipschitz(G: BlockOperator, rng: np.random.Generator, n_pairs: int = 10_000,
                          radius: float = 1.0) -> CheckReport:
    """Sample pairs differing in one block; check the declared ``L_i``.

    The reported margin is ``L_i ||x_i - y_i|| (1 + 1e-10) - ||[Gx]_i - [Gy]_i||``.
    """
    if G.L is None:
        raise MissingCertificate("operator declares no block Lipschitz constants")
    worst = np.inf
    for _ in range(n_pairs):
        i = int(rng.integers(G.n))
        sl = G.partition.slice(i)
        x = radius * rng.standard_normal(G.p)
        y = x.copy()
        y[sl] += radius * rng.standard_normal(sl.stop - sl.start)
        lhs = np.linalg.norm(G.eval_block(x, i) - G.eval_block(y, i))
        rhs = G.L[i] * np.linalg.norm(x[sl] - y[sl]) * (1.0 + 1e-10)
        worst = min(worst, rhs - lhs)
    return CheckReport("block_lipschitz", bool(worst >= 0.0), float(worst), n_pairs)


def check_block_cocoercive(G: BlockOperator, rng: np.random.Generator, n_pairs: int = 10_000,
                           radius: float = 1.0, slack: float = 1e-10) -> CheckReport:
    """Check ``<[Gx]_i-[Gy]_i, x_i-y_i> >= beta_bar_i ||[Gx]_i-[Gy]_i||^2`` on samples."""
    if G.beta_bar is None:
        raise MissingCertificate("operator declares no co-coercivity constants")
    worst = np.inf
    for _ in range(n_pairs):
        x = radius * rng.standard_normal(G.p)
        y = radius * rng.standard_normal(G.p)
        gx, gy = G.eval_full(x), G.eval_full(y)
        for i, sl in enumerate(G.partition.slices()):
            dg = gx[sl] - gy[sl]
            scale = 1.0 + float(np.abs(dg).max() * np.abs(x[sl] - y[sl]).max())
            margin = (float(dg @ (x[sl] - y[sl])) - G.beta_bar[i] * float(dg @ dg)) / scale
            worst = min(worst, margin)
    return CheckReport("block_cocoercive", bool(worst >= -slack), float(worst), n_pairs)


def check_block_consistency(G: BlockOperator, rng: np.random.Generator, n_points: int = 100,
                            rtol: float = 1e-12) -> CheckReport:
    """``eval_block`` must agree with slices of ``eval_full``."""
    worst = np.inf
    for _ in range(n_points):
        x = rng.standard_normal(G.p)
        g = G.eval_full(x)
        scale = 1.0 + float(np.abs(g).max())
        for i, sl in enumerate(G.partition.slices()):
            err = float(np.abs(G.eval_block(x, i) - g[sl]).max()) / scale
            worst = min(worst, rtol - err)
    return CheckReport("block_consistency", bool(worst >= 0.0), float(worst), n_points)


# -- resolvents ---------------------------------------------------------------

def resolvent_affine(M, b, lam: float, v) -> np.ndarray:
    """Solve ``y + lam (M y + b) = v`` for the affine operator ``A(y) = M y + b``."""
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float)
    b = np.zeros(v.shape) if b is None else np.asarray(b, dtype=float)
    if lam == 0.0:
        return v.copy()
    system = np.eye(M.shape[0]) + lam * M
    y = np.linalg.solve(system, v - lam * b)
    res = np.linalg.norm(system @ y + lam * b - v)
    if res > RESOLVENT_RTOL * (1.0 + np.linalg.norm(v)):
        raise ResolventError(f"resolvent residual {res:.3e} above tolerance")
    return y


def soft_threshold(v, thresh: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def resolvent_prox(kind: str, lam: float, v, *, mu: float = 0.0, lo=None, hi=None) -> np.ndarray:
    """Closed-form resolvents: ``soft_threshold`` (of ``mu ||.||_1``), ``box`` or ``zero``."""
    v = np.asarray(v, dtype=float)
    if kind == "zero":
        return v.copy()
    if kind == "soft_threshold":
        return soft_threshold(v, lam * mu)
    if kind == "box":
        lo = -np.inf if lo is None else lo
        hi = np.inf if hi is None else hi
        if np.any(np.asarray(lo) > np.asarray(hi)):
            raise ValueError("box bounds need lo <= hi")
        return np.clip(v, lo, hi)
    raise ValueError(f"unknown resolvent kind {kind!r}")


class Resolvent:
    """Resolvent ``v -> J_{lam A}(v)`` of a maximally monotone ``A``.

    Affine operators (``A(y) = M y + b``) also expose the forward map and
    cache one LU factorization per scale ``lam``.
    """

    def __init__(self, kind: str = "zero", *, M=None, b=None, mu: float = 0.0, lo=None, hi=None):
        if kind not in ("affine", "soft_threshold", "box", "zero"):
            raise ValueError(f"unknown resolvent kind {kind!r}")
        self.kind = kind
        self.M = None if M is None else np.asarray(M, dtype=float)
        self.b = None if b is None else np.asarray(b, dtype=float)
        if kind == "affine":
            if self.M is None:
                raise ValueError("affine resolvent needs M")
            if self.b is None:
                self.b = np.zeros(self.M.shape[0])
        self.mu = float(mu)
        self.lo, self.hi = lo, hi
        self._lu: dict[float, tuple] = {}

    @property
    def has_forward(self) -> bool:
        return self.kind in ("affine", "zero")

    def forward(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "affine":
            return self.M @ y + self.b
        if self.kind == "zero":
            return np.zeros_like(y)
        raise ValueError(f"{self.kind} operator is not single-valued here")

    def apply(self, v: np.ndarray, lam: float) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind != "affine":
            return resolvent_prox(self.kind, lam, v, mu=self.mu, lo=self.lo, hi=self.hi)
        if lam == 0.0:
            return v.copy()
        lu = self._lu.get(lam)
        if lu is None:
            system = np.eye(self.M.shape[0]) + lam * self.M
            lu = scipy.linalg.lu_factor(system)
            self._lu[lam] = lu
        rhs = v - lam * self.b
        y = scipy.linalg.lu_solve(lu, rhs)
        res = np.linalg.norm(y + lam * (self.M @ y) - rhs)
        if res > RESOLVENT_RTOL * (1.0 + np.linalg.norm(v)):
            raise ResolventError(f"resolvent residual {res:.3e} above tolerance")
        return y

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "affine":
            out["M"] = self.M.tolist()
            out["b"] = self.b.tolist()
        elif self.kind == "soft_threshold":
            out["mu"] = self.mu
        elif self.kind == "box":
            out["lo"] = None if self.lo is None else np.asarray(self.lo).tolist()
            out["hi"] = None if self.hi is None else np.asarray(self.hi).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Resolvent":
        kind = data["kind"]
        if kind == "affine":
            return cls("affine", M=data["M"], b=data.get("b"))
        if kind == "soft_threshold":
            return cls("soft_threshold", mu=data["mu"])
        if kind == "box":
            return cls("box", lo=data.get("lo"), hi=data.get("hi"))
        return cls(kind)


def check_firm_nonexpansive(J: Resolvent, lam: float, dim: int, rng: np.random.Generator,
                            n_pairs: int = 1000, slack: float = 1e-10) -> CheckReport:
    """``<Jv - Jw, v - w> >= ||Jv - Jw||^2`` on sampled pairs."""
    worst = np.inf
    for _ in range(n_pairs):
        v = rng.standard_normal(dim) * 3.0
        w = rng.standard_normal(dim) * 3.0
        d = J.apply(v, lam) - J.apply(w, lam)
        worst = min(worst, float(d @ (v - w) - d @ d))
    return CheckReport("firm_nonexpansive", bool(worst >= -slack), float(worst), n_pairs)
