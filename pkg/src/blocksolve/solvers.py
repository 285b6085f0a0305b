"""RCOG, direct ARCOG and the practical ARCOG kernel, with their parameters.

All kernels share one convention: a step consumes the current iterate, the
previous iterate and a block index ``i`` and touches ``G`` only through two
evaluations of block ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from blocksolve.blockcore import BlockDistribution
from blocksolve.operators import BlockOperator, MissingCertificate

TAU_FLOOR = 1e-250


class InfeasibleParameters(ValueError):
    """Parameters violate a step-size or schedule condition of the theory."""


class RenormalizationNeeded(FloatingPointError):
    """The practical kernel's scaling factor ``tau`` fell below ``TAU_FLOOR``."""


# -- RCOG ---------------------------------------------------------------------

@dataclass(frozen=True)
class RcogParams:
    """Constant step sizes for RCOG.

    ``psi`` is the coefficient of ``||G x^k||^2`` in the expected decrease of
    the RCOG potential.
    """

    omega: float
    gamma: float
    eta: float
    rho: float
    rho_bar: float
    p_min: float
    psi: float = field(init=False)

    def __post_init__(self):
        d = self.eta - self.gamma
        psi = 2 * self.omega * d * (self.omega * self.gamma - self.rho - 2 * self.omega * d / self.p_min)
        object.__setattr__(self, "psi", psi)

    def violations(self) -> list[str]:
        """Conditions of the step-size rule that fail (empty when feasible)."""
        w, g, e, r = self.omega, self.gamma, self.eta, self.rho
        out = []
        if not w > 0:
            out.append("omega > 0")
        if not abs(r) < self.rho_bar:
            out.append("|rho| < rho_bar")
        if not max(r, 0.0) / w < g:
            out.append("[rho]_+/omega < gamma")
        if not g <= self.rho_bar / w * (1 + 1e-15):
            out.append("gamma <= rho_bar/omega")
        if not g < e:
            out.append("gamma < eta")
        if not e < g + (w * g - r) * self.p_min / (2 * w):
            out.append("eta < gamma + (omega*gamma - rho) p_min / (2 omega)")
        if not self.psi > 0:
            out.append("psi > 0")
        return out

    def validate(self) -> "RcogParams":
        bad = self.violations()
        if bad:
            raise InfeasibleParameters("RCOG step sizes violate: " + "; ".join(bad))
        return self


def rcog_rho_bar(L, dist: BlockDistribution) -> float:
    """``min_i sqrt(p_i) / (2 L_i)`` over blocks with ``L_i > 0``."""
    vals = [math.sqrt(q) / (2.0 * li) for q, li in zip(dist.probs, L) if li > 0]
    if not vals:
        raise InfeasibleParameters("all block Lipschitz constants are zero")
    return min(vals)


def derive_rcog_params(omega: float, rho: float, L, dist: BlockDistribution,
                       gamma: float | None = None, eta: float | None = None) -> RcogParams:
    """Step sizes for RCOG from ``omega``, ``rho`` and per-block ``L``.

    Without overrides, uses ``gamma = ([rho]_+ + rho_bar) / (2 omega)`` and
    ``eta = gamma + (omega gamma - rho) p_min / (4 omega)``.  Every condition
    of the step-size rule is checked before returning.
    """
    if len(L) != dist.n:
        raise InfeasibleParameters(f"{len(L)} Lipschitz constants for {dist.n} blocks")
    if not omega > 0:
        raise InfeasibleParameters(f"omega must be positive, got {omega}")
    rho_bar = rcog_rho_bar(L, dist)
    if not abs(rho) < rho_bar:
        raise InfeasibleParameters(f"|rho| = {abs(rho)} must be below rho_bar = {rho_bar}")
    if gamma is None:
        gamma = (max(rho, 0.0) + rho_bar) / (2.0 * omega)
    if eta is None:
        eta = gamma + (omega * gamma - rho) * dist.p_min / (4.0 * omega)
    return RcogParams(float(omega), float(gamma), float(eta), float(rho), rho_bar, dist.p_min).validate()


def rcog_step(x_cur: np.ndarray, x_prev: np.ndarray, G: BlockOperator, params: RcogParams,
              dist: BlockDistribution, i: int) -> np.ndarray:
    """One RCOG step on block ``i``; returns a new array."""
    sl = G.partition.slice(i)
    d = params.eta * G.eval_block(x_cur, i) - params.gamma * G.eval_block(x_prev, i)
    x_next = x_cur.copy()
    x_next[sl] -= (params.omega / dist.probs[i]) * d
    return x_next


# -- ARCOG schedule -----------------------------------------------------------

def arcog_schedule_at(nu: float, k: int) -> tuple[float, float, float, float]:
    """``(t_k, theta_k, gamma_k, eta_k)`` for the ``nu``-schedule (``k >= -1``)."""
    if not nu > 3:
        raise InfeasibleParameters(f"nu must exceed 3, got {nu}")
    if k < -1:
        raise ValueError("schedule is defined for k >= -1")
    t_k = (k + 2 * nu + 1) / nu
    t_next = (k + 2 * nu + 2) / nu
    theta = (t_k - 2) / t_next
    eta = (t_k - 1) / t_next
    return t_k, theta, theta, eta


@dataclass(frozen=True)
class ConstantSchedule:
    """Fixed ``(theta, eta, gamma)``; ``theta = 0`` turns ARCOG into RCOG."""

    theta: float
    eta: float
    gamma: float

    def coefficients(self, k: int) -> tuple[float, float, float]:
        return self.theta, self.eta, self.gamma


@dataclass(frozen=True)
class ArcogSchedule:
    """The ``nu``-schedule with ``mu_k = 1``, plus the constants ``beta_i``.

    ``beta`` are the per-block constants entering the potential; they must
    satisfy ``0 < beta_i <= beta_bar_i`` when checked against an operator.
    """

    nu: float
    beta: tuple[float, ...]

    def __post_init__(self):
        if not self.nu > 3:
            raise InfeasibleParameters(f"nu must exceed 3, got {self.nu}")
        beta = tuple(float(b) for b in self.beta)
        if any(not b > 0 for b in beta):
            raise InfeasibleParameters("beta_i must be positive")
        object.__setattr__(self, "beta", beta)

    def t(self, k: int) -> float:
        return (k + 2 * self.nu + 1) / self.nu

    def at(self, k: int) -> tuple[float, float, float, float]:
        return arcog_schedule_at(self.nu, k)

    def coefficients(self, k: int) -> tuple[float, float, float]:
        _, theta, gamma, eta = arcog_schedule_at(self.nu, k)
        return theta, eta, gamma

    def omega_ceiling(self, dist: BlockDistribution) -> float:
        return 2.0 * min(b * q for b, q in zip(self.beta, dist.probs))

    def default_omega(self, dist: BlockDistribution) -> float:
        return 0.5 * self.omega_ceiling(dist)

    def check(self, omega: float, dist: BlockDistribution, beta_bar=None) -> None:
        if len(self.beta) != dist.n:
            raise InfeasibleParameters(f"{len(self.beta)} beta values for {dist.n} blocks")
        if not 0 < omega < self.omega_ceiling(dist):
            raise InfeasibleParameters(
                f"need 0 < omega < 2 min_i beta_i p_i = {self.omega_ceiling(dist)}, got {omega}"
            )
        if beta_bar is not None and any(b > bb * (1 + 1e-15) for b, bb in zip(self.beta, beta_bar)):
            raise InfeasibleParameters("need beta_i <= beta_bar_i for every block")


def default_arcog_schedule(G: BlockOperator, nu: float = 4.0, beta_frac: float = 0.9) -> ArcogSchedule:
    """Schedule with ``beta_i = beta_frac * beta_bar_i``."""
    if G.beta_bar is None:
        raise MissingCertificate("ARCOG needs co-coercivity constants beta_bar")
    return ArcogSchedule(nu, tuple(beta_frac * b for b in G.beta_bar))


@dataclass
class ScheduleCheck:
    passed: bool
    worst_cond: float
    worst_gamma_gap: float
    checked: int


def check_schedule_conditions(nu: float, k_max: int, mu: float = 1.0) -> ScheduleCheck:
    """Verify the lemma's parameter conditions for ``0 <= k <= k_max``.

    Checks ``theta_k = (t_k - mu - 1)/t_{k+1}``,
    ``gamma_k = t_{k+1} theta_k eta_k / (t_{k+1} theta_k + 1)`` and
    ``t_k eta_{k-1} >= (1 - 1/(t_k - mu)) t_{k+1} eta_k``.
    """
    worst_cond = np.inf
    worst_gap = 0.0
    ok = True
    for k in range(k_max + 1):
        t_k, theta, gamma, eta = arcog_schedule_at(nu, k)
        t_next = arcog_schedule_at(nu, k + 1)[0]
        eta_prev = arcog_schedule_at(nu, k - 1)[3]
        if abs(theta - (t_k - mu - 1) / t_next) > 1e-14:
            ok = False
        gamma_rule = t_next * theta * eta / (t_next * theta + 1)
        worst_gap = max(worst_gap, abs(gamma - gamma_rule))
        cond = t_k * eta_prev - (1 - 1 / (t_k - mu)) * t_next * eta
        worst_cond = min(worst_cond, cond)
        if not (0 < theta < 1):
            ok = False
    ok = ok and worst_cond >= -1e-12 and worst_gap <= 1e-12
    return ScheduleCheck(ok, float(worst_cond), float(worst_gap), k_max + 1)


# -- ARCOG kernels ------------------------------------------------------------

def arcog_step_direct(x_cur: np.ndarray, x_prev: np.ndarray, G: BlockOperator, schedule, omega: float,
                      dist: BlockDistribution, i: int, k: int) -> np.ndarray:
    """Full-vector momentum plus a correction on block ``i``."""
    theta, eta, gamma = schedule.coefficients(k)
    sl = G.partition.slice(i)
    d = eta * G.eval_block(x_cur, i) - gamma * G.eval_block(x_prev, i)
    x_next = x_cur + theta * (x_cur - x_prev)
    x_next[sl] -= (omega / dist.probs[i]) * d
    return x_next


@dataclass
class PracticalState:
    """State of the practical kernel: ``x^k = z^k + c_k w^k``.

    ``z_prev, w_prev, c_prev`` describe ``x^{k-1}`` the same way.  ``tau`` is
    ``tau_k``.  ``last`` is the block changed by the previous step: the two
    slots differ only there, so advancing the previous slot costs one block
    copy.
    """

    z: np.ndarray
    w: np.ndarray
    z_prev: np.ndarray
    w_prev: np.ndarray
    c: float
    c_prev: float
    tau: float
    k: int = 0
    last: int | None = None
    rebases: int = 0

    @classmethod
    def initial(cls, x0: np.ndarray) -> "PracticalState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), np.zeros_like(x0), x0.copy(), np.zeros_like(x0), 0.0, 0.0, 1.0)

    def copy(self) -> "PracticalState":
        return PracticalState(self.z.copy(), self.w.copy(), self.z_prev.copy(), self.w_prev.copy(),
                              self.c, self.c_prev, self.tau, self.k, self.last, self.rebases)

    @property
    def conditioning(self) -> float:
        """``c_k / tau_k``: the amplification of rounding in ``z + c w``."""
        return abs(self.c) / self.tau


def reconstruct_iterate(state: PracticalState) -> np.ndarray:
    """``x^k = z^k + c_k w^k``."""
    return state.z + state.c * state.w


def reconstruct_previous(state: PracticalState) -> np.ndarray:
    return state.z_prev + state.c_prev * state.w_prev


def rebase(state: PracticalState) -> None:
    """Re-anchor the representation in place without changing ``x^k, x^{k-1}``.

    Folds ``c_k w`` into ``z`` (so ``c_k`` becomes 0) and rescales so that
    ``tau_k = 1``.  The kernel's update rules are invariant under both
    transformations, so subsequent iterates are unchanged in exact
    arithmetic.
    """
    a, s = state.c, state.tau
    state.z += a * state.w
    state.z_prev += a * state.w_prev
    state.w *= s
    state.w_prev *= s
    state.c_prev = (state.c_prev - a) / s
    state.c = 0.0
    state.tau = 1.0
    state.rebases += 1


def _sync_prev(state: PracticalState, sl: slice) -> None:
    state.z_prev[sl] = state.z[sl]
    state.w_prev[sl] = state.w[sl]


def practical_update(state: PracticalState, G: BlockOperator, schedule, omega: float,
                     dist: BlockDistribution, i: int, rebase_ratio: float | None = None) -> PracticalState:
    """In-place practical step at iteration ``state.k`` on block ``i``.

    With ``rebase_ratio`` set, :func:`rebase` runs whenever
    ``c_k / tau_k`` exceeds it; with ``None`` the arithmetic follows the
    plain recursion and only ``tau`` underflow is guarded.
    """
    k = state.k
    if rebase_ratio is not None and state.conditioning > rebase_ratio:
        rebase(state)
    theta, eta, gamma = schedule.coefficients(k)
    tau_next = state.tau * theta
    if tau_next < TAU_FLOOR:
        raise RenormalizationNeeded(f"tau_{k + 1} = {tau_next:.3e} fell below {TAU_FLOOR:g}")
    d = (eta * G.eval_block_affine(state.z, state.w, state.c, i)
         - gamma * G.eval_block_affine(state.z_prev, state.w_prev, state.c_prev, i))
    if state.last is not None:
        _sync_prev(state, G.partition.slice(state.last))
    sl = G.partition.slice(i)
    step = omega / (dist.probs[i] * tau_next)
    state.w[sl] -= step * d
    state.z[sl] += (step * state.c) * d
    state.c_prev = state.c
    state.c = state.c + tau_next
    state.tau = tau_next
    state.k = k + 1
    state.last = i
    return state


def arcog_step_practical(state: PracticalState, G: BlockOperator, schedule, omega: float,
                         dist: BlockDistribution, i: int, k: int | None = None,
                         rebase_ratio: float | None = None) -> PracticalState:
    """Practical ARCOG step returning a new state; ``k`` must match ``state.k``."""
    if k is not None and k != state.k:
        raise ValueError(f"state is at iteration {state.k}, step requested for {k}")
    return practical_update(state.copy(), G, schedule, omega, dist, i, rebase_ratio)


# -- constants ----------------------------------------------------------------

@dataclass(frozen=True)
class ArcogConstants:
    Lambda0: float
    Lambda1: float
    Lambda2: float
    Lambda3: float
    C0: float
    C1: float
    C2: float

    def grad_envelope(self, k, omega: float, nu: float, dist0_sq: float):
        """Bound on ``E||G x^k||^2``: ``8 (C0 + 2 omega C2) / (omega^2 (k + nu)^2) ||x^0 - x*||^2``."""
        k = np.asarray(k, dtype=float)
        return 8.0 * (self.C0 + 2.0 * omega * self.C2) / (omega ** 2 * (k + nu) ** 2) * dist0_sq

    def step_envelope(self, k, omega: float, nu: float, dist0_sq: float):
        """Bound on ``E||x^{k+1} - x^k||^2``."""
        k = np.asarray(k, dtype=float)
        return 2.0 * omega * self.C2 / (k + 2 * nu + 2) ** 2 * dist0_sq


def arcog_constants(nu: float, omega: float, beta, beta_bar, dist: BlockDistribution) -> ArcogConstants:
    if not nu > 3:
        raise InfeasibleParameters(f"nu must exceed 3, got {nu}")
    beta = [float(b) for b in beta]
    beta_bar = [float(b) for b in beta_bar]
    if any(not 0 < b <= bb for b, bb in zip(beta, beta_bar)):
        raise InfeasibleParameters("need 0 < beta_i <= beta_bar_i")
    slack = [2 * b * q - omega for b, q in zip(beta, dist.probs)]
    if not omega > 0 or min(slack) <= 0:
        raise InfeasibleParameters(
            f"need 0 < omega < 2 min_i beta_i p_i = {2 * min(b * q for b, q in zip(beta, dist.probs))}"
        )
    lam0 = max(1.0 / bb for bb in beta_bar)
    lam1 = min(s / q for s, q in zip(slack, dist.probs))
    lam2 = min((1 - q) / s for s, q in zip(slack, dist.probs))
    lam3 = min(1.0 / s for s in slack)
    one = 1.0 + omega * lam0
    # lam2 = 0 only when a single block carries all the mass
    tail = omega * nu ** 2 / lam2 if lam2 > 0 else math.inf
    C0 = 2 * one * (2 * nu * (nu - 1) + tail) + omega ** 2 * (nu - 1) ** 2 * lam0 ** 2 / 4
    C1 = 4 * (2 * C0 + nu * (nu - 3) * one) / ((nu - 3) * omega ** 2)
    C2 = nu ** 2 * one / lam3 + omega * nu * C1 / 4
    return ArcogConstants(lam0, lam1, lam2, lam3, C0, C1, C2)


# -- solver drivers -----------------------------------------------------------

class RcogSolver:
    """Iterates RCOG in place.

    ``x`` and ``x_prev`` differ only in the block changed last, so the
    previous iterate is refreshed by copying that one block.
    """

    name = "rcog"

    def __init__(self, G: BlockOperator, x0, params: RcogParams, dist: BlockDistribution):
        self.G, self.params, self.dist = G, params, dist
        self.x = np.array(x0, dtype=float)
        self.x_prev = self.x.copy()
        self.k = 0
        self._last: int | None = None
        self._slices = G.partition.slices()

    def step(self, i: int) -> None:
        p = self.params
        d = p.eta * self.G.eval_block(self.x, i) - p.gamma * self.G.eval_block(self.x_prev, i)
        if self._last is not None:
            sl = self._slices[self._last]
            self.x_prev[sl] = self.x[sl]
        self.x[self._slices[i]] -= (p.omega / self.dist.probs[i]) * d
        self._last = i
        self.k += 1

    def current(self) -> np.ndarray:
        return self.x

    def previous(self) -> np.ndarray:
        return self.x_prev


class ArcogDirectSolver:
    name = "arcog_direct"

    def __init__(self, G: BlockOperator, x0, schedule, omega: float, dist: BlockDistribution):
        self.G, self.schedule, self.omega, self.dist = G, schedule, float(omega), dist
        self.x = np.array(x0, dtype=float)
        self.x_prev = self.x.copy()
        self.k = 0

    def step(self, i: int) -> None:
        x_next = arcog_step_direct(self.x, self.x_prev, self.G, self.schedule, self.omega,
                                   self.dist, i, self.k)
        self.x_prev, self.x = self.x, x_next
        self.k += 1

    def current(self) -> np.ndarray:
        return self.x

    def previous(self) -> np.ndarray:
        return self.x_prev


class ArcogPracticalSolver:
    name = "arcog_practical"

    def __init__(self, G: BlockOperator, x0, schedule, omega: float, dist: BlockDistribution,
                 rebase_ratio: float | None = 1e4):
        self.G, self.schedule, self.omega, self.dist = G, schedule, float(omega), dist
        self.state = PracticalState.initial(x0)
        self.rebase_ratio = rebase_ratio

    @property
    def k(self) -> int:
        return self.state.k

    def step(self, i: int) -> None:
        practical_update(self.state, self.G, self.schedule, self.omega, self.dist, i, self.rebase_ratio)

    def current(self) -> np.ndarray:
        return reconstruct_iterate(self.state)

    def previous(self) -> np.ndarray:
        return reconstruct_previous(self.state)
