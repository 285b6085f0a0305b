"""Potentials, exact conditional expectations, residual metrics and rate fits.

Single steps are checked exactly: the conditional expectation over the
sampled block is the finite sum ``sum_i p_i f(step(i))``.  Whole-run
expectations are approximated by averaging over seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from blocksolve.blockcore import BlockDistribution
from blocksolve.operators import BlockOperator, MissingCertificate
from blocksolve.solvers import (
    ArcogConstants,
    RcogParams,
    arcog_schedule_at,
    arcog_step_direct,
    rcog_step,
)

ENUM_CAP = 64
DESCENT_RTOL = 1e-12


class EnumerationCapExceeded(ValueError):
    """Too many blocks to enumerate the conditional expectation."""


def _require_x_star(G: BlockOperator, x_star):
    if x_star is not None:
        return np.asarray(x_star, dtype=float)
    if G.x_star is None:
        raise MissingCertificate("this check needs a known solution x*")
    return G.x_star


# -- potentials ---------------------------------------------------------------

@dataclass(frozen=True)
class LyapunovRcog:
    """``||x + omega gamma G x_prev - x*||^2 + ||x - x_prev||^2_sigma``."""

    anchor: float
    momentum: float

    @property
    def value(self) -> float:
        return self.anchor + self.momentum

    @classmethod
    def evaluate(cls, x_cur, x_prev, G: BlockOperator, params: RcogParams, x_star=None,
                 sigma=None, g_prev=None) -> "LyapunovRcog":
        x_star = _require_x_star(G, x_star)
        if g_prev is None:
            g_prev = G.eval_full(x_prev)
        a = x_cur + params.omega * params.gamma * g_prev - x_star
        dx = x_cur - x_prev
        if sigma is None:
            mom = float(dx @ dx)
        else:
            mom = sum(s * float(dx[sl] @ dx[sl]) for s, sl in zip(sigma, G.partition.slices()))
        return cls(float(a @ a), mom)


@dataclass(frozen=True)
class LyapunovArcog:
    """The accelerated potential at iteration ``k`` (with ``mu_k = 1``).

    ``inner = 2 omega t_k eta_{k-1} [<G x_prev, x_prev - x*> - sum_i beta_i ||[G x_prev]_i||^2]``,
    ``momentum = ||x_prev - x* + t_k (x - x_prev)||^2``, ``anchor = mu ||x_prev - x*||^2``.
    """

    inner: float
    momentum: float
    anchor: float

    @property
    def value(self) -> float:
        return self.inner + self.momentum + self.anchor

    @classmethod
    def evaluate(cls, x_cur, x_prev, G: BlockOperator, schedule, omega: float, k: int,
                 x_star=None, mu: float = 1.0, g_prev=None) -> "LyapunovArcog":
        x_star = _require_x_star(G, x_star)
        if g_prev is None:
            g_prev = G.eval_full(x_prev)
        t_k = arcog_schedule_at(schedule.nu, k)[0]
        eta_prev = arcog_schedule_at(schedule.nu, k - 1)[3]
        e = x_prev - x_star
        weighted = sum(b * float(g_prev[sl] @ g_prev[sl])
                       for b, sl in zip(schedule.beta, G.partition.slices()))
        inner = 2 * omega * t_k * eta_prev * (float(g_prev @ e) - weighted)
        m = e + t_k * (x_cur - x_prev)
        return cls(inner, float(m @ m), mu * float(e @ e))


# -- exact conditional expectation --------------------------------------------

def exact_conditional_step(stepper: Callable, x_cur, x_prev, G: BlockOperator, params,
                           dist: BlockDistribution, f: Callable, k: int | None = None,
                           cap: int = ENUM_CAP) -> float:
    """``E_k[f(x^{k+1}, x^k)] = sum_i p_i f(step_i, x_cur)``, enumerated exactly.

    ``stepper`` is :func:`rcog_step` (``params`` an :class:`RcogParams`),
    :func:`arcog_step_direct` (``params = (schedule, omega)`` and ``k``
    given), or any callable ``stepper(x_cur, x_prev, G, params, dist, i)``.
    ``f`` receives the next iterate and the current one.
    """
    if dist.n > cap:
        raise EnumerationCapExceeded(f"n={dist.n} exceeds the enumeration cap {cap}")
    total = 0.0
    for i, q in enumerate(dist.probs):
        if stepper is arcog_step_direct:
            if k is None:
                raise ValueError("the accelerated step needs the iteration counter k")
            schedule, omega = params
            x_next = arcog_step_direct(x_cur, x_prev, G, schedule, omega, dist, i, k)
        else:
            x_next = stepper(x_cur, x_prev, G, params, dist, i)
        total += q * f(x_next, x_cur)
    return total


def rcog_descent_margin(x_cur, x_prev, G: BlockOperator, params: RcogParams, dist: BlockDistribution,
                        x_star=None) -> tuple[float, float]:
    """``E_k[P_{k+1}] - P_k + psi ||G x^k||^2`` and ``P_k``.

    The first value is ``<= 0`` on certified instances.
    """
    x_star = _require_x_star(G, x_star)
    g_cur = G.eval_full(x_cur)
    p_k = LyapunovRcog.evaluate(x_cur, x_prev, G, params, x_star).value

    def f(x_next, x_now):
        return LyapunovRcog.evaluate(x_next, x_now, G, params, x_star, g_prev=g_cur).value

    e_next = exact_conditional_step(rcog_step, x_cur, x_prev, G, params, dist, f)
    return e_next - p_k + params.psi * float(g_cur @ g_cur), p_k


def arcog_descent_margin(x_cur, x_prev, G: BlockOperator, schedule, omega: float, dist: BlockDistribution,
                         x_star=None, k: int = 0) -> tuple[float, float]:
    """``E_k[P^_{k+1}] - P^_k`` (``<= 0`` on certified instances) and ``P^_k``."""
    x_star = _require_x_star(G, x_star)
    g_cur = G.eval_full(x_cur)
    p_k = LyapunovArcog.evaluate(x_cur, x_prev, G, schedule, omega, k, x_star).value

    def f(x_next, x_now):
        return LyapunovArcog.evaluate(x_next, x_now, G, schedule, omega, k + 1, x_star, g_prev=g_cur).value

    e_next = exact_conditional_step(arcog_step_direct, x_cur, x_prev, G, (schedule, omega), dist, f, k=k)
    return e_next - p_k, p_k


def within_descent_tolerance(margin: float, magnitude: float, rtol: float = DESCENT_RTOL) -> bool:
    return margin <= rtol * (1.0 + abs(magnitude))


# -- residuals and rates ------------------------------------------------------

@dataclass(frozen=True)
class ResidualRecord:
    res_sq: float
    step_sq: float
    dist_sq: float | None


def residual_metrics(x_cur, x_prev, G: BlockOperator, x_star=None) -> ResidualRecord:
    """``||G x||^2``, ``||x - x_prev||^2`` and ``||x - x*||^2`` (``None`` without ``x*``)."""
    g = G.eval_full(x_cur)
    dx = x_cur - x_prev
    if x_star is None:
        x_star = G.x_star
    dist = None
    if x_star is not None:
        e = x_cur - x_star
        dist = float(e @ e)
    return ResidualRecord(float(g @ g), float(dx @ dx), dist)


@dataclass(frozen=True)
class RateFit:
    k_lo: int
    k_hi: int
    slope: float
    intercept: float
    residual: float


def fit_rate_slope(y, window: tuple[int, int] | None = None, ks=None) -> RateFit:
    """Least-squares line through ``(log k, log y_k)`` on ``k_lo <= k <= k_hi``.

    ``y[j]`` is the value at ``k = ks[j]`` (default ``ks = 0, 1, ...``).
    """
    y = np.asarray(y, dtype=float)
    ks = np.arange(len(y)) if ks is None else np.asarray(ks, dtype=float)
    if window is None:
        window = (max(1, int(ks[0])), int(ks[-1]))
    k_lo, k_hi = window
    if k_lo < 1 or k_hi <= k_lo:
        raise ValueError(f"bad window {window}")
    mask = (ks >= k_lo) & (ks <= k_hi)
    if mask.sum() < 2:
        raise ValueError("fewer than two points in the window")
    yw = y[mask]
    if np.any(~(yw > 0)):
        raise ValueError("values must be positive on the fit window")
    lx, ly = np.log(ks[mask]), np.log(yw)
    (slope, intercept), res, *_ = np.polyfit(lx, ly, 1, full=True)
    resid = float(res[0]) if len(res) else 0.0
    return RateFit(int(k_lo), int(k_hi), float(slope), float(intercept), resid)


def decile_trend(y) -> tuple[float, float]:
    """Means of the first and last deciles of ``y``."""
    y = np.asarray(y, dtype=float)
    m = max(1, len(y) // 10)
    return float(y[:m].mean()), float(y[-m:].mean())


# -- summable results ---------------------------------------------------------

@dataclass
class SummableReport:
    sums: dict[str, float]
    bounds: dict[str, float]
    slack: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(self.sums[k] <= self.slack * self.bounds[k] for k in self.sums)


def summable_checks(trace: dict, schedule, constants: ArcogConstants, dist0_sq: float, omega: float,
                    slack: float = 1.2) -> SummableReport:
    """Partial sums of the four summable quantities against their bounds.

    ``trace`` holds arrays indexed by ``k = 0..K``: ``corr_sq``
    (``||eta_k G x^k - gamma_k G x^{k-1}||^2``), ``step_sq``
    (``||x^k - x^{k-1}||^2``), ``res_sq`` (``||G x^k||^2``) and ``blockdiff``
    (``sum_i beta_bar_i ||[G x^k - G x^{k-1}]_i||^2``).
    """
    nu = schedule.nu
    one = 1.0 + omega * constants.Lambda0
    k = np.arange(len(trace["res_sq"]), dtype=float)
    sums = {
        "corr": float(np.sum((k + 2 * nu + 2) ** 2 * np.asarray(trace["corr_sq"]))),
        "step": float(np.sum((k + nu + 1) * np.asarray(trace["step_sq"]))),
        "res": float(np.sum((k + nu + 1) * np.asarray(trace["res_sq"]))),
        "blockdiff": float(np.sum(((k + 1) ** 2 * np.asarray(trace["blockdiff"]))[1:])),
    }
    bounds = {
        "corr": 2 * nu ** 2 * one / (omega * constants.Lambda1) * dist0_sq,
        "step": nu * one * dist0_sq,
        "res": constants.C1 * dist0_sq,
        "blockdiff": constants.C2 * dist0_sq,
    }
    return SummableReport(sums, bounds, slack)
