"""Run configurations, problem wiring, trace files and plot-data export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from blocksolve.blockcore import BlockDistribution, BlockPartition, UniformStream
from blocksolve.diagnostics import (
    LyapunovArcog,
    LyapunovRcog,
    arcog_descent_margin,
    fit_rate_slope,
    rcog_descent_margin,
    summable_checks,
)
from blocksolve.fedsim import AcFedDrSimulation, FedOgSimulation
from blocksolve.operators import (
    BlockOperator,
    operator_from_dict,
    random_monotone_linear,
    random_separable_cocoercive,
)
from blocksolve.solvers import (
    ArcogDirectSolver,
    ArcogPracticalSolver,
    ArcogSchedule,
    RcogSolver,
    arcog_constants,
    derive_rcog_params,
)
from blocksolve.splitting import (
    DRSOperator,
    FBFSOperator,
    SplitProblem,
    lambda_range,
    random_affine_split_problem,
)

TRACE_HEADER = ("k", "block", "res_sq", "step_sq", "dist_sq", "lyapunov", "margin")
SOLVERS = ("rcog", "arcog_direct", "arcog_practical")
FEDERATED = ("fedog", "acfeddr")
GENERATORS = ("separable_cocoercive", "monotone_linear", "split_affine")
ENVELOPE_SLACK = 1.2


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending line when known."""


# -- config -------------------------------------------------------------------

@dataclass
class Diagnostics:
    lyapunov: bool = True
    descent_margins: bool = False
    summable_checks: bool = False


@dataclass
class RunConfig:
    problem: dict | str
    solver: str = "arcog_practical"
    nu: float = 4.0
    omega: float | None = None
    rho: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    max_iters: int = 1000
    tol: float = 0.0
    lam: float | None = None
    beta: float = 1.0
    beta_frac: float = 0.9
    x0_seed: int = 0
    record_every: int = 1
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_KEYS = {f for f in RunConfig.__dataclass_fields__} | {"seed"}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def parse_config(text: str, source: str = "<config>", base_dir: str | os.PathLike = ".") -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: config must be a JSON object")

    def fail(key, msg):
        line = _line_of(text, key)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {key}: {msg}")

    for key in data:
        if key not in _KEYS:
            fail(key, "unknown key")
    if "problem" not in data:
        raise ConfigError(f"{source}: missing required key 'problem'")
    kw = dict(data)
    if "seed" in kw:
        if "seeds" in kw:
            fail("seed", "give either seed or seeds, not both")
        kw["seeds"] = [kw.pop("seed")]
    diag = kw.pop("diagnostics", {}) or {}
    if not isinstance(diag, dict):
        fail("diagnostics", "must be an object")
    for key in diag:
        if key not in Diagnostics.__dataclass_fields__:
            fail(key, "unknown diagnostics toggle")
    try:
        cfg = RunConfig(diagnostics=Diagnostics(**diag), **kw)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    if cfg.solver not in SOLVERS + FEDERATED:
        fail("solver", f"must be one of {SOLVERS + FEDERATED}, got {cfg.solver!r}")
    if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        fail("seeds" if "seeds" in data else "seed", "seeds must be a nonempty list of integers")
    if not isinstance(cfg.max_iters, int) or cfg.max_iters < 0:
        fail("max_iters", "must be a nonnegative integer")
    if not isinstance(cfg.record_every, int) or cfg.record_every < 1:
        fail("record_every", "must be a positive integer")
    if cfg.rho is not None and not isinstance(cfg.rho, (int, float)):
        fail("rho", "must be a number")
    if cfg.tol < 0:
        fail("tol", "must be nonnegative")
    if not cfg.nu > 3:
        fail("nu", "the momentum schedule needs nu > 3")
    if isinstance(cfg.problem, str):
        path = Path(base_dir) / cfg.problem
        if not path.is_file():
            fail("problem", f"file {str(path)!r} does not exist")
    elif not isinstance(cfg.problem, dict):
        fail("problem", "must be an object or a file path")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), path.parent)


# -- problems -----------------------------------------------------------------

def build_problem(spec: dict | str, base_dir=".") -> BlockOperator | SplitProblem:
    """Operator or split problem from an inline spec, a generator spec or a file."""
    if isinstance(spec, str):
        spec = json.loads((Path(base_dir) / spec).read_text())
    kind = spec.get("kind")
    if kind == "linear":
        return operator_from_dict(spec)
    if kind == "split":
        return SplitProblem.from_dict(spec)
    if kind == "generate":
        gen = spec.get("type")
        rng = np.random.default_rng(spec.get("seed", 0))
        n, p = int(spec["n"]), int(spec["p"])
        if gen == "separable_cocoercive":
            return random_separable_cocoercive(BlockPartition.uniform(n, p), rng,
                                               eig_lo=spec.get("eig_lo", 0.0))
        if gen == "monotone_linear":
            return random_monotone_linear(BlockPartition.uniform(n, p), rng,
                                          separable=spec.get("separable", True))
        if gen == "split_affine":
            return random_affine_split_problem(n, p, rng, B_kind=spec.get("B_kind", "affine"))
        raise ConfigError(f"unknown generator {gen!r}; expected one of {GENERATORS}")
    raise ConfigError(f"unknown problem kind {kind!r}")


@dataclass
class Setup:
    """Everything a single-seed run needs, with the derived constants."""

    G: BlockOperator
    dist: BlockDistribution
    x0: np.ndarray
    solver: str
    params: object = None
    schedule: ArcogSchedule | None = None
    omega: float | None = None
    constants: object = None
    problem: SplitProblem | None = None
    lam: float | None = None
    beta: float | None = None

    @property
    def dist0_sq(self) -> float:
        if self.G.x_star is None:
            return math.nan
        e = self.x0 - self.G.x_star
        return float(e @ e)

    def bounds(self) -> dict:
        out = {"dist0_sq": self.dist0_sq}
        if self.params is not None:
            out["psi"] = self.params.psi
        if self.constants is not None:
            out.update(omega=self.omega, nu=self.schedule.nu, C0=self.constants.C0,
                       C1=self.constants.C1, C2=self.constants.C2)
        if self.lam is not None:
            out["lam"] = self.lam
            # sum_i ||x_i - u_hat||^2 <= ||S x||^2 / (1 - L lam)^2
            out["cert_scale"] = 1.0 / (1.0 - self.problem.L * self.lam) ** 2
        if self.beta is not None:
            out["beta"] = self.beta
        return out


def prepare(cfg: RunConfig, base_dir=".") -> Setup:
    """Wire problem and solver; all feasibility checks run here."""
    obj = build_problem(cfg.problem, base_dir)
    problem = None
    lam = beta = None
    if cfg.solver in FEDERATED:
        if not isinstance(obj, SplitProblem):
            raise ConfigError(f"solver {cfg.solver!r} needs a split problem")
        problem = obj
        if cfg.solver == "fedog":
            lam = cfg.lam if cfg.lam is not None else lambda_range(problem.L, problem.rho).midpoint()
            G = FBFSOperator(problem, lam)
        else:
            beta = cfg.beta
            G = DRSOperator(problem, beta)
    else:
        if isinstance(obj, SplitProblem):
            raise ConfigError(f"solver {cfg.solver!r} needs an operator, not a split problem")
        G = obj
    dist = BlockDistribution.uniform(G.n)
    rng = np.random.default_rng(cfg.x0_seed)
    base = G.x_star if G.x_star is not None else np.zeros(G.p)
    x0 = base + rng.standard_normal(G.p)
    setup = Setup(G, dist, x0, cfg.solver, problem=problem, lam=lam, beta=beta)
    if cfg.solver in ("rcog", "fedog"):
        if cfg.solver == "rcog":
            rho = cfg.rho if cfg.rho is not None else (G.rho or 0.0)
        else:
            rho = 0.0
        setup.params = derive_rcog_params(cfg.omega or 1.0, rho, G.L, dist)
    else:
        beta_vals = (beta,) * G.n if cfg.solver == "acfeddr" else tuple(cfg.beta_frac * b for b in G.beta_bar)
        sched = ArcogSchedule(cfg.nu, beta_vals)
        omega = cfg.omega if cfg.omega is not None else sched.default_omega(dist)
        sched.check(omega, dist, G.beta_bar)
        setup.schedule, setup.omega = sched, omega
        setup.constants = arcog_constants(cfg.nu, omega, sched.beta, G.beta_bar, dist)
    return setup


# -- single runs --------------------------------------------------------------

def _make_solver(setup: Setup):
    if setup.solver == "rcog":
        return RcogSolver(setup.G, setup.x0, setup.params, setup.dist)
    if setup.solver == "arcog_direct":
        return ArcogDirectSolver(setup.G, setup.x0, setup.schedule, setup.omega, setup.dist)
    return ArcogPracticalSolver(setup.G, setup.x0, setup.schedule, setup.omega, setup.dist)


def run_seed(cfg: RunConfig, setup: Setup, seed: int, series: dict | None = None) -> list[tuple]:
    """Trace rows ``(k, block, res_sq, step_sq, dist_sq, lyapunov, margin)``; ``block = -1`` at k=0.

    When ``series`` is a dict it receives per-iteration arrays of the four
    summable quantities (accelerated solvers only).
    """
    G, dist = setup.G, setup.dist
    diag = cfg.diagnostics
    solver = _make_solver(setup)
    stream = UniformStream(seed)
    x_star = G.x_star

    def row(k, block):
        x, xp = solver.current(), solver.previous()
        g = G.eval_full(x)
        dx = x - xp
        dist_sq = lyap = margin = None
        if x_star is not None:
            e = x - x_star
            dist_sq = float(e @ e)
            if setup.solver == "rcog":
                if diag.descent_margins:
                    margin, lyap = rcog_descent_margin(x, xp, G, setup.params, dist)
                elif diag.lyapunov:
                    lyap = LyapunovRcog.evaluate(x, xp, G, setup.params).value
            else:
                if diag.descent_margins:
                    margin, lyap = arcog_descent_margin(x, xp, G, setup.schedule, setup.omega, dist, k=k)
                elif diag.lyapunov:
                    lyap = LyapunovArcog.evaluate(x, xp, G, setup.schedule, setup.omega, k).value
        return (k, block, float(g @ g), float(dx @ dx), dist_sq, lyap, margin)

    track = series is not None and setup.schedule is not None
    if track:
        for key in ("corr_sq", "step_sq", "res_sq", "blockdiff"):
            series[key] = []
        g_prev = G.eval_full(solver.current())

    def track_step(k):
        nonlocal g_prev
        x, xp = solver.current(), solver.previous()
        g = G.eval_full(x)
        _, eta, gamma = setup.schedule.coefficients(k)
        corr = eta * g - gamma * g_prev
        diff = g - g_prev
        series["corr_sq"].append(float(corr @ corr))
        series["step_sq"].append(float((x - xp) @ (x - xp)))
        series["res_sq"].append(float(g @ g))
        series["blockdiff"].append(sum(b * float(diff[sl] @ diff[sl])
                                       for b, sl in zip(G.beta_bar, G.partition.slices())))
        g_prev = g

    rows = [row(0, -1)]
    if track:
        track_step(0)
    for k in range(cfg.max_iters):
        i = stream.next_block(dist)
        solver.step(i)
        if track:
            track_step(k + 1)
        record = (k + 1) % cfg.record_every == 0 or k + 1 == cfg.max_iters
        if record or cfg.tol > 0:
            r = row(k + 1, i)
            done = cfg.tol > 0 and r[2] <= cfg.tol
            if record or done:
                rows.append(r)
            if done:
                break
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACE_HEADER)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])


def read_trace(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        cols = list(zip(*rd)) or [()] * len(header)
    return {h: np.array([float(v) if v != "" else np.nan for v in c]) for h, c in zip(header, cols)}


def _run_one(args):
    cfg_dict, base_dir, seed, out_dir, chash = args
    cfg = parse_config(json.dumps(cfg_dict), base_dir=base_dir)
    setup = prepare(cfg, base_dir)
    t0 = time.perf_counter()
    if cfg.solver in FEDERATED:
        from blocksolve.fedsim import run_federated
        x0 = setup.x0.reshape(setup.problem.n, setup.problem.p)
        if cfg.solver == "fedog":
            sim = FedOgSimulation(setup.problem, setup.lam, setup.params, x0, setup.dist)
        else:
            sim = AcFedDrSimulation(setup.problem, setup.beta, setup.schedule, setup.omega, x0, setup.dist)
        tr = run_federated(sim, cfg.max_iters, seed, cfg.record_every)
        trace_path = Path(out_dir) / f"trace_{chash}_seed{seed}.csv"
        tr.write_csv(trace_path)
        tr.write_ledger(Path(out_dir) / f"ledger_{chash}_seed{seed}.jsonl")
        ys = [r[2] for r in tr.rows]
        ks = [r[0] for r in tr.rows]
    else:
        series = {} if cfg.diagnostics.summable_checks else None
        rows = run_seed(cfg, setup, seed, series)
        trace_path = Path(out_dir) / f"trace_{chash}_seed{seed}.csv"
        write_trace(trace_path, rows)
        ys = [r[2] for r in rows]
        ks = [r[0] for r in rows]
        margins = [r[6] for r in rows if r[6] is not None]
    wall = time.perf_counter() - t0
    rec = {"seed": seed, "trace": trace_path.name, "iterations": ks[-1], "final_residual": ys[-1],
           "wall_time": wall}
    if cfg.solver not in FEDERATED:
        if margins:
            rec["worst_descent_margin"] = max(margins)
        if series:
            rec["_series"] = series
    return rec, ks, ys


def _workers(n_tasks: int) -> int:
    env = os.environ.get("BLOCKSOLVE_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def execute(cfg: RunConfig, base_dir=".") -> dict:
    """Run every seed, write traces and ``summary.json``; returns the summary."""
    setup = prepare(cfg, base_dir)  # validate before anything runs
    out_dir = Path(base_dir) / cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    (out_dir / "config.json").write_text(cfg.to_json())
    tasks = [(cfg.to_dict(), str(base_dir), s, str(out_dir), chash) for s in cfg.seeds]
    t0 = time.perf_counter()
    workers = _workers(len(tasks))
    if workers == 1:
        results = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, tasks))
    series = [r[0].pop("_series") for r in results if "_series" in r[0]]
    summary = {"config_hash": chash, "solver": cfg.solver, "seeds": cfg.seeds,
               "bounds": setup.bounds(), "runs": [r[0] for r in results]}
    if series and len({len(s["res_sq"]) for s in series}) == 1:
        mean = {key: np.mean([s[key] for s in series], axis=0) for key in series[0]}
        rep = summable_checks(mean, setup.schedule, setup.constants, setup.dist0_sq, setup.omega,
                              slack=ENVELOPE_SLACK)
        summary["summable_checks"] = {"sums": rep.sums, "bounds": rep.bounds, "slack": rep.slack,
                                      "satisfied": rep.passed}
    summary.update(_summary_checks(cfg, setup, results))
    summary["wall_time"] = time.perf_counter() - t0
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _summary_checks(cfg: RunConfig, setup: Setup, results) -> dict:
    out: dict = {}
    lengths = {len(r[2]) for r in results}
    if len(lengths) != 1:
        return out  # early stopping left ragged traces
    ks = np.asarray(results[0][1], dtype=float)
    mean = np.mean([r[2] for r in results], axis=0)
    D = setup.dist0_sq
    K = int(ks[-1])
    if K >= 100 and cfg.record_every == 1 and np.all(mean[10:] > 0):
        fit = fit_rate_slope(mean, (10, K), ks=ks)
        out["rate_fit"] = asdict(fit)
    if cfg.record_every == 1 and math.isfinite(D):
        if setup.solver == "rcog":
            ergodic = float(mean.mean())
            bound = 5 * D / (2 * setup.params.psi * (K + 1))
            out["ergodic_bound"] = {"value": ergodic, "bound": bound, "slack": ENVELOPE_SLACK,
                                    "satisfied": ergodic <= ENVELOPE_SLACK * bound}
        elif setup.solver == "fedog":
            # D sums over the n user copies
            ergodic = float(mean.mean())
            bound = 5 * D / (2 * setup.params.psi * (1 - setup.problem.L * setup.lam) ** 2 * (K + 1))
            out["ergodic_bound"] = {"value": ergodic, "bound": bound, "slack": ENVELOPE_SLACK,
                                    "satisfied": ergodic <= ENVELOPE_SLACK * bound}
        else:
            env = envelope(setup, ks)
            ratio = float(np.max(mean / env))
            out["envelope"] = {"max_ratio": ratio, "slack": ENVELOPE_SLACK,
                               "satisfied": ratio <= ENVELOPE_SLACK}
    return out


def envelope(setup: Setup, ks) -> np.ndarray:
    """The ``O(1/k^2)`` envelope on the squared residual (DR certificate scaled by ``beta^2``)."""
    env = setup.constants.grad_envelope(ks, setup.omega, setup.schedule.nu, setup.dist0_sq)
    if setup.solver == "acfeddr":
        env = setup.beta ** 2 * env
    return env


# -- plot data ----------------------------------------------------------------

PLOT_METRICS = ("res_sq", "step_sq", "dist_sq", "lyapunov")
FED_METRICS = ("certificate_residual",)


def export_plotdata(trace_dir) -> Path:
    """Seed-aggregated long-format CSV ``plotdata.csv`` in ``trace_dir``."""
    trace_dir = Path(trace_dir)
    summary_path = trace_dir / "summary.json"
    if not summary_path.is_file():
        raise FileNotFoundError(f"no summary.json in {trace_dir}")
    summary = json.loads(summary_path.read_text())
    traces = []
    for run in summary["runs"]:
        p = trace_dir / run["trace"]
        if not p.is_file():
            raise FileNotFoundError(f"missing trace {p}")
        traces.append(read_trace(p))
    if not traces:
        raise FileNotFoundError(f"no traces in {trace_dir}")
    fed = summary["solver"] in FEDERATED
    kcol = "round" if fed else "k"
    metrics = FED_METRICS if fed else PLOT_METRICS
    n_rows = min(len(t[kcol]) for t in traces)
    ks = traces[0][kcol][:n_rows]
    b = summary["bounds"]
    D = b.get("dist0_sq", math.nan)
    ergodic_bound = env = None
    if "psi" in b:
        ergodic_bound = 5 * D * b.get("cert_scale", 1.0) / (2 * b["psi"] * (ks + 1))
    if "C0" in b:
        w, nu = b["omega"], b["nu"]
        env = 8 * (b["C0"] + 2 * w * b["C2"]) / (w ** 2 * (ks + nu) ** 2) * D
        if "beta" in b:
            env = b["beta"] ** 2 * env
    out = trace_dir / "plotdata.csv"
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("metric", "k", "mean", "p10", "p90", "ergodic_bound", "envelope"))
        series = {m: np.array([t[m][:n_rows] for t in traces]) for m in metrics}
        first = metrics[0]
        series["running_mean_" + first] = np.cumsum(series[first], axis=1) / np.arange(1, n_rows + 1)
        for name, Y in series.items():
            if np.all(np.isnan(Y)):
                continue
            with np.errstate(all="ignore"):
                mean = np.mean(Y, axis=0)
                p10, p90 = np.percentile(Y, [10, 90], axis=0)
            for j in range(n_rows):
                eb = ergodic_bound[j] if ergodic_bound is not None and name.startswith("running_mean") else None
                ev = env[j] if env is not None and name == first else None
                wr.writerow((name, int(ks[j]), _fmt(float(mean[j])), _fmt(float(p10[j])),
                             _fmt(float(p90[j])), _fmt(None if eb is None else float(eb)),
                             _fmt(None if ev is None else float(ev))))
    return out
