"""Simulation loop: wires request/prediction/cost streams to policy arms,
measures utilities, regret against the best static decision in hindsight,
budget violation and the theoretical bounds, and persists everything.

Per-slot order for every arm::

    x_t = policy.decide(prediction_t, prices_t)
    serve q_t with x_t; record f_t(x_t) and g_t(x_t)
    policy.observe(c_t, g_t(x_t))
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Infeasible, Polytope, diameter
from .model import ConfigError, Instance, Request, SparseGradient, gradient_of
from .policies import OEC, XC, POLICY_KINDS, best_in_hindsight, make_policy
from .workload import (PRNG_NAME, PREDICTION_MODES, REQUEST_KINDS, CostSource,
                       PredictionSource, make_request_source, spawn_seeds)

__all__ = ["ExperimentConfig", "ArmResult", "RunSummary", "SlotRecord", "run",
           "prefix_benchmark", "regret_series", "violation_series", "bound_series",
           "export", "read_export"]

STREAMS = ("requests", "predictions", "costs")
BENCHMARK_MODES = ("prefix", "full_horizon")
BOUND_SLACK = 1e-6          # per-slot slack in bound assertions


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """A complete experiment document.

    ``policies`` is a list of arm entries ``{"name", "kind", ...}``; an arm
    may carry its own ``"predictions"`` entry overriding the run-level
    prediction stream.  ``benchmark`` selects how the hindsight comparator
    is computed: ``"prefix"`` re-solves it on ``c_{1:t}`` at every stride
    point, ``"full_horizon"`` solves it once on ``c_{1:T}``.  It defaults to
    ``"full_horizon"`` when a cost model is present and ``"prefix"``
    otherwise.
    """

    instance: dict
    policies: list
    requests: dict = field(default_factory=lambda: {"kind": "zipf", "zeta": 1.2})
    predictions: dict = field(default_factory=lambda: {"mode": "none"})
    costs: Optional[dict] = None
    horizon: int = 1000
    stride: int = 50
    benchmark: Optional[str] = None
    seed: int = 0
    out_dir: Optional[str] = None
    sequential: bool = False
    name: str = "experiment"

    FIELDS = ("name", "instance", "policies", "requests", "predictions", "costs",
              "horizon", "stride", "benchmark", "seed", "out_dir", "sequential")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment document must be a JSON object")
        unknown = sorted(set(d) - set(cls.FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("instance", "policies"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.FIELDS}

    @property
    def benchmark_mode(self) -> str:
        if self.benchmark is not None:
            return self.benchmark
        return "full_horizon" if self.costs else "prefix"

    def violations(self) -> list[str]:
        """Every invariant the document breaks (empty when valid)."""
        out = []
        try:
            inst = Instance.from_dict(self.instance)
            out += inst.validate_violations()
        except (ConfigError, ValueError, TypeError) as e:
            out.append(f"instance: {e}")
            inst = None
        if not isinstance(self.horizon, int) or self.horizon < 1:
            out.append("T >= 1 required")
        if not isinstance(self.stride, int) or self.stride < 1:
            out.append("stride k >= 1 required")
        if self.benchmark is not None and self.benchmark not in BENCHMARK_MODES:
            out.append(f"benchmark must be one of {BENCHMARK_MODES}")
        kind = self.requests.get("kind", "zipf")
        if kind not in REQUEST_KINDS:
            out.append(f"unknown request source {kind!r}")
        if kind in ("zipf",) and float(self.requests.get("zeta", 1.2)) < 0:
            out.append("zeta >= 0 required")
        if kind == "trace" and "path" not in self.requests:
            out.append("trace source needs a path")
        out += _prediction_violations(self.predictions, "predictions")
        if self.costs is not None:
            for key in ("price_scale", "budget_std", "budget_scale"):
                if float(self.costs.get(key, 1.0)) < 0:
                    out.append(f"costs.{key} >= 0 required")
        if not self.policies:
            out.append("at least one policy arm required")
        names = set()
        for k, arm in enumerate(self.policies):
            label = arm.get("name", f"#{k}")
            kind = arm.get("kind")
            if kind not in POLICY_KINDS:
                out.append(f"policy {label}: unknown kind {kind!r}")
            if label in names:
                out.append(f"policy {label}: duplicate arm name")
            names.add(label)
            if not str(label).replace("-", "").replace("_", "").isalnum():
                out.append(f"policy {label}: names may only use letters, digits, '-' and '_'")
            if kind == "oec":
                beta = float(arm.get("beta", 0.5))
                if not 0.0 <= beta < 1.0:
                    out.append("β ∈ [0,1) required")
                if float(arm.get("a", 1.0)) < 0:
                    out.append("a >= 0 required")
                if self.costs is None:
                    out.append(f"policy {label}: oec needs a cost model")
            if arm.get("sigma") is not None and float(arm["sigma"]) <= 0:
                out.append(f"policy {label}: sigma > 0 required")
            if "predictions" in arm:
                out += _prediction_violations(arm["predictions"], f"policy {label} predictions")
        return out

    def check(self) -> "ExperimentConfig":
        v = self.violations()
        if v:
            raise ConfigError("; ".join(v))
        return self


def _prediction_violations(spec: dict, where: str) -> list[str]:
    out = []
    mode = spec.get("mode", "none")
    if mode not in PREDICTION_MODES:
        out.append(f"{where}: unknown mode {mode!r}")
    rho = float(spec.get("rho", 1.0))
    if not 0.0 <= rho <= 1.0:
        out.append("ρ ∈ [0,1] required")
    tau = spec.get("tau", 1)
    if int(tau) != tau or int(tau) < 1:
        out.append("τ >= 1 required")
    return out


# ---------------------------------------------------------------------------
# results


@dataclass
class SlotRecord:
    t: int
    request: Request
    predicted_file: int
    utility: dict
    cost: dict
    h: dict


@dataclass
class ArmResult:
    name: str
    kind: str
    util: np.ndarray
    cost: np.ndarray
    h: np.ndarray
    extras: dict = field(default_factory=dict)
    error: Optional[str] = None
    slots_done: int = 0
    max_violation: float = 0.0
    unconverged: int = 0          # projections that hit the iteration cap
    seconds: float = 0.0
    decisions: Optional[list] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunSummary:
    config: ExperimentConfig
    instance: Instance
    files: np.ndarray
    locations: np.ndarray
    pred_files: np.ndarray
    prices: Optional[np.ndarray]
    budgets: Optional[np.ndarray]
    arms: list
    bench_points: np.ndarray
    bench_values: np.ndarray          # cumulative comparator utility at bench_points
    bench_mode: str
    bench_per_slot: Optional[np.ndarray] = None   # c_t . x* when x* is fixed
    seeds: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return int(self.files.size)

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def cumulative_utility(self, name: str) -> np.ndarray:
        return np.cumsum(self.arm(name).util)

    def regret(self, name: str, which: str = "util") -> np.ndarray:
        """Regret at ``bench_points``; ``which`` picks an extra per-slot
        utility column (``"util_p"``/``"util_o"`` for the experts)."""
        a = self.arm(name)
        u = a.util if which == "util" else a.extras[which]
        return self.bench_values - np.cumsum(u)[self.bench_points - 1]

    def slot(self, t: int) -> SlotRecord:
        k = t - 1
        return SlotRecord(t, Request(int(self.files[k]), int(self.locations[k]), t),
                          int(self.pred_files[k]),
                          {a.name: float(a.util[k]) for a in self.arms},
                          {a.name: float(a.cost[k]) for a in self.arms},
                          {a.name: float(a.h[k]) for a in self.arms})


# ---------------------------------------------------------------------------
# the loop


def _stride_points(T: int, k: int) -> np.ndarray:
    pts = list(range(k, T + 1, k))
    if not pts or pts[-1] != T:
        pts.append(T)
    return np.asarray(pts, dtype=np.int64)


def _prediction_stream(spec: dict, files: np.ndarray, N: int, seed) -> np.ndarray:
    return PredictionSource(spec.get("mode", "none"), float(spec.get("rho", 1.0)),
                            int(spec.get("tau", 1)), seed).predict(files, N)


def _run_arm(inst: Instance, spec: dict, files, locs, preds, prices, budgets,
             record_decisions: bool = False) -> ArmResult:
    T = files.size
    poly = Polytope(inst)
    elastic = Polytope(inst, elastic=True) if prices is not None else None
    res = ArmResult(spec["name"], spec["kind"], np.full(T, np.nan), np.full(T, np.nan), np.full(T, np.nan))
    if record_decisions:
        res.decisions = []
    N, J = inst.num_files, inst.num_caches
    t0 = time.perf_counter()
    try:
        pol = make_policy(spec, poly, elastic)
        check_poly = pol.poly
        is_xc = isinstance(pol, XC)
        if is_xc:
            res.extras["util_p"] = np.full(T, np.nan)
            res.extras["util_o"] = np.full(T, np.nan)
            res.extras["weight_o"] = np.full(T, np.nan)
        is_oec = isinstance(pol, OEC)
        if is_oec:
            res.extras["lambda"] = np.full(T, np.nan)
        for k in range(T):
            n, i, pf = int(files[k]), int(locs[k]), int(preds[k])
            pred = gradient_of(inst, Request(pf, i, k + 1)) if pf >= 0 else None
            s = prices[k] if prices is not None else None
            x = pol.decide(pred, s)
            res.max_violation = max(res.max_violation, check_poly.violation(x))
            c = gradient_of(inst, Request(n, i, k + 1))
            res.util[k] = c.dot(x)
            g = None
            if prices is not None:
                Y = x[: N * J].reshape(N, J).sum(axis=0)
                g = float(s @ Y - budgets[k])
                res.cost[k] = g
            if is_xc:
                res.extras["util_p"][k] = c.dot(pol.yp)
                res.extras["util_o"][k] = c.dot(pol.yo)
                res.extras["weight_o"][k] = pol.u[1]
            if is_oec:
                res.extras["lambda"][k] = pol.lam
            if record_decisions:
                res.decisions.append(x.copy())
            pol.observe(c, g)
            res.h[k] = pol.last_h
            res.slots_done = k + 1
        res.unconverged = getattr(pol, "unconverged", 0)
    except Exception as e:                       # an arm failure never aborts the run
        res.error = f"{type(e).__name__}: {e}"
    res.seconds = time.perf_counter() - t0
    return res


def gradient_sums(inst: Instance, files, locs, points) -> list[np.ndarray]:
    """Dense ``c_{1:t}`` for every ``t`` in ``points`` (ascending)."""
    acc = np.zeros(inst.dim)
    out = []
    k = 0
    for t in points:
        while k < t:
            gradient_of(inst, Request(int(files[k]), int(locs[k]))).add_to(acc)
            k += 1
        out.append(acc.copy())
    return out


def prefix_benchmark(poly: Polytope, files, locs, points, prices=None, budgets=None) -> np.ndarray:
    """Best static utility on every prefix ``1..t`` for ``t`` in ``points``."""
    inst = poly.instance
    vals = []
    for t, cs in zip(points, gradient_sums(inst, files, locs, points)):
        if prices is None:
            _, v = best_in_hindsight(poly, cs)
        else:
            _, v = best_in_hindsight(poly, cs, prices[:t], budgets[:t])
        vals.append(v)
    return np.asarray(vals)


def _benchmark(cfg: ExperimentConfig, inst, files, locs, prices, budgets, points):
    constrained = prices is not None
    poly = Polytope(inst, elastic=constrained)
    if cfg.benchmark_mode == "prefix":
        return prefix_benchmark(poly, files, locs, points, prices, budgets), None
    (cs,) = gradient_sums(inst, files, locs, [files.size])
    if constrained:
        xs, _ = best_in_hindsight(poly, cs, prices, budgets)
    else:
        xs, _ = best_in_hindsight(poly, cs)
    per_slot = np.array([gradient_of(inst, Request(int(f), int(l))).dot(xs) for f, l in zip(files, locs)])
    return np.cumsum(per_slot)[points - 1], per_slot


def run(config, record_decisions: bool = False, workers: Optional[int] = None) -> RunSummary:
    """Execute an experiment; deterministic given the config (seed included)."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.check()
    inst = Instance.from_dict(cfg.instance)
    T = cfg.horizon
    seeds = spawn_seeds(cfg.seed, STREAMS)
    src = make_request_source(cfg.requests, inst.num_files, inst.num_locations, seeds["requests"])
    trace = src.take(T)
    files, locs = trace.files, trace.locations
    preds = _prediction_stream(cfg.predictions, files, inst.num_files, seeds["predictions"])
    prices = budgets = None
    if cfg.costs is not None:
        prices, budgets = CostSource.from_dict(cfg.costs, inst.num_caches, seeds["costs"]).take(T)

    jobs = []
    for spec in cfg.policies:
        p = preds
        if "predictions" in spec:
            p = _prediction_stream(spec["predictions"], files, inst.num_files, seeds["predictions"])
        jobs.append((inst, spec, files, locs, p, prices, budgets, record_decisions))
    if workers is None:
        workers = 1 if cfg.sequential else min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            arms = list(ex.map(_run_arm_job, jobs))
    else:
        arms = [_run_arm(*j) for j in jobs]

    points = _stride_points(T, cfg.stride)
    try:
        bench, per_slot = _benchmark(cfg, inst, files, locs, prices, budgets, points)
    except Infeasible as e:
        raise RuntimeError(f"benchmark: {e}") from None
    seed_info = {"seed": cfg.seed, "prng": PRNG_NAME,
                 "streams": {k: {"entropy": str(v.entropy), "spawn_key": list(v.spawn_key)}
                             for k, v in seeds.items()}}
    return RunSummary(cfg, inst, files, locs, preds, prices, budgets, arms, points, bench,
                      cfg.benchmark_mode, per_slot, seed_info)


def _run_arm_job(job):
    return _run_arm(*job)


# ---------------------------------------------------------------------------
# derived series


@dataclass
class RegretSeries:
    t: np.ndarray
    regret: np.ndarray
    exact: np.ndarray          # False where the value is interpolated

    @property
    def average(self) -> np.ndarray:
        return self.regret / self.t


def regret_series(summary: RunSummary, arm: str, which: str = "util", dense: bool = False) -> RegretSeries:
    """``R_t`` at the stride points, or for every slot with ``dense=True``
    (linear interpolation between stride points, flagged in ``exact``).

    With a fixed full-horizon comparator every slot is exact.
    """
    pts = summary.bench_points
    R = summary.regret(arm, which)
    if not dense:
        return RegretSeries(pts.copy(), R, np.ones(pts.size, bool))
    T = summary.horizon
    t = np.arange(1, T + 1)
    a = summary.arm(arm)
    u = a.util if which == "util" else a.extras[which]
    if summary.bench_per_slot is not None:
        return RegretSeries(t, np.cumsum(summary.bench_per_slot) - np.cumsum(u), np.ones(T, bool))
    exact = np.zeros(T, bool)
    exact[pts - 1] = True
    # interpolate the comparator, not the regret, so exact points stay exact
    bench = np.interp(t, np.concatenate([[0], pts]), np.concatenate([[0.0], summary.bench_values]))
    R_dense = bench - np.cumsum(u)
    R_dense[pts - 1] = R
    return RegretSeries(t, R_dense, exact)


def violation_series(summary: RunSummary, arm: str) -> tuple[np.ndarray, np.ndarray]:
    """``(V_t, V_t / t)`` with ``V_t = sum_{i<=t} g_i(x_i)``."""
    g = summary.arm(arm).cost
    V = np.cumsum(g)
    return V, V / np.arange(1, g.size + 1)


def prediction_error_bound(instance: Instance, h_sum, capacity: Optional[float] = None) -> np.ndarray:
    C = instance.max_capacity if capacity is None else capacity
    return 2.0 * math.sqrt(2.0 * (1.0 + instance.num_caches * C)) * np.sqrt(np.asarray(h_sum, float))


def bound_series(summary: RunSummary, arm: str) -> dict:
    """Right-hand sides of the regret/violation bounds from measured data.

    Returns a dict ``name -> (t, values)``.  Every arm gets ``"oftrl"``
    (the prediction-error bound on its own ``h``); OEC arms add
    ``"elastic_regret"`` and ``"elastic_violation"``; XC arms add
    ``"experts"`` (``2 w sqrt(2t) + min(R_p, R_o)``, at stride points).
    """
    inst = summary.instance
    a = summary.arm(arm)
    T = summary.horizon
    t = np.arange(1, T + 1)
    hs = np.cumsum(np.nan_to_num(a.h))
    out = {"oftrl": (t, prediction_error_bound(inst, hs))}
    if a.kind == "oec":
        spec = next(p for p in summary.config.policies if p["name"] == arm)
        aa, beta = float(spec.get("a", 1.0)), float(spec.get("beta", 0.5))
        s = float((summary.config.costs or {}).get("price_scale", 1.0))
        J, C = inst.num_caches, inst.max_capacity
        D = diameter(Polytope(inst, elastic=True))
        extra = aa * (s * J * C) ** 2 / (2.0 * (1.0 - beta)) * t ** (1.0 - beta)
        out["elastic_regret"] = (t, D * np.sqrt(hs) + extra)
        pts = summary.bench_points
        R = summary.regret(arm)
        if aa > 0:
            tp = pts.astype(float)
            inner = (2.0 * D * tp ** beta / aa * np.sqrt(hs[pts - 1])
                     + tp * (s * J * C) ** 2 / (1.0 - beta) - 2.0 * R * tp ** beta / aa)
            out["elastic_violation"] = (pts, np.sqrt(np.maximum(inner, 0.0)))
    if a.kind == "xc":
        pts = summary.bench_points
        w = inst.w_max
        Rp, Ro = summary.regret(arm, "util_p"), summary.regret(arm, "util_o")
        out["experts"] = (pts, 2.0 * w * np.sqrt(2.0 * pts) + np.minimum(Rp, Ro))
    return out


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".17g")


def export(summary: RunSummary, out_dir) -> dict:
    """Write ``slots.csv``, ``series.csv`` and ``metadata.json`` into ``out_dir``.

    ``slots.csv`` has columns ``t,file,loc,pred_file`` and, per arm,
    ``{arm}_util,{arm}_cost,{arm}_h``.  ``series.csv`` holds the stride-point
    comparator, cumulative utility, regret, violation and bound per arm.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from None
    paths = {"slots": out / "slots.csv", "series": out / "series.csv", "metadata": out / "metadata.json"}
    arms = summary.arms
    try:
        with paths["slots"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["t", "file", "loc", "pred_file"]
            for a in arms:
                head += [f"{a.name}_util", f"{a.name}_cost", f"{a.name}_h"]
            w.writerow(head)
            for k in range(summary.horizon):
                row = [k + 1, int(summary.files[k]), int(summary.locations[k]), int(summary.pred_files[k])]
                for a in arms:
                    row += [_fmt(a.util[k]), _fmt(a.cost[k]), _fmt(a.h[k])]
                w.writerow(row)
        with paths["series"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["t", "benchmark"]
            cols = [summary.bench_points, summary.bench_values]
            for a in arms:
                head += [f"{a.name}_cum_util", f"{a.name}_regret", f"{a.name}_violation", f"{a.name}_bound"]
                cu = np.cumsum(a.util)[summary.bench_points - 1]
                V, _ = violation_series(summary, a.name)
                _, b = bound_series(summary, a.name)["oftrl"]
                cols += [cu, summary.bench_values - cu, V[summary.bench_points - 1], b[summary.bench_points - 1]]
            w.writerow(head)
            for r in range(summary.bench_points.size):
                w.writerow([int(summary.bench_points[r])] + [_fmt(c[r]) for c in cols[1:]])
        meta = {
            "config": summary.config.to_dict(),
            "seeds": summary.seeds,
            "prng": PRNG_NAME,
            "code_version": _version(),
            "benchmark": summary.bench_mode,
            "horizon": summary.horizon,
            "arms": [{"name": a.name, "kind": a.kind, "error": a.error, "slots_done": a.slots_done}
                     for a in arms],
        }
        paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write results under {out}: {e}") from None
    return paths


def _version() -> str:
    from . import __version__

    return __version__


def read_export(out_dir) -> dict:
    """Load the files written by :func:`export` back into arrays."""
    out = Path(out_dir)

    def table(p):
        with p.open(newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        cols = {}
        for j, name in enumerate(head):
            vals = [r[j] for r in body]
            if name in ("t", "file", "loc", "pred_file"):
                cols[name] = np.array([int(v) for v in vals], dtype=np.int64)
            else:
                cols[name] = np.array([float(v) for v in vals])
        return head, cols

    shead, slots = table(out / "slots.csv")
    ehead, series = table(out / "series.csv")
    meta = json.loads((out / "metadata.json").read_text())
    return {"slots": slots, "slots_header": shead, "series": series, "series_header": ehead, "metadata": meta}
