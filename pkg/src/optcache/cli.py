"""Command-line front end.

    optcache run CONFIG|PRESET [--horizon T] [--seed S] [--out-dir D]
                               [--stride K] [--sequential] [--set KEY=VALUE ...]
    optcache validate CONFIG|PRESET
    optcache bench PRESET [--slots N] [--repeat R] [--budget-ms MS]
    optcache presets [--show NAME]

Exit codes: 0 ok, 1 runtime failure (including any aborted arm), 2 usage or
configuration error.  Every flag maps onto a key of the config document.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .model import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BENCH_BUDGET_MS = 24.0      # 5000 slots in two minutes


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# presets


def preset_names() -> list[str]:
    root = resources.files("optcache") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    if name not in preset_names():
        raise UsageError(f"unknown preset {name!r} (known: {', '.join(preset_names())})")
    text = (resources.files("optcache") / "presets" / f"{name}.json").read_text()
    return json.loads(text)


def resolve(target: str) -> dict:
    """A config document from a preset name or a JSON file path."""
    if target in preset_names():
        return load_preset(target)
    p = Path(target)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise UsageError(f"config file {target} not found")
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{target}: invalid JSON ({e})") from None
    raise UsageError(f"{target!r} is neither a preset nor a config file")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, pairs) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects
    and ``policies.<arm>.<key>`` addresses an arm by name."""
    from .harness import ExperimentConfig

    doc = json.loads(json.dumps(doc))
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not KEY=VALUE")
        key, val = pair.split("=", 1)
        parts = key.split(".")
        if parts[0] not in ExperimentConfig.FIELDS:
            raise UsageError(f"invalid override key {key!r}")
        node = doc
        for k, part in enumerate(parts[:-1]):
            if isinstance(node, list):
                match = [a for a in node if isinstance(a, dict) and a.get("name") == part]
                if not match:
                    raise UsageError(f"invalid override key {key!r}: no arm named {part!r}")
                node = match[0]
                continue
            if part not in node or node[part] is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, (dict, list)):
                raise UsageError(f"invalid override key {key!r}")
        if isinstance(node, list):
            raise UsageError(f"invalid override key {key!r}")
        node[parts[-1]] = _parse_value(val)
    return doc


def _flags_to_overrides(args) -> list[str]:
    out = []
    if getattr(args, "horizon", None) is not None:
        out.append(f"horizon={args.horizon}")
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "stride", None) is not None:
        out.append(f"stride={args.stride}")
    if getattr(args, "out_dir", None) is not None:
        out.append(f"out_dir={json.dumps(args.out_dir)}")
    if getattr(args, "sequential", False):
        out.append("sequential=true")
    return out + list(getattr(args, "set", None) or [])


def build_config(target: str, args):
    from .harness import ExperimentConfig

    doc = apply_overrides(resolve(target), _flags_to_overrides(args))
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    from .harness import export, run, violation_series

    cfg = build_config(args.target, args)
    cfg.check()
    summary = run(cfg)
    out_dir = cfg.out_dir or str(Path("results") / cfg.name)
    export(summary, out_dir)
    T = summary.horizon
    rows = [("arm", "avg utility", "R_T", "V_T", "status")]
    for a in summary.arms:
        if a.ok:
            R = summary.regret(a.name)[-1]
            V = violation_series(summary, a.name)[0][-1] if summary.prices is not None else float("nan")
            rows.append((a.name, f"{np.sum(a.util) / T:.4f}", f"{R:.2f}",
                         "-" if np.isnan(V) else f"{V:.2f}", "ok"))
        else:
            rows.append((a.name, "-", "-", "-", f"aborted at slot {a.slots_done + 1}: {a.error}"))
    rows.append(("benchmark", f"{summary.bench_values[-1] / T:.4f}", "", "", summary.bench_mode))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r[:4], widths)) + "  " + r[4])
    print(f"results written to {out_dir}")
    return EXIT_OK if all(a.ok for a in summary.arms) else EXIT_FAIL


def cmd_validate(args) -> int:
    from .harness import ExperimentConfig

    try:
        cfg = ExperimentConfig.from_dict(apply_overrides(resolve(args.target), args.set))
    except ConfigError as e:
        print(f"violation: {e}")
        return EXIT_USAGE
    v = cfg.violations()
    if not v:
        print("ok")
        return EXIT_OK
    for msg in v:
        print(f"violation: {msg}")
    return EXIT_USAGE


def cmd_bench(args) -> int:
    from .geometry import Polytope, project
    from .harness import ExperimentConfig, _prediction_stream
    from .model import Instance, Request, gradient_of
    from .policies import make_policy
    from .workload import CostSource, make_request_source, spawn_seeds

    if args.target not in preset_names():
        raise UsageError(f"unknown preset {args.target!r}")
    cfg = ExperimentConfig.from_dict(apply_overrides(load_preset(args.target), args.set)).check()
    inst = Instance.from_dict(cfg.instance)
    T = min(args.slots, cfg.horizon) if cfg.requests.get("kind") == "trace" else args.slots
    seeds = spawn_seeds(cfg.seed, ("requests", "predictions", "costs"))
    tr = make_request_source(cfg.requests, inst.num_files, inst.num_locations, seeds["requests"]).take(T)
    prices = budgets = None
    if cfg.costs is not None:
        prices, budgets = CostSource.from_dict(cfg.costs, inst.num_caches, seeds["costs"]).take(T)
    print(f"preset {args.target}: N={inst.num_files} I={inst.num_locations} J={inst.num_caches} "
          f"m={inst.dim}, {T} slots x {args.repeat} repeats")
    worst = 0.0
    for spec in cfg.policies:
        preds = _prediction_stream(spec.get("predictions", cfg.predictions), tr.files, inst.num_files,
                                   seeds["predictions"])
        per_slot = []
        for _ in range(args.repeat):
            pol = make_policy(spec, Polytope(inst), Polytope(inst, elastic=True))
            t0 = time.perf_counter()
            for k in range(T):
                n, i, pf = int(tr.files[k]), int(tr.locations[k]), int(preds[k])
                x = pol.decide(gradient_of(inst, Request(pf, i)) if pf >= 0 else None,
                               prices[k] if prices is not None else None)
                g = None
                if prices is not None:
                    g = float(prices[k] @ x[: inst.n_cache_coords].reshape(-1, inst.num_caches).sum(0) - budgets[k])
                pol.observe(gradient_of(inst, Request(n, i)), g)
            per_slot.append(1e3 * (time.perf_counter() - t0) / T)
        mean = statistics.fmean(per_slot)
        sd = statistics.stdev(per_slot) if len(per_slot) > 1 else 0.0
        worst = max(worst, mean)
        print(f"  {spec['name']:<14} policy update {mean:8.3f} ms/slot  (sd {sd:.3f})")
    # projection alone, from a perturbed interior point
    poly = Polytope(inst)
    rng = np.random.default_rng(0)
    its, ms = [], []
    for _ in range(max(args.repeat, 3)):
        p = poly.uniform_point() + rng.normal(0.0, 0.2, inst.dim)
        t0 = time.perf_counter()
        _, rep = project(poly, p)
        ms.append(1e3 * (time.perf_counter() - t0))
        its.append(rep.iterations)
    print(f"  projection     {statistics.fmean(ms):8.3f} ms (sd {statistics.pstdev(ms):.3f}), "
          f"iterations median {int(np.median(its))}")
    budget = args.budget_ms
    if worst > budget:
        print(f"FAIL: {worst:.3f} ms/slot exceeds the {budget:.1f} ms budget")
        return EXIT_FAIL
    print(f"ok: within the {budget:.1f} ms/slot budget")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.show:
        print(json.dumps(load_preset(args.show), indent=2))
        return EXIT_OK
    for name in preset_names():
        doc = load_preset(name)
        arms = ", ".join(p["name"] for p in doc["policies"])
        print(f"{name:<22} T={doc['horizon']:<6} arms: {arms}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optcache", description="Optimistic online caching simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file or preset")
    r.add_argument("target", help="preset name or path to a JSON config")
    r.add_argument("--horizon", type=int, help="number of slots T")
    r.add_argument("--seed", type=int, help="root seed")
    r.add_argument("--out-dir", help="output directory")
    r.add_argument("--stride", type=int, help="hindsight recomputation stride k")
    r.add_argument("--sequential", action="store_true", help="run arms one after another")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("target")
    v.add_argument("--set", action="append", metavar="KEY=VALUE")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("bench", help="time policy updates at a preset's dimensions")
    b.add_argument("target", help="preset name")
    b.add_argument("--slots", type=int, default=200)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--budget-ms", type=float, default=BENCH_BUDGET_MS)
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("presets", help="list the built-in scenario presets")
    p.add_argument("--show", metavar="NAME")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:          # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
