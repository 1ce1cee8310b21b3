"""``tierckpt`` command line: run scenarios, sweep seeds, check Tier-3 directories.

Exit status: 0 all checks pass, 1 safety or integrity violation, 2 usage,
configuration or I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .config import TIER3_ROOT_ENV, Scenario, load_scenario
from .errors import ConfigError, CorruptionError, TierCkptError
from .simulator import SimResult, Simulation, write_outputs
from .tierstore import COMMITTED, BaseKey, DiffKey, Tier, Tier3Store, parse_relpath

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# -- checks -------------------------------------------------------------------

def run_flags(result: SimResult) -> dict[str, bool]:
    """Pass/fail per invariant suite, each backed by records in the run's logs."""
    safety = result.metrics.safety
    trace = [r["W"] for r in result.watermark_trace]
    store = result.store
    replica_ok = True
    for rank in range(store.topology.world):
        t1 = store.object_bytes(Tier.TIER1, rank)
        for key, n in store.object_bytes(Tier.TIER2, rank).items():
            if isinstance(key, BaseKey) and key in t1 and t1[key] != n:
                replica_ok = False
    return {
        "recovered": result.unrecoverable is None,
        "anchor_ge_watermark": all(c["anchor_ge_watermark"] for c in safety),
        "only_committed_tier3": all(c["only_committed_tier3"] for c in safety),
        "no_reclaimed_fetch": all(c["no_reclaimed_fetch"] for c in safety),
        "watermark_monotone": all(a <= b for a, b in zip(trace, trace[1:])),
        "replicas_complete": replica_ok,
        "no_integrity_errors": not result.log.of_kind("integrity_error"),
    }


def run_report(result: SimResult) -> dict:
    flags = run_flags(result)
    return {
        "scenario": result.scenario.name,
        "seed": result.scenario.seed,
        "failure_schedule": [e.as_dict() for e in result.scenario.schedule()],
        "metrics": result.summary(),
        "recoveries": result.metrics.recoveries,
        "flags": flags,
        "passed": all(flags.values()),
    }


def execute_run(scenario: Scenario, out_dir: Path) -> dict:
    root = scenario.resolved_tier3_root(out_dir)
    result = Simulation(scenario, root).run()
    write_outputs(result, out_dir)
    report = run_report(result)
    (Path(out_dir) / "report.json").write_text(_dump(report))
    return report


def fsck(root: str | os.PathLike) -> dict:
    """Classify every Tier-3 directory as committed, pending or corrupt."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(str(root))
    try:
        store = Tier3Store.open(root)
    except CorruptionError as exc:
        raise ConfigError(str(exc)) from None
    world = store.world
    interval = store.layout.get("base_interval")
    entries = {}
    keys = set()
    for kind in ("base", "diff"):
        top = root / kind
        for d in sorted(top.iterdir()) if top.is_dir() else []:
            key = parse_relpath(f"{kind}/{d.name}")
            if key is None:
                entries[f"{kind}/{d.name}"] = {"status": "corrupt", "problems": ["unrecognised directory"]}
                continue
            keys.add(key)
    for key in sorted(keys, key=lambda k: (isinstance(k, DiffKey), k.relpath)):
        d = root / key.relpath
        problems = store.verify(key)
        markers = store.markers(key)
        stray = sorted(p.name for p in d.glob("rank*.bin") if int(p.name[4:-4]) not in markers)
        committed = (d / COMMITTED).exists()
        if committed:
            missing = sorted(set(range(world)) - markers)
            problems += [f"{key.relpath}: rank{r}.done missing" for r in missing]
            problems += [f"{key.relpath}: {name} has no marker" for name in stray]
            status = "corrupt" if problems else "committed"
        else:
            status = "corrupt" if problems else "pending"
        entries[key.relpath] = {"status": status, "markers": len(markers), "problems": problems}
    staging = root / "staging"
    staged = sorted(str(p.relative_to(staging).parent) for p in staging.rglob("*.bin")) if staging.is_dir() else []
    for rel in staged:
        entries.setdefault(rel, {"status": "pending", "markers": 0, "problems": []})
        entries[rel].setdefault("staged", True)
    committed_bases = [k.version for k in keys if isinstance(k, BaseKey) and entries[k.relpath]["status"] == "committed"]
    W = max(committed_bases, default=None)
    retention = []
    if W is not None and interval:
        for k in sorted(keys, key=lambda k: k.relpath):
            if isinstance(k, DiffKey) and k.end + 1 <= W - interval:
                retention.append(f"{k.relpath}: outside the one-interval diff tail behind base {W}")
    counts = {s: sum(1 for e in entries.values() if e["status"] == s) for s in ("committed", "pending", "corrupt")}
    return {
        "root": str(root),
        "world": world,
        "base_interval": interval,
        "watermark": W,
        "entries": entries,
        "counts": counts,
        "retention_violations": retention,
        "clean": counts["corrupt"] == 0 and not retention,
    }


# -- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    if args.lossless:
        scenario = dataclasses.replace(scenario, lossless=True)
    if args.tier3_root:
        scenario = dataclasses.replace(scenario, tier3_root=args.tier3_root)
    report = execute_run(scenario, Path(args.out))
    print(_dump({k: report[k] for k in ("scenario", "seed", "flags", "passed")}), end="")
    return EXIT_OK if report["passed"] else EXIT_VIOLATION


def cmd_sweep(args) -> int:
    if args.seeds < 1:
        raise ConfigError(f"--seeds: must be >= 1, got {args.seeds}")
    base = load_scenario(args.config)
    out = Path(args.out)
    runs = []
    for i in range(args.seeds):
        sc = base.with_seed(base.seed + i)
        if sc.tier3_root:
            sc = dataclasses.replace(sc, tier3_root=str(Path(sc.tier3_root) / f"seed{sc.seed}"))
        report = execute_run(sc, out / f"seed{sc.seed}")
        runs.append(report)
    flag_names = sorted(runs[0]["flags"])
    agg = {
        "scenario": base.name,
        "seeds": [r["seed"] for r in runs],
        "pass_rate": {f: sum(r["flags"][f] for r in runs) / len(runs) for f in flag_names},
        "failed_seeds": [r["seed"] for r in runs if not r["passed"]],
        "recoveries": sum(len(r["recoveries"]) for r in runs),
        "passed": all(r["passed"] for r in runs),
    }
    (out / "sweep.json").write_text(_dump(agg))
    print(_dump(agg), end="")
    return EXIT_OK if agg["passed"] else EXIT_VIOLATION


def cmd_fsck(args) -> int:
    root = args.root or os.environ.get(TIER3_ROOT_ENV)
    if not root:
        raise ConfigError(f"--root: not given and {TIER3_ROOT_ENV} is unset")
    try:
        report = fsck(root)
    except (FileNotFoundError, PermissionError, NotADirectoryError):
        raise ConfigError(f"{root}: not a readable directory") from None
    print(_dump(report), end="")
    return EXIT_OK if report["clean"] else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tierckpt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--lossless", action="store_true")
    r.add_argument("--tier3-root", help=f"Tier-3 directory (default ${TIER3_ROOT_ENV} or OUT/tier3)")
    r.set_defaults(fn=cmd_run)
    s = sub.add_parser("sweep", help="run the scenario over consecutive seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)
    f = sub.add_parser("fsck", help="validate a Tier-3 directory")
    f.add_argument("--root", help=f"Tier-3 directory (default ${TIER3_ROOT_ENV})")
    f.set_defaults(fn=cmd_fsck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"tierckpt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"tierckpt: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    except TierCkptError as exc:
        print(f"tierckpt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
