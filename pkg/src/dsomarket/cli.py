"""Command line: ``dsomarket run|validate|compare``.

Exit codes: 0 success, 1 compared runs differ, 2 config error,
3 infeasible interval, 4 non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import market
from .feeds import FeedError
from .grid import NetworkError
from .opf import InfeasibleError
from .sim import (ConfigError, NonConvergenceError, RunConfig, config_from_dict, emit_report,
                  load_config, load_inputs, run_simulation)

EXIT_OK, EXIT_DIFF, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("dsomarket")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsomarket", description="Distribution retail market simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--scenario", action="append", choices=market.SCENARIOS,
                       help="scenario to run (repeatable); default all")
        p.add_argument("--solver", choices=("centralized", "distributed", "both"))
        p.add_argument("--interval-min", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default $DSOMARKET_OUT or runs/latest)")

    run = sub.add_parser("run", help="simulate a day and write reports")
    common(run)
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--synthetic", action="store_true", help="generate the day instead of reading files")
    run.add_argument("--intervals", help="comma-separated interval indices or a:b range")
    val = sub.add_parser("validate", help="lint a config and its network/feed files")
    common(val)
    cmp_ = sub.add_parser("compare", help="diff two run directories")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--rtol", type=float, default=0.0,
                      help="relative tolerance for summary totals (default exact)")
    return ap


def _intervals(text):
    if text is None:
        return None
    if ":" in text:
        a, b = text.split(":")
        return tuple(range(int(a), int(b)))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _config(args) -> RunConfig:
    overrides = dict(
        scenarios=tuple(args.scenario) if args.scenario else None,
        solver=args.solver,
        interval_min=args.interval_min,
        seed=args.seed,
        out=args.out,
    )
    if getattr(args, "synthetic", False):
        overrides["synthetic"] = True
    if getattr(args, "intervals", None):
        overrides["intervals"] = _intervals(args.intervals)
    if args.config:
        return load_config(args.config, **overrides)
    return config_from_dict({}, **overrides)


def cmd_run(args) -> int:
    try:
        cfg = _config(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        art = run_simulation(cfg)
    except (ConfigError, NetworkError, FeedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        art = getattr(exc, "artifacts", None)
        if art is not None:
            emit_report(art, cfg.out_dir(), args.format)
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, InfeasibleError):
            return EXIT_INFEASIBLE
        if isinstance(exc, NonConvergenceError):
            return EXIT_NONCONVERGED
        raise
    paths = emit_report(art, cfg.out_dir(), args.format)
    if art.report:
        for name, tot in art.report.totals.items():
            print(f"{name:12s} net revenue {tot['net_revenue']:12.2f} $")
    print(f"wrote {len(paths)} files to {cfg.out_dir()}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = _config(args)
        network, lam, alpha = load_inputs(cfg)
    except (ConfigError, NetworkError, FeedError, ValueError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"network: {len(network.buses)} buses, {len(network.lines)} lines, "
          f"DG {100 * network.dg_penetration():.1f}% of baseline load")
    print(f"series: {len(lam)} intervals of {cfg.interval_min:g} min, mean lambda {lam.mean():.5f} $/kWh")
    print(f"scenarios: {', '.join(cfg.scenarios)}; solver {cfg.solver}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = Path(args.a), Path(args.b)
    for d in (a, b):
        if not d.is_dir():
            print(f"not a directory: {d}", file=sys.stderr)
            return EXIT_CONFIG
    names = sorted({p.name for p in a.iterdir() if p.is_file()} | {p.name for p in b.iterdir() if p.is_file()})
    differ = []
    for name in names:
        pa, pb = a / name, b / name
        if not pa.exists() or not pb.exists():
            print(f"only in {'b' if not pa.exists() else 'a'}: {name}")
            differ.append(name)
        elif pa.read_bytes() != pb.read_bytes():
            differ.append(name)
            print(f"differs: {name}")
    if "summary.json" in differ and (a / "summary.json").exists() and (b / "summary.json").exists():
        sa = json.loads((a / "summary.json").read_text()).get("report") or {}
        sb = json.loads((b / "summary.json").read_text()).get("report") or {}
        within = True
        for scen in sorted(set(sa.get("totals", {})) | set(sb.get("totals", {}))):
            ta, tb = sa.get("totals", {}).get(scen, {}), sb.get("totals", {}).get(scen, {})
            for key in sorted(set(ta) | set(tb)):
                va, vb = ta.get(key), tb.get(key)
                if va is None or vb is None:
                    within = False
                    continue
                ok = abs(va - vb) <= args.rtol * max(abs(va), abs(vb))
                within &= ok
                if not ok:
                    print(f"  {scen}.{key}: {va!r} vs {vb!r}")
        if within and args.rtol > 0 and set(differ) <= {"summary.json"}:
            print(f"summary totals agree within rtol={args.rtol}")
            return EXIT_OK
    if not differ:
        print("identical")
        return EXIT_OK
    return EXIT_DIFF


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "validate": cmd_validate, "compare": cmd_compare}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
