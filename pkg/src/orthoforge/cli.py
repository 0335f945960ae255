"""Command-line entry point: ``orthoforge <stage> --manifest PATH [--workers N] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import OrthoforgeError
from .io import format_value

OVERRIDE_FLAGS = ("--resolution", "--h-step", "--gamma", "--interp", "--alpha", "--beta",
                  "--subset-size")
STAGE_CHOICES = ("partition", "align", "dsm", "ortho", "labels", "windows", "fuse-train",
                 "vote")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orthoforge",
                                 description="Tile-wise true-ortho and label pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGE_CHOICES + ("all", "validate"):
        p = sub.add_parser(stage)
        p.add_argument("--manifest", required=True)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        for flag in OVERRIDE_FLAGS:
            p.add_argument(flag, default=None)
    p = sub.add_parser("schedule-sim", help="simulate the stereo/fusion workflow")
    p.add_argument("--manifest")
    p.add_argument("--plan", help="key = value plan file (overrides the manifest)")
    p.add_argument("--mode", choices=("pipelined", "barrier", "both"), default="both")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="timeline CSV (single mode) or directory (both)")
    p.add_argument("--workers", type=int, default=None)
    p = sub.add_parser("make-fixture", help="write the synthetic 3x3-tile world")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=7)
    return ap


def _print(report: dict) -> None:
    for k, v in report.items():
        print(f"{k} = {format_value(v)}")


def _schedule(args) -> int:
    from pathlib import Path

    from .pipeline import Manifest, run_stage
    from .schedsim import Mode, read_plan, simulate, write_timeline

    if args.plan is None:
        if args.manifest is None:
            print("error: schedule-sim needs --plan or --manifest", file=sys.stderr)
            return 2
        _print(run_stage(Manifest.load(args.manifest, args.seed, args.workers), "schedule-sim"))
        return 0
    plan, vms = read_plan(args.plan, args.seed)
    modes = [Mode.PIPELINED, Mode.BARRIER] if args.mode == "both" else [Mode(args.mode)]
    out = {}
    for mode in modes:
        tl = simulate(vms, plan, mode)
        out[f"makespan.{mode.value}"] = tl.makespan
        if args.out:
            target = Path(args.out)
            if len(modes) > 1:
                target.mkdir(parents=True, exist_ok=True)
                target = target / f"timeline_{mode.value}.csv"
            write_timeline(target, tl)
    if len(modes) == 2:
        out["saving"] = out["makespan.barrier"] - out["makespan.pipelined"]
    _print(out)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import STAGES, Manifest, run_stage, validate_report

    try:
        if args.command == "make-fixture":
            from .world import WorldConfig, generate_world
            print(generate_world(args.out, WorldConfig(seed=args.seed)))
            return 0
        if args.command == "schedule-sim":
            return _schedule(args)
        overrides = {f[2:].replace("-", "_"): getattr(args, f[2:].replace("-", "_"))
                     for f in OVERRIDE_FLAGS}
        m = Manifest.load(args.manifest, args.seed, args.workers, overrides)
        if args.command == "validate":
            checks, ok = validate_report(m)
            for c in checks:
                print(f"{'PASS' if c.passed else 'FAIL'} {c.name} = {format_value(c.value)}")
            return 0 if ok else 1
        stages = [s for s in STAGES if s != "schedule-sim"] if args.command == "all" \
            else [args.command]
        for s in stages:
            report = run_stage(m, s)
            if len(stages) > 1:
                print(f"[{s}]")
            _print(report)
        return 0
    except OrthoforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
