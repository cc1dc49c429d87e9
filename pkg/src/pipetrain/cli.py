"""Command-line harness.

Subcommands:
  run      execute an experiment config (sim or live) and write metrics
  plan     compute a partition from a profile, standalone
  verify   re-check schedule/stashing/sync/in-flight/conservation rules
           over a metrics file
  restore  resume training from a central-node disk checkpoint
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .metrics import load_records
from .partition import exhaustive_partition, optimal_partition, stage_bounds
from .profiling import BandwidthMatrix, CapacityEstimate, LayerProfile
from .runner import restore_training, run_experiment
from .verify import verify_records


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--mode", choices=["sim", "live"], help="override the config's mode")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--out", help="metrics output path")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = args.out or "metrics.ndjson"
    result = run_experiment(cfg, out_path=out, audit=False)
    losses = [r["loss"] for r in result.records if "loss" in r]
    print(f"run {result.run_id}: {result.completed_batches} batches, "
          f"{len(result.records)} records -> {out}")
    if losses:
        print(f"loss first={losses[0]:.6f} last={losses[-1]:.6f}")
    return 0


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def cmd_plan(args) -> int:
    profile = LayerProfile.from_dict(json.loads(Path(args.profile).read_text()))
    n = args.stages
    if args.capacities:
        caps = CapacityEstimate(_parse_floats(args.capacities))
    else:
        caps = CapacityEstimate.uniform(n)
    if args.bandwidths:
        bw = BandwidthMatrix(_parse_floats(args.bandwidths))
    else:
        bw = BandwidthMatrix.infinite(max(n - 1, 0))
    points, bottleneck = optimal_partition(profile, caps, bw, n)
    if n == 1:
        print(f"single stage, bottleneck {bottleneck:.6f} s")
    else:
        print(f"points {list(points.points)}, bottleneck {bottleneck:.6f} s")
        for stage in range(n):
            a, b = stage_bounds(points, stage, len(profile))
            t = profile.range_time(a, b) * caps.factors[stage]
            print(f"  stage {stage}: layers {a}..{b}  compute {t:.6f} s")
    if args.oracle:
        o_points, o_bottleneck = exhaustive_partition(profile, caps, bw, n)
        verdict = "MATCH" if o_bottleneck == bottleneck else "MISMATCH"
        print(f"oracle points {list(o_points.points)}, bottleneck {o_bottleneck:.6f} s "
              f"-> {verdict}")
        return 0 if verdict == "MATCH" else 1
    return 0


def cmd_verify(args) -> int:
    try:
        records = load_records(args.metrics)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = verify_records(records)
    print(report.render())
    return 0 if report.ok else 1


def cmd_restore(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    result = restore_training(cfg, args.checkpoint, audit=False)
    out = args.out or "metrics.ndjson"
    Path(out).write_bytes(result.metrics_blob())
    print(f"resumed run {result.run_id}: finished at batch "
          f"{result.completed_batches - 1} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipetrain")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment")
    _add_common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_plan = sub.add_parser("plan", help="compute a partition from a profile")
    p_plan.add_argument("--profile", required=True, help="profile JSON file")
    p_plan.add_argument("--stages", "-n", type=int, required=True)
    p_plan.add_argument("--capacities", help="comma-separated C_i, central first")
    p_plan.add_argument("--bandwidths", help="comma-separated bytes/s per adjacent pair")
    p_plan.add_argument("--oracle", action="store_true",
                        help="cross-check against the exhaustive enumeration")
    p_plan.set_defaults(fn=cmd_plan)

    p_verify = sub.add_parser("verify", help="check invariants over a metrics file")
    p_verify.add_argument("metrics")
    p_verify.set_defaults(fn=cmd_verify)

    p_restore = sub.add_parser("restore", help="resume from a disk checkpoint")
    p_restore.add_argument("--config", required=True)
    p_restore.add_argument("--checkpoint", required=True)
    p_restore.add_argument("--seed", type=int)
    p_restore.add_argument("--out")
    p_restore.set_defaults(fn=cmd_restore)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
