"""Command-line entry point: ``ccs-peg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np

from ..controllers import integral_closed_loop_radius
from ..synthesis import certify, default_family, rise_time_63, synthesize
from .config import CONTROLLER_KINDS, ConfigError, ScenarioConfig, dump_default_yaml, load_config
from .logs import export_logs
from .runner import (controller_choice, nominal_model, run_experiment, run_trial,
                     start_offset, summarize)

log = logging.getLogger("ccs_peg")

EXIT_OK = 0
EXIT_CONFIG = 2


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ScenarioConfig()
    if getattr(args, "controller", None):
        cfg = cfg.with_controller(args.controller)
    if getattr(args, "ccs", None):
        cfg = dataclasses.replace(cfg, controller=dataclasses.replace(cfg.controller,
                                                                      ccs_path=args.ccs))
    if args.literal_spiral:
        cfg = dataclasses.replace(cfg, strategy=dataclasses.replace(cfg.strategy,
                                                                    literal_spiral=True))
    return cfg


def cmd_synthesize(args) -> int:
    cfg = _load(args)
    spec = cfg.controller.synthesis
    m = nominal_model(cfg)
    stiff = np.arange(spec.robust_interval[0], spec.robust_interval[1] + 1e-9, 5.0)
    t0 = time.perf_counter()
    design = synthesize(spec, default_family(m.inner_loop, m.sensor_delay_steps, stiff))
    elapsed = time.perf_counter() - t0
    rise = rise_time_63(design.predicted_step, spec.dt) if design.predicted_step.size else math.nan
    worst = max(r for _, r in design.certificate)
    print(f"synthesized in {elapsed:.1f} s; 63% rise {rise:.3f} s; "
          f"worst spectral radius {worst:.4f} over {len(design.certificate)} stiffnesses")
    if args.output:
        design.save(args.output)
        print(f"wrote {args.output}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    offset = tuple(args.offset) if args.offset else start_offset(args.seed, 0,
                                                                  cfg.plan.offset_radius)
    rec = run_trial(cfg, args.material, args.seed, offset)
    print(f"{rec.controller} on {rec.material}, seed {rec.seed}, "
          f"offset ({offset[0]:.2f}, {offset[1]:.2f}) mm")
    for t, src, dst, why in rec.events:
        print(f"  t={t:7.3f} s  {src:>6} -> {dst:<6} {why}")
    print(f"outcome {rec.outcome} ({rec.reason}); duration {rec.duration:.2f} s; "
          f"max |F| {rec.max_force:.1f} N")
    if args.out:
        cfg1 = cfg.with_plan(master_seed=args.seed)
        export_logs([rec], args.out, cfg1, summarize([rec], rec.controller),
                    timestamp=_now())
        print(f"logs in {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load(args)
    overrides = {k: v for k, v in (("trials_per_material", args.trials),
                                   ("master_seed", args.seed),
                                   ("workers", args.workers)) if v is not None}
    if args.materials:
        overrides["materials"] = tuple(args.materials)
    if overrides:
        cfg = cfg.with_plan(**overrides)
    t0 = time.perf_counter()
    summary, records = run_experiment(cfg)
    print(summary.table())
    print(f"wall time {time.perf_counter() - t0:.1f} s")
    if args.out:
        export_logs(records, args.out, cfg, summary, timestamp=_now())
        print(f"logs in {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    model = nominal_model(cfg)
    ks = np.arange(args.kmin, args.kmax + 1e-9, args.kstep)
    choice = controller_choice(cfg)
    if choice.kind == "ccs":
        rows = certify(choice.synthesized.controller, model, ks)
    else:
        rows = [(float(k), integral_closed_loop_radius(choice.ki, model.with_stiffness(k)))
                for k in ks]
    print(f"{'k (N/mm)':>9} {'spectral radius':>16} stable")
    for k, r in rows:
        print(f"{k:9.1f} {r:16.6f} {'yes' if r < 1.0 else 'NO'}")
    if args.json:
        print(json.dumps([{"stiffness": k, "spectral_radius": r} for k, r in rows]))
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.dump_default:
        sys.stdout.write(dump_default_yaml())
        return EXIT_OK
    if not args.config:
        print("validate-config needs a scenario file or --dump-default", file=sys.stderr)
        return EXIT_CONFIG
    cfg = load_config(args.config)
    print(f"{args.config}: valid (hash {cfg.config_hash()[:16]})")
    return EXIT_OK


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccs-peg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--literal-spiral", action="store_true",
                    help="use the printed spiral form whose y coordinate repeats x")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, controller=True):
        p.add_argument("-c", "--config", help="YAML scenario file")
        if controller:
            p.add_argument("--controller", choices=CONTROLLER_KINDS)
            p.add_argument("--ccs", help="controller JSON produced by 'synthesize'")

    p = sub.add_parser("synthesize", help="design the CCS controller and export it as JSON")
    common(p, controller=False)
    p.add_argument("-o", "--output", help="where to write the controller JSON")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="run a single trial and print its transitions")
    common(p)
    p.add_argument("--material", default="rubber")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--offset", type=float, nargs=2, metavar=("DX", "DY"))
    p.add_argument("--out", help="directory for the trial log")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run the trial plan and print the summary table")
    common(p)
    p.add_argument("--trials", type=int, help="trials per material")
    p.add_argument("--materials", nargs="+")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory for the trial logs and run metadata")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="closed-loop spectral radius over a stiffness grid")
    common(p)
    p.add_argument("--kmin", type=float, default=5.0)
    p.add_argument("--kmax", type=float, default=150.0)
    p.add_argument("--kstep", type=float, default=5.0)
    p.add_argument("--json", action="store_true", help="also print the map as JSON")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate-config", help="check a scenario file")
    p.add_argument("config", nargs="?")
    p.add_argument("--dump-default", action="store_true",
                   help="print the default scenario as YAML")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
