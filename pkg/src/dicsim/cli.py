"""Command-line interface: run, sweep, replay, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics
from .engine import replay_log, run_simulation
from .scenario import (
    ConfigError,
    build_default_scenario,
    load_config,
    parse_config_text,
    scenario_from_dict,
)

SWEEP_LAMBDAS = (5.0, 12.0, 20.0)
SWEEP_VUT_PERIODS = (None, 60.0)
SWEEP_STRATEGIES = ("benchmark", "mpc")


def _load_scenario(args, strategy=None, lambda_vpm=None, vut_period=None):
    if args.config:
        with open(args.config) as fh:
            data = parse_config_text(fh.read())
    else:
        data = {}
    if strategy is not None:
        data.setdefault("sim", {})["strategy"] = strategy
    if lambda_vpm is not None:
        data.setdefault("traffic", {})["lambda_vpm"] = lambda_vpm
    if vut_period is not None:
        data.setdefault("traffic", {})["vut_period"] = vut_period
    return scenario_from_dict(data, seed_override=args.seed)


def cmd_run(args) -> int:
    corridor, stripes, demand, config = _load_scenario(
        args, strategy=args.strategy, lambda_vpm=getattr(args, "lam", None),
        vut_period=args.vut_period,
    )
    result = run_simulation(corridor, stripes, demand, config, out_dir=args.out)
    summary = result.summary
    print(
        f"run done: strategy={summary['strategy']} lambda={summary['lambda_vpm']} "
        f"inserted={summary['inserted']} exited={summary['exited']} "
        f"delivered={summary['delivered_kwh_total']:.1f} kWh "
        f"delivered/requested={summary['delivered_over_requested']:.4f}"
    )
    if args.out:
        print(f"outputs in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    base = Path(args.out)
    names = []
    for lam in SWEEP_LAMBDAS:
        for vut in SWEEP_VUT_PERIODS:
            for strategy in SWEEP_STRATEGIES:
                vut_tag = int(vut) if vut else 0
                name = f"lam{int(lam)}_vut{vut_tag}_{strategy}"
                corridor, stripes, demand, config = _load_scenario(
                    args, strategy=strategy, lambda_vpm=lam, vut_period=vut,
                )
                out_dir = base / name
                print(f"[{name}] running ...", flush=True)
                result = run_simulation(corridor, stripes, demand, config, out_dir)
                print(
                    f"[{name}] delivered/requested="
                    f"{result.summary['delivered_over_requested']:.4f} "
                    f"utilization={result.summary['utilization']:.4f}"
                )
                names.append(name)
    print(f"sweep complete: {len(names)} runs in {base}")
    return 0


def cmd_replay(args) -> int:
    rounds = replay_log(args.log, args.strategy)
    max_dev = max((r.max_deviation_kw for r in rounds), default=0.0)
    print(f"replayed {len(rounds)} rounds, max |PASS - replayed| = {max_dev:.3e} kW")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(
                {
                    "rounds": len(rounds),
                    "max_deviation_kw": max_dev,
                    "per_round": [
                        {"t": r.t, "max_deviation_kw": r.max_deviation_kw}
                        for r in rounds
                    ],
                },
                fh,
                indent=2,
            )
            fh.write("\n")
        print(f"replay report written to {args.out}")
    return 0


def cmd_report(args) -> int:
    summary = metrics.write_report(args.runs, args.out)
    for entry in summary["runs"]:
        print(
            f"{entry['name']}: n={entry['n_measured']} "
            f"phi_mean={entry['phi_mean']:.3f} "
            f"utilization={entry['utilization']:.3f}"
        )
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicsim",
        description="Corridor simulator for dynamic inductive charging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one simulation")
    p_run.add_argument("--config", help="scenario config file (key=value or JSON)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--strategy", choices=("benchmark", "mpc"), default=None)
    p_run.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="traffic intensity [vehicles/min]")
    p_run.add_argument("--vut-period", type=float, default=None,
                       help="probe vehicle period [s]")
    p_run.add_argument("--out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the 3x2x2 evaluation grid")
    p_sweep.add_argument("--config", help="base config file")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", required=True, help="output directory root")
    p_sweep.set_defaults(func=cmd_sweep)

    p_replay = sub.add_parser("replay", help="re-run an allocator over a round log")
    p_replay.add_argument("--log", required=True, help="rounds.log path")
    p_replay.add_argument("--strategy", choices=("benchmark", "mpc"), default="mpc")
    p_replay.add_argument("--out", help="write a replay report JSON")
    p_replay.set_defaults(func=cmd_replay)

    p_report = sub.add_parser("report", help="post-process run directories")
    p_report.add_argument("--runs", nargs="+", required=True, help="run directories")
    p_report.add_argument("--out", required=True, help="report output directory")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
