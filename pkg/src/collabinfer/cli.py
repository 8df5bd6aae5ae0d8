"""Command line entry point: ``collabinfer {run,sweep,gen-traces,calibrate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import harness
from .errors import CollabInferError, ConfigError


def _load(args) -> harness.ExperimentConfig:
    config = harness.load_config(args.config) if args.config else harness.default_config()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _outcome_json(o) -> dict:
    return {
        "task_id": o.task_id, "label": o.label, "predicted": o.predicted, "correct": o.correct,
        "probs": o.probs.tolist(), "weights": list(o.weights),
        "latency": {"compute": list(o.latency.compute), "transmission": list(o.latency.transmission),
                    "total_compute": o.latency.total_compute,
                    "total_transmission": o.latency.total_transmission,
                    "total": o.latency.total},
        "tiers": [{"tier": r.tier, "executed_layers": r.executed_layers, "probs": r.probs.tolist(),
                   "confidence": r.confidence, "offload_probability": r.offload_probability,
                   "offloaded": r.offloaded, "forwarded_text": r.forwarded_text,
                   "compute": r.compute, "n_tokens": r.n_tokens} for r in o.tiers],
    }


def cmd_run(args) -> int:
    config = _load(args)
    tasks, store = harness.load_workload(config)
    tau = config.taus[0] if args.tau is None else args.tau
    t = config.thresholds[0] if args.threshold is None else args.threshold
    base = harness.build_chain(config, store)
    outcomes, m = harness.run_cell(config, tasks, base, tau, t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "outcomes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for o in outcomes:
            fh.write(json.dumps(_outcome_json(o), sort_keys=True) + "\n")
    metrics = {"tau": tau, "threshold": t, "seed": config.seed,
               "config_sha256": config.config_hash(), **{
                   k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(m).items()},
               "target_met": m.target_met}
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")
    print(f"tau={tau:g} t={t:g} tasks={m.n_tasks} accuracy={m.accuracy:.4f} "
          f"mean_latency={m.mean_latency:.2f} ms (compute {m.mean_compute:.2f}, "
          f"transmission {m.mean_transmission:.2f})")
    if m.target_met is not None:
        print(f"accuracy target {m.accuracy_target}: {'met' if m.target_met else 'NOT met'}")
    return 0


def cmd_sweep(args) -> int:
    config = _load(args)
    started = time.perf_counter()
    report = harness.run_sweep(config, exit_controller=not args.no_exit_controller)
    csv_path, json_path = report.write(args.out)
    print(harness.fmt_table(report))
    print(f"wrote {csv_path} and {json_path}")
    print(f"wall clock {time.perf_counter() - started:.2f} s (harness timing only)", file=sys.stderr)
    return 0


def cmd_gen_traces(args) -> int:
    config = _load(args)
    path = Path(args.output) if args.output else Path(args.out) / "traces.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    n = harness.generate_traces(config, path, args.n_tasks)
    print(f"wrote {n} records to {path}")
    return 0


def cmd_calibrate(args) -> int:
    config = _load(args)
    temps = harness.calibrate(config, args.n_tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.json").write_text(json.dumps(temps, indent=1) + "\n", encoding="utf-8")
    for name, t in temps.items():
        print(f"{name}: temperature {t:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabinfer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="YAML experiment config (default: built-in desk config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-o", "--out", default="out", help="output directory")

    p = sub.add_parser("run", help="run one grid cell and write per-task outcomes")
    common(p)
    p.add_argument("--tau", type=float, help="early-exit diff threshold (default: first in config)")
    p.add_argument("--threshold", type=float, help="confidence threshold (default: first in config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the full tau x threshold grid")
    common(p)
    p.add_argument("--no-exit-controller", action="store_true",
                   help="build the chain without any early-exit controller")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-traces", help="record per-layer outputs for later replay")
    common(p)
    p.add_argument("--n-tasks", type=int, help="number of tasks (default: workload.n_tasks)")
    p.add_argument("--output", help="trace file path (default: OUT/traces.jsonl)")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("calibrate", help="fit per-tier temperatures on a validation set")
    common(p)
    p.add_argument("--n-tasks", type=int, help="validation set size")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CollabInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
