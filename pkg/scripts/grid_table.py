"""Run the default tau x threshold grid and print the latency/accuracy table.

    python3 scripts/grid_table.py [--config FILE] [--seed N] [--out DIR]
"""
import argparse
import sys
import time

from collabinfer import harness


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="YAML config (default: built-in desk config)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="also write report.csv/report.json here")
    args = ap.parse_args(argv)
    cfg = harness.load_config(args.config) if args.config else harness.default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    started = time.perf_counter()
    report = harness.run_sweep(cfg)
    print(harness.fmt_table(report))
    print()
    print("latency saving vs tau=0 at the same threshold:")
    for r in report.rows:
        if r.tau == 0:
            continue
        base = report.row(0.0, r.threshold)
        print(f"  tau={r.tau:<8g} t={r.threshold:<4g} {1 - r.mean_latency / base.mean_latency:6.1%} "
              f"faster, accuracy {r.accuracy - base.accuracy:+.3f}")
    if args.out:
        report.write(args.out)
    print(f"\n{time.perf_counter() - started:.1f} s wall clock", file=sys.stderr)


if __name__ == "__main__":
    main()
