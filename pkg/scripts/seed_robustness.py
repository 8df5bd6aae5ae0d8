"""Check the grid trends on several seeds, not just the default one.

    python3 scripts/seed_robustness.py 1 2 3 7 11 42
"""
import sys

from collabinfer import harness


def trend_failures(report):
    taus = sorted({r.tau for r in report.rows})
    ts = sorted({r.threshold for r in report.rows})
    fails = []
    for t in ts:
        for a, b in zip(taus, taus[1:]):
            ra, rb = report.row(a, t), report.row(b, t)
            if not rb.mean_latency < ra.mean_latency:
                fails.append(f"latency t={t} tau {a:g}->{b:g}")
            if not rb.accuracy <= ra.accuracy:
                fails.append(f"accuracy t={t} tau {a:g}->{b:g} ({ra.accuracy} -> {rb.accuracy})")
    for tau in taus:
        if report.row(tau, max(ts)).accuracy < report.row(tau, min(ts)).accuracy:
            fails.append(f"threshold ordering at tau={tau:g}")
    return fails


def main(argv):
    seeds = [int(s) for s in argv] or [1, 2, 3, 7, 11, 42]
    base = harness.default_config()
    for seed in seeds:
        report = harness.run_sweep(base.with_seed(seed))
        fails = trend_failures(report)
        print(f"seed {seed}: {'ok' if not fails else '; '.join(fails)}")


if __name__ == "__main__":
    main(sys.argv[1:])
