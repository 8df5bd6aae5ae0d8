"""Emit the confidence vs offloading-probability curve as CSV.

    python3 scripts/offload_curve.py --thresholds 0.7 0.8 0.9 --scale 10 > curve.csv
"""
import argparse
import csv
import sys

import numpy as np

from collabinfer.decision import OffloadParams, offload_probability


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--thresholds", type=float, nargs="+", default=[0.7, 0.8, 0.9])
    ap.add_argument("--scale", type=float, default=10.0)
    ap.add_argument("--points", type=int, default=201)
    args = ap.parse_args(argv)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["confidence"] + [f"p_t{t:g}" for t in args.thresholds])
    params = [OffloadParams(t, args.scale) for t in args.thresholds]
    for c in np.linspace(0.5, 1.0, args.points):
        w.writerow([f"{c:.4f}"] + [f"{offload_probability(float(c), p):.6f}" for p in params])


if __name__ == "__main__":
    main()
