#!/usr/bin/env python3
"""Exact-vs-learned terminal gap as a function of the sample count.

Builds theory-predicted slices for each n, integrates the exact and
learned flows from shared starts, and reports the span/complement gap
table with log-log slopes.
"""
import argparse
import json
import os
import sys
import tempfile

from gmflow.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=2000)
    ap.add_argument("--p", type=float, default=0.8)
    ap.add_argument("--kappa", type=float, default=4.0)
    ap.add_argument("--K", type=int, default=200)
    ap.add_argument("--seeds-per-n", type=int, default=3)
    ap.add_argument("--seed", type=int, default=66)
    ap.add_argument("--output-dir", default="runs")
    args = ap.parse_args()

    cfg = {
        "experiment": "gap_scaling",
        "mixture": {"d": args.d, "p": args.p, "sigma": 1.0},
        "schedule": {"kind": "two_mode_dilated", "kappa": args.kappa, "d": args.d},
        "gap": {"n_list": [4, 8, 16, 32, 64], "K": args.K,
                "seeds_per_n": args.seeds_per_n},
        "montecarlo": {"K": 1, "seed": args.seed},
        "output_dir": args.output_dir,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        path = f.name
    try:
        return run(path, output_dir=args.output_dir)
    finally:
        os.unlink(path)


if __name__ == "__main__":
    sys.exit(main())
