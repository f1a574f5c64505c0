#!/usr/bin/env python3
"""Mode-retention curve of the backward/renoise/forward turn-around.

Trains a denoiser schedule, then measures how often a sample regenerated
from time t0 keeps its starting mode, per mode and pooled.
"""
import argparse
import json
import os
import sys
import tempfile

from gmflow.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=600)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--p", type=float, default=0.8)
    ap.add_argument("--kappa", type=float, default=4.0)
    ap.add_argument("--epochs", type=int, default=1500)
    ap.add_argument("--trials", type=int, default=800)
    ap.add_argument("--seed", type=int, default=12)
    ap.add_argument("--threads", type=int, default=os.cpu_count())
    ap.add_argument("--output-dir", default="runs")
    args = ap.parse_args()

    cfg = {
        "experiment": "uturn",
        "mixture": {"d": args.d, "p": args.p, "sigma": 1.0},
        "schedule": {"kind": "two_mode_dilated", "kappa": args.kappa, "d": args.d},
        "train": {"epochs": args.epochs},
        "uturn": {"n": args.n, "grid_points": 60},
        "montecarlo": {"K": args.trials, "seed": args.seed},
        "output_dir": args.output_dir,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        path = f.name
    try:
        return run(path, output_dir=args.output_dir, threads=args.threads)
    finally:
        os.unlink(path)


if __name__ == "__main__":
    sys.exit(main())
