#!/usr/bin/env python3
"""Asymptotic overlap and MSE curves for both phases (no training).

Solves the first-phase free-energy extremum over a kt grid and evaluates
the second-phase closed forms over a tau grid; writes one CSV per phase.
"""
import argparse
import json
import os
import sys
import tempfile

import numpy as np

from gmflow.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=float, default=1e6)
    ap.add_argument("--p", type=float, default=0.8)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--lam", type=float, default=1e-8)
    ap.add_argument("--ell", type=float, default=1e-8)
    ap.add_argument("--variant", default="result2",
                    choices=["result2", "saddle_k1", "saddle_fresh"])
    ap.add_argument("--output-dir", default="runs")
    args = ap.parse_args()

    cfg = {
        "experiment": "theory_only",
        "theory": {
            "n": args.n, "p": args.p, "sigma": args.sigma,
            "lambda": args.lam, "ell": args.ell, "variant": args.variant,
            "kt_grid": list(np.round(np.linspace(0.25, 4.0, 16), 6)),
            "tau_grid": list(np.round(np.linspace(0.0, 1.0, 21), 6)),
        },
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
