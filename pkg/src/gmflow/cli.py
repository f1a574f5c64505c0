"""Batch experiment runner.

    gmflow run <config.json> [--output-dir D] [--threads N] [--seed S]

Reads a JSON config, validates it (listing every offending field),
dispatches to the experiment drivers, and writes report.json, a config
echo, and one CSV per curve into a run directory named by the config
hash.  All files are written atomically (temp then rename).  Exit codes:
0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from typing import Optional

import numpy as np

from . import experiments, theory
from .dae import TrainConfig, train_all, learned_field
from .flow import integrate_ensemble
from .mixture import attach_paired_noise, make_mixture, sample_dataset
from .reduced import Mixture1D, integrate_reduced
from .rng import stream
from .schedule import TimeSchedule, identity_schedule

EXPERIMENTS = (
    "figure1",
    "overlaps_sweep",
    "mse_sweep",
    "gap_scaling",
    "uturn",
    "reduced_ode",
    "theory_only",
)

__all__ = ["run", "emit_csv", "main"]


def emit_csv(curve: dict, path) -> None:
    """Write named equal-length columns as CSV with LF line endings.

    Floats carry 13 significant digits (12 plus a guard digit) so values
    round-trip through a CSV reader to better than 1e-12 relative.
    """
    names = list(curve.keys())
    cols = [curve[k] for k in names]
    if names:
        lengths = {len(c) for c in cols}
        if len(lengths) > 1:
            raise ValueError(
                f"column-length mismatch: {dict(zip(names, map(len, cols)))}"
            )
    rows = zip(*cols) if cols and len(cols[0]) else ()

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return format(float(v), ".13g")
        return str(v)

    payload = "\n".join([",".join(names)] + [",".join(fmt(v) for v in row) for row in rows])
    _atomic_write(path, payload + "\n")


def _atomic_write(path, text: str) -> None:
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _err(errors, field, msg):
    errors.append(f"{field}: {msg}")


def _validate_mixture(cfg, errors):
    m = cfg.get("mixture")
    if not isinstance(m, dict):
        _err(errors, "mixture", "missing section")
        return
    d = m.get("d")
    if not isinstance(d, int) or d < 2:
        _err(errors, "mixture.d", f"integer >= 2 required, got {d!r}")
    p = m.get("p")
    if not isinstance(p, (int, float)) or not 0.0 < p < 1.0:
        _err(errors, "mixture.p", f"real in (0,1) required, got {p!r}")
    sigma = m.get("sigma", 1.0)
    if not isinstance(sigma, (int, float)) or sigma <= 0:
        _err(errors, "mixture.sigma", f"positive real required, got {sigma!r}")


def _validate_schedule(cfg, errors):
    s = cfg.get("schedule")
    if not isinstance(s, dict):
        _err(errors, "schedule", "missing section")
        return
    kind = s.get("kind")
    if kind not in ("identity", "two_mode_dilated", "multi_mode"):
        _err(errors, "schedule.kind", f"unknown kind {kind!r}")
        return
    if kind == "two_mode_dilated":
        kappa = s.get("kappa")
        d = s.get("d", cfg.get("mixture", {}).get("d"))
        if not isinstance(kappa, (int, float)) or kappa <= 0:
            _err(errors, "schedule.kappa", f"positive real required, got {kappa!r}")
        elif isinstance(d, int) and kappa >= math.sqrt(d):
            _err(errors, "schedule.kappa", f"kappa={kappa} must be < sqrt(d)={math.sqrt(d):.3f}")
        if not isinstance(d, int) or d < 2:
            _err(errors, "schedule.d", f"integer >= 2 required, got {d!r}")
    if kind == "multi_mode":
        norms = s.get("norms")
        kappa = s.get("kappa", 1.0)
        if not isinstance(norms, (list, tuple)) or not norms:
            _err(errors, "schedule.norms", "non-empty list required")
        elif any(norms[i] > norms[i + 1] for i in range(len(norms) - 1)):
            _err(errors, "schedule.norms", "must be ascending")
        elif kappa * sum(1.0 / abs(r) for r in norms) >= 1.0:
            _err(errors, "schedule.kappa", "kappa * sum(1/|r|) must be < 1")


def _validate_train(cfg, errors):
    t = cfg.get("train")
    if not isinstance(t, dict):
        _err(errors, "train", "missing section")
        return
    epochs = t.get("epochs")
    if not isinstance(epochs, int) or epochs < 1:
        _err(errors, "train.epochs", f"integer >= 1 required, got {epochs!r}")
    step = t.get("step_size", 1e-2)
    if not isinstance(step, (int, float)) or step <= 0:
        _err(errors, "train.step_size", f"positive real required, got {step!r}")
    decays = t.get("moment_decays", [0.9, 0.999])
    if (
        not isinstance(decays, (list, tuple))
        or len(decays) != 2
        or not all(isinstance(x, (int, float)) and 0 <= x < 1 for x in decays)
    ):
        _err(errors, "train.moment_decays", f"pair of reals in [0,1) required, got {decays!r}")
    for key in ("lambda", "ell"):
        v = t.get(key, 0.1)
        if not isinstance(v, (int, float)) or v < 0:
            _err(errors, f"train.{key}", f"nonnegative real required, got {v!r}")
    policy = t.get("noise_policy", "fresh_per_epoch")
    if policy not in ("fresh_per_epoch", "fixed_k"):
        _err(errors, "train.noise_policy", f"unknown policy {policy!r}")


def _validate_montecarlo(cfg, errors):
    mc = cfg.get("montecarlo")
    if not isinstance(mc, dict):
        _err(errors, "montecarlo", "missing section")
        return
    K = mc.get("K")
    if not isinstance(K, int) or K < 1:
        _err(errors, "montecarlo.K", f"integer >= 1 required, got {K!r}")
    seed = mc.get("seed", 0)
    if not isinstance(seed, int):
        _err(errors, "montecarlo.seed", f"integer required, got {seed!r}")


_NEEDS = {
    "figure1": ("mixture", "schedule", "train", "montecarlo"),
    "overlaps_sweep": ("mixture", "schedule", "train"),
    "mse_sweep": ("mixture", "schedule", "train"),
    "gap_scaling": ("mixture", "schedule"),
    "uturn": ("mixture", "schedule", "train", "montecarlo"),
    "reduced_ode": ("schedule",),
    "theory_only": (),
}

_VALIDATORS = {
    "mixture": _validate_mixture,
    "schedule": _validate_schedule,
    "train": _validate_train,
    "montecarlo": _validate_montecarlo,
}


def validate_config(cfg: dict) -> list:
    errors: list = []
    if not isinstance(cfg, dict):
        return ["config: JSON object required"]
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        _err(errors, "experiment", f"must be one of {EXPERIMENTS}, got {exp!r}")
        return errors
    for section in _NEEDS[exp]:
        _VALIDATORS[section](cfg, errors)
    if exp == "theory_only" and not isinstance(cfg.get("theory"), dict):
        _err(errors, "theory", "missing section")
    if exp == "reduced_ode" and not isinstance(cfg.get("mixture1d"), dict):
        _err(errors, "mixture1d", "missing section")
    return errors


def _schedule_from_config(cfg: dict) -> TimeSchedule:
    s = dict(cfg["schedule"])
    if s.get("kind") == "two_mode_dilated" and "d" not in s:
        s["d"] = cfg["mixture"]["d"]
    return TimeSchedule.from_config(s)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg.get("train", {})
    return TrainConfig(
        epochs=t.get("epochs", 5000),
        step_size=t.get("step_size", 1e-2),
        moment_decays=tuple(t.get("moment_decays", (0.9, 0.999))),
        lam=t.get("lambda", 0.1),
        ell=t.get("ell", 0.1),
        noise_policy=t.get("noise_policy", "fresh_per_epoch"),
        noise_k=t.get("noise_k", 1),
        seed=seed,
    )


def _run_theory_only(cfg, seed, workers):
    th = cfg["theory"]
    n = float(th.get("n", 1e6))
    p = th.get("p", 0.8)
    sigma = th.get("sigma", 1.0)
    lam = th.get("lambda", 0.1)
    ell = th.get("ell", 0.1)
    variant = th.get("variant", "result2")
    report = experiments.ExperimentReport(name="theory_only", config=cfg, seeds={})
    kt_grid = th.get("kt_grid", [])
    if kt_grid:
        cols = {k: [] for k in ("kt", "m", "omega", "b", "q", "q_eta", "mse_train", "mse_test")}
        for kt in kt_grid:
            ov = theory.solve_first_phase(n, p, sigma, lam, ell, float(kt))
            cols["kt"].append(float(kt))
            cols["m"].append(ov.m)
            cols["omega"].append(ov.omega)
            cols["b"].append(ov.b)
            cols["q"].append(ov.q)
            cols["q_eta"].append(ov.q_eta)
            cols["mse_train"].append(theory.mse_theory("first", ov, p, sigma, which="train"))
            cols["mse_test"].append(theory.mse_theory("first", ov, p, sigma, which="test"))
        report.curves["first_phase"] = cols
    tau_grid = th.get("tau_grid", [])
    if tau_grid:
        cols = {k: [] for k in ("tau", "c", "m", "q", "q_xi", "q_eta", "mse_train", "mse_test")}
        for tau in tau_grid:
            ov = theory.solve_second_phase(n, sigma, lam, float(tau), variant=variant)
            cols["tau"].append(float(tau))
            for k in ("c", "m", "q", "q_xi", "q_eta"):
                cols[k].append(getattr(ov, k))
            cols["mse_train"].append(theory.mse_theory("second", ov, p, sigma, which="train"))
            cols["mse_test"].append(theory.mse_theory("second", ov, p, sigma, which="test"))
        report.curves["second_phase"] = cols
    report.metrics["n"] = n
    return report


def _run_figure1(cfg, seed, workers):
    m = cfg["mixture"]
    f = cfg.get("figure1", {})
    t = cfg.get("train", {})
    overrides = {}
    for src, dst in (("step_size", "step_size"), ("lambda", "lam"), ("ell", "ell"),
                     ("noise_policy", "noise_policy"), ("noise_k", "noise_k")):
        if src in t:
            overrides[dst] = t[src]
    if "moment_decays" in t:
        overrides["moment_decays"] = tuple(t["moment_decays"])
    return experiments.figure1_run(
        d=m["d"],
        n=f.get("n", 128),
        p=m["p"],
        sigma=m.get("sigma", 1.0),
        kappa=cfg["schedule"]["kappa"],
        grid_points=f.get("grid_points", 100),
        epochs=t.get("epochs", 5000),
        K=cfg["montecarlo"]["K"],
        seed=seed,
        workers=workers,
        budget=f.get("budget", 1.0e12),
        train_overrides=overrides,
    )


def _run_reduced_ode(cfg, seed, workers):
    m1 = cfg["mixture1d"]
    mix = Mixture1D(
        weights=tuple(m1["weights"]),
        locations=tuple(m1["locations"]),
        width=m1.get("width", 1.0),
    )
    sched = TimeSchedule.from_config(cfg["schedule"])
    r = cfg.get("reduced", {})
    K, steps = r.get("K", 2000), r.get("steps", 400)
    ens = integrate_reduced(mix, sched, K=K, steps=steps, seed=seed)
    report = experiments.ExperimentReport(name="reduced_ode", config=cfg, seeds={"master": seed})
    report.metrics["mode_fractions"] = ens.mode_fractions.tolist()
    report.metrics["weights"] = list(mix.weights)
    report.metrics["max_weight_error"] = float(
        np.max(np.abs(ens.mode_fractions - np.asarray(mix.weights)))
    )
    report.curves["terminal"] = {
        "nu_final": ens.nu_final.tolist(),
        "mode_index": ens.mode_index.tolist(),
    }
    return report


def _run_gap_scaling(cfg, seed, workers):
    m = cfg["mixture"]
    g = cfg.get("gap", {})
    params = make_mixture(d=m["d"], p=m["p"], sigma=m.get("sigma", 1.0))
    sched = _schedule_from_config(cfg)
    grid = np.linspace(sched.t_min, sched.t_max, g.get("grid_points", 100))
    # slices at the RK4 stage times too, so the reported gap carries only the
    # finite-sample parameter error, not the piecewise-constant lookup error
    slice_grid = np.unique(np.concatenate([grid, (grid[:-1] + grid[1:]) / 2]))
    n_list = g.get("n_list", [4, 8, 16, 32, 64])
    K = g.get("K", 200)
    lam, ell = g.get("lambda", 0.1), g.get("ell", 0.1)
    variant = g.get("variant", "saddle_k1")
    n_rep = g.get("seeds_per_n", 1)
    cols = {
        "n": [], "gap_mu": [], "gap_eta": [], "gap_xi": [],
        "span_mean": [], "span_sq": [], "orth_mean": [],
    }
    report = experiments.ExperimentReport(name="gap_scaling", config=cfg, seeds={"master": seed})
    for n in n_list:
        acc = {k: 0.0 for k in ("gap_mu", "gap_eta", "gap_xi", "span_mean", "span_sq", "orth_mean")}
        for rep in range(n_rep):
            ds = sample_dataset(params, int(n), seed=stream(seed, "gap_data", n, rep).integers(2**31))
            ds = attach_paired_noise(ds, seed=stream(seed, "gap_noise", n, rep).integers(2**31))
            slices = experiments.theory_slices(ds, sched, slice_grid, lam=lam, ell=ell, second_variant=variant)
            gap = experiments.exact_vs_learned_gap(
                params, ds, sched, slices, K=K, grid=grid,
                seed=stream(seed, "gap_flow", n, rep).integers(2**31),
            )
            acc["gap_mu"] += gap["span"]["mu"]
            acc["gap_eta"] += gap["span"]["eta"]
            acc["gap_xi"] += gap["span"]["xi"]
            acc["span_mean"] += gap["span_mean"]
            acc["span_sq"] += gap["span_sq"]
            acc["orth_mean"] += gap["orth_mean"]
        cols["n"].append(int(n))
        for k, v in acc.items():
            cols[k].append(v / n_rep)
    report.curves["gap_vs_n"] = cols
    report.metrics["span_sq_loglog_slope"] = float(
        np.polyfit(np.log(cols["n"]), np.log(cols["span_sq"]), 1)[0]
    )
    report.metrics["span_mean_loglog_slope"] = float(
        np.polyfit(np.log(cols["n"]), np.log(cols["span_mean"]), 1)[0]
    )
    report.metrics["orth_to_span_ratio_at_first_n"] = cols["orth_mean"][0] / cols["span_mean"][0]
    return report


def _run_mse_sweep(cfg, seed, workers):
    m = cfg["mixture"]
    params = make_mixture(d=m["d"], p=m["p"], sigma=m.get("sigma", 1.0))
    sched = _schedule_from_config(cfg)
    s = cfg.get("mse", {})
    grid = np.linspace(sched.t_min, sched.t_max, s.get("grid_points", 50))
    n = s.get("n", 64)
    ds = sample_dataset(params, n, seed=stream(seed, "mse_data").integers(2**31))
    ds = attach_paired_noise(ds, seed=stream(seed, "mse_pair").integers(2**31))
    cfg_train = _train_config(cfg, stream(seed, "mse_train").integers(2**31))
    trained = train_all(ds, sched, grid, cfg_train, workers=workers)
    curve = experiments.mse_empirical(
        trained, ds, params, sched, test_draws=s.get("test_draws", 512), seed=seed
    )
    report = experiments.ExperimentReport(name="mse_sweep", config=cfg, seeds={"master": seed})
    report.curves["mse_empirical"] = curve
    return report


def _run_overlaps_sweep(cfg, seed, workers):
    m = cfg["mixture"]
    params = make_mixture(d=m["d"], p=m["p"], sigma=m.get("sigma", 1.0))
    sched = _schedule_from_config(cfg)
    s = cfg.get("sweep", {})
    n = s.get("n", 8)
    n_seeds = s.get("seeds", 10)
    t_first = s.get("t_first", [])
    t_second = s.get("t_second", [])
    lam = cfg.get("train", {}).get("lambda", 0.1)
    ell = cfg.get("train", {}).get("ell", 0.1)
    p_mode = s.get("p_mode", "true")  # or "empirical"
    kappa = sched.kappa
    report = experiments.ExperimentReport(name="overlaps_sweep", config=cfg, seeds={"master": seed})
    rows = {k: [] for k in ("phase", "t", "quantity", "measured", "predicted")}
    for phase, t_list in (("first", t_first), ("second", t_second)):
        for t in t_list:
            measured = []
            p_hats = []
            for i in range(n_seeds):
                ds = sample_dataset(params, n, seed=stream(seed, "ov_data", phase, t, i).integers(2**31))
                ds = attach_paired_noise(ds, seed=stream(seed, "ov_pair", phase, t, i).integers(2**31))
                tc = _train_config(cfg, stream(seed, "ov_train", phase, t, i).integers(2**31))
                theta = train_all(ds, sched, [t], tc, workers=1).slices[0]
                measured.append(theory.measure_overlaps(theta, ds, params, phase))
                p_hats.append(float((ds.s > 0).mean()))
            p_for_theory = params.p if p_mode == "true" else float(np.mean(p_hats))
            if phase == "first":
                pred = theory.solve_first_phase(n, p_for_theory, params.sigma, lam, ell, kappa * t)
                quantities = ("m", "omega", "c", "b", "q")
            else:
                pred = theory.solve_second_phase(n, params.sigma, lam, sched.tau(t))
                quantities = ("m", "c", "q")
            for qty in quantities:
                rows["phase"].append(phase)
                rows["t"].append(float(t))
                rows["quantity"].append(qty)
                rows["measured"].append(float(np.mean([getattr(ov, qty) for ov in measured])))
                rows["predicted"].append(float(getattr(pred, qty)))
    report.curves["overlaps"] = rows
    report.metrics["max_abs_gap"] = float(
        np.max(np.abs(np.asarray(rows["measured"]) - np.asarray(rows["predicted"])))
    ) if rows["measured"] else 0.0
    return report


def _run_uturn(cfg, seed, workers):
    m = cfg["mixture"]
    params = make_mixture(d=m["d"], p=m["p"], sigma=m.get("sigma", 1.0))
    sched = _schedule_from_config(cfg)
    u = cfg.get("uturn", {})
    n = u.get("n", 64)
    grid = np.linspace(sched.t_min, sched.t_max, u.get("grid_points", 50))
    ds = sample_dataset(params, n, seed=stream(seed, "ut_data").integers(2**31))
    tc = _train_config(cfg, stream(seed, "ut_train").integers(2**31))
    trained = train_all(ds, sched, grid, tc, workers=workers)
    t0_list = u.get("t0_list", np.linspace(sched.t_min, sched.t_max, 9)[1:].tolist())
    curves = experiments.uturn_curve(
        trained, params, sched, t0_list, trials=cfg["montecarlo"]["K"],
        seed=stream(seed, "ut_flow").integers(2**31),
    )
    report = experiments.ExperimentReport(name="uturn", config=cfg, seeds={"master": seed})
    report.curves["retention"] = curves
    report.metrics["terminal_retention_plus"] = curves["retention_plus"][-1]
    report.metrics["terminal_retention_minus"] = curves["retention_minus"][-1]
    return report


_HANDLERS = {
    "theory_only": _run_theory_only,
    "figure1": _run_figure1,
    "reduced_ode": _run_reduced_ode,
    "gap_scaling": _run_gap_scaling,
    "mse_sweep": _run_mse_sweep,
    "overlaps_sweep": _run_overlaps_sweep,
    "uturn": _run_uturn,
}


def write_report(report: experiments.ExperimentReport, outdir: str) -> str:
    """Write report.json, config echo, and per-curve CSVs atomically."""
    run_dir = os.path.join(outdir, f"{report.name}-{report.config_digest}")
    os.makedirs(run_dir, exist_ok=True)
    payload = {
        "name": report.name,
        "config_hash": report.config_digest,
        "metrics": report.metrics,
        "curves": sorted(report.curves.keys()),
        "seeds": report.seeds,
        "wall_time": report.wall_time,
    }
    _atomic_write(
        os.path.join(run_dir, "report.json"),
        json.dumps(payload, sort_keys=True, indent=2, default=float) + "\n",
    )
    _atomic_write(
        os.path.join(run_dir, "config_echo.json"),
        json.dumps(report.config, sort_keys=True, indent=2, default=str) + "\n",
    )
    for name, curve in report.curves.items():
        emit_csv(curve, os.path.join(run_dir, f"{name}.csv"))
    return run_dir


def run(
    config_path: str,
    output_dir: Optional[str] = None,
    threads: Optional[int] = None,
    seed: Optional[int] = None,
) -> int:
    """Execute the experiment named in the config; return the exit status."""
    try:
        with open(config_path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    errors = validate_config(cfg)
    if errors:
        for e in errors:
            print(f"invalid config field {e}", file=sys.stderr)
        return 1
    if seed is not None:
        cfg.setdefault("montecarlo", {})["seed"] = seed
    eff_seed = cfg.get("montecarlo", {}).get("seed", 0)
    workers = threads or int(os.environ.get("GMFLOW_THREADS", "1"))
    outdir = output_dir or cfg.get("output_dir", "runs")
    t0 = time.time()
    try:
        report = _HANDLERS[cfg["experiment"]](cfg, eff_seed, workers)
    except (FloatingPointError, ZeroDivisionError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    if not report.wall_time:
        report.wall_time = time.time() - t0
    run_dir = write_report(report, outdir)
    print(f"wrote {run_dir}")
    return 0


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="gmflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment from a JSON config")
    runp.add_argument("config", help="path to the JSON config")
    runp.add_argument("--output-dir", default=None)
    runp.add_argument("--threads", type=int, default=None)
    runp.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, args.output_dir, args.threads, args.seed)
    return 1


if __name__ == "__main__":
    sys.exit(main())
