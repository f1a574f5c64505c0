"""End-to-end experiment drivers.

Each driver returns an ExperimentReport (config snapshot, scalar metrics,
named curves); writing reports and CSV curves to disk is handled by the
CLI layer.  All drivers are deterministic given their seed.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import theory
from .dae import (
    DenoiserSchedule,
    SliceParams,
    TrainConfig,
    learned_field,
    train_all,
)
from .flow import TrajectoryEnsemble, exact_field, integrate_ensemble
from .mixture import (
    Dataset,
    MixtureParams,
    attach_paired_noise,
    make_mixture,
    sample_dataset,
)
from .rng import stream
from .schedule import TimeSchedule, coeffs_at, identity_schedule, two_mode_schedule

__all__ = [
    "ExperimentReport",
    "estimate_p",
    "estimate_sigma",
    "theory_slices",
    "exact_vs_learned_gap",
    "mse_empirical",
    "figure1_run",
    "uturn_curve",
    "config_hash",
]


@dataclass
class ExperimentReport:
    """Named results of one driver run, traceable to its config hash."""

    name: str
    config: dict
    metrics: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # name -> {column -> list}
    seeds: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def config_digest(self) -> str:
        return config_hash(self.config)


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def estimate_p(ensemble: TrajectoryEnsemble, params: Optional[MixtureParams] = None) -> float:
    """Fraction of trajectories with terminal mode projection M > 0 (ties +)."""
    if ensemble.K == 0:
        raise ValueError("empty ensemble")
    M = ensemble.M[-1]
    return float(np.mean(M >= 0.0))


def estimate_sigma(ensemble: TrajectoryEnsemble, params: MixtureParams) -> float:
    """Pooled orthogonal-coordinate standard deviation at the terminal time."""
    if ensemble.K == 0:
        raise ValueError("empty ensemble")
    return float(math.sqrt(max(ensemble.orth_var[-1], 0.0)))


def _first_phase_slice(
    params: MixtureParams,
    dataset: Dataset,
    kt: float,
    t: float,
    n: int,
    lam: float,
    ell: float,
    mode: str,
) -> SliceParams:
    """Build a first-phase slice from the overlap predictions.

    mode="anchored" pins (omega, b) to the infinite-sample point (kt, h)
    and keeps the finite-n (m, q_eta); it is defined for every kt, unlike
    the extremizer, whose interior solution disappears at small kt.
    """
    p, sigma, d = params.p, params.sigma, params.d
    if mode == "saddle":
        ov = theory.solve_first_phase(n, p, sigma, lam, ell, kt)
        omega, b, m, q_eta = ov.omega, ov.b, ov.m, ov.q_eta
    elif mode == "anchored":
        mom = theory.phi_moments(p, kt, params.h, kt, "dense")
        den = lam + n * mom["phi_sq"]
        m = n * mom["phi_s"] / den
        q_eta = sigma * m / n
        omega, b = kt, params.h
    else:
        raise ValueError(f"unknown first-phase slice mode {mode!r}")
    u = m * params.mu + q_eta * np.sum(dataset.s[:, None] * dataset.z, axis=0)
    w = omega * params.mu
    return SliceParams(c=0.0, b=float(b), u=u, w=w, t=float(t))


def _second_phase_slice(
    params: MixtureParams,
    dataset: Dataset,
    tau: float,
    t: float,
    n: int,
    lam: float,
    ell: float,
    variant: str,
) -> SliceParams:
    """Second-phase slice from the closed-form overlaps at coordinate tau.

    The gate is pinned to the saturating closed-form-denoiser direction
    (w along mu at the exact gain, b = h); the skip and output weights
    carry the finite-n overlap structure, including the quenched-noise
    component when the variant has one (requires paired noise).
    """
    ov = theory.solve_second_phase(n, params.sigma, lam, tau, variant=variant)
    u = ov.m * params.mu + ov.q_eta * np.sum(dataset.s[:, None] * dataset.z, axis=0)
    if ov.q_xi != 0.0:
        if not dataset.has_paired_noise:
            raise ValueError("variant with q_xi != 0 requires paired noise (xi)")
        u = u + ov.q_xi * np.sum(dataset.s[:, None] * dataset.x0, axis=0)
    alpha = 1.0 - tau
    denom = alpha**2 + params.sigma**2 * tau**2
    w = math.sqrt(params.d) * (tau / denom) * params.mu
    return SliceParams(c=float(ov.c), b=float(params.h), u=u, w=w, t=float(t))


def theory_slices(
    dataset: Dataset,
    schedule: TimeSchedule,
    grid: Sequence[float],
    lam: float = 0.1,
    ell: float = 0.1,
    second_variant: str = "saddle_k1",
    first_mode: str = "anchored",
) -> DenoiserSchedule:
    """Denoiser schedule whose slices realize the predicted overlaps.

    Requires the two-leg dilated schedule (t <= 1 is the mode-probability
    leg with kt = kappa * t; t > 1 the variance leg at tau = beta(t)).
    """
    if schedule.kind != "two_mode_dilated":
        raise ValueError("theory_slices requires a two_mode_dilated schedule")
    params = dataset.params
    n = dataset.n
    slices = []
    for t in grid:
        t = float(t)
        if t <= 1.0:
            kt = schedule.kappa * t
            slices.append(
                _first_phase_slice(params, dataset, kt, t, n, lam, ell, first_mode)
            )
        else:
            tau = schedule.tau(t)
            slices.append(
                _second_phase_slice(params, dataset, tau, t, n, lam, ell, second_variant)
            )
    return DenoiserSchedule(grid=np.asarray(grid, dtype=np.float64), slices=slices)


def _orthonormal_complement(vectors: list, count: int, d: int, seed: int) -> list:
    """`count` random unit vectors orthogonal to `vectors` and each other."""
    rng = stream(seed, "orth_complement")
    basis = []
    for v in vectors:
        u = v.copy()
        for b in basis:
            u -= (u @ b) * b
        u /= np.linalg.norm(u)
        basis.append(u)
    out = []
    while len(out) < count:
        g = rng.standard_normal(d)
        for b in basis:
            g -= (g @ b) * b
        nrm = np.linalg.norm(g)
        if nrm > 1e-8:
            g /= nrm
            basis.append(g)
            out.append(g)
    return out


def exact_vs_learned_gap(
    params: MixtureParams,
    dataset: Dataset,
    schedule: TimeSchedule,
    theta_schedule: DenoiserSchedule,
    K: int,
    seed: int,
    grid: Optional[Sequence[float]] = None,
    n_orth: int = 5,
) -> dict:
    """Terminal gap between exact and learned flows from shared starts.

    Reports mean_k |w.(X_T - X_hat_T)| / sqrt(d) for unit w along mu, eta,
    xi and for n_orth random unit vectors orthogonal to their span.
    """
    if dataset.xi is None:
        raise ValueError("dataset lacks paired noise: xi projection undefined")
    d = params.d
    if grid is None:
        grid = theta_schedule.grid
    x0 = stream(seed, "gap_init").standard_normal((K, d))
    ens_exact = integrate_ensemble(
        exact_field(params, schedule), d, K, grid, seed,
        params=params, checkpoints="endpoints", initial=x0,
    )
    ens_learn = integrate_ensemble(
        learned_field(theta_schedule, schedule), d, K, grid, seed,
        params=params, checkpoints="endpoints", initial=x0,
    )
    diff = ens_exact.terminal_states - ens_learn.terminal_states
    mu_hat = params.mu / np.linalg.norm(params.mu)
    eta_hat = dataset.eta / np.linalg.norm(dataset.eta)
    xi_hat = dataset.xi / np.linalg.norm(dataset.xi)
    span = {"mu": mu_hat, "eta": eta_hat, "xi": xi_hat}
    gaps = {
        name: float(np.mean(np.abs(diff @ v)) / math.sqrt(d))
        for name, v in span.items()
    }
    orth = _orthonormal_complement([mu_hat, eta_hat, xi_hat], n_orth, d, seed)
    orth_gaps = [float(np.mean(np.abs(diff @ v)) / math.sqrt(d)) for v in orth]
    # squared span-projection norm per sqrt(d)^2: mean_k ||P_span diff_k||^2/d.
    # The per-direction unit gaps along eta and xi scale like n^{-1/2} (their
    # weight vectors aggregate n noise draws), so this quadratic aggregate is
    # the quantity with the clean O(1/n) decay.
    span_mat = np.stack([mu_hat, eta_hat, xi_hat])
    proj = diff @ span_mat.T  # (K, 3); directions are near-orthogonal
    span_sq = float(np.mean(np.einsum("kj,kj->k", proj, proj)) / d)
    n = dataset.n
    scaled = {
        "mu": gaps["mu"],
        "eta": gaps["eta"] / (params.sigma * math.sqrt(n)),
        "xi": gaps["xi"] / math.sqrt(n),
    }
    return {
        "span": gaps,
        "span_mean": float(np.mean(list(gaps.values()))),
        "span_sq": span_sq,
        "span_scaled": scaled,
        "span_scaled_mean": float(np.mean(list(scaled.values()))),
        "orth": orth_gaps,
        "orth_mean": float(np.mean(orth_gaps)),
    }


def mse_empirical(
    theta_schedule: DenoiserSchedule,
    dataset: Dataset,
    params: MixtureParams,
    schedule: TimeSchedule,
    test_draws: int,
    seed: int,
) -> dict:
    """Per-grid-time scaled train and test MSE of the trained denoiser.

    Train pairs reuse the dataset (with its paired noise when present,
    else a fixed keyed draw); test pairs are fresh data and noise.
    """
    d = params.d
    if dataset.has_paired_noise:
        x0_train = dataset.x0
    else:
        x0_train = stream(seed, "mse_train_noise").standard_normal((dataset.n, d))
    test_ds = sample_dataset(params, test_draws, seed=int(stream(seed, "mse_test").integers(2**31)))
    x0_test = stream(seed, "mse_test_noise").standard_normal((test_draws, d))
    from .dae import dae_forward

    ts, mse_train, mse_test = [], [], []
    for t, theta in zip(theta_schedule.grid, theta_schedule.slices):
        co = coeffs_at(schedule, float(t))
        xt_train = co.alpha * x0_train + co.beta * dataset.x1
        r_train = dae_forward(theta, xt_train) - dataset.x1
        xt_test = co.alpha * x0_test + co.beta * test_ds.x1
        r_test = dae_forward(theta, xt_test) - test_ds.x1
        ts.append(float(t))
        mse_train.append(float(np.mean(np.einsum("nd,nd->n", r_train, r_train)) / d))
        mse_test.append(float(np.mean(np.einsum("nd,nd->n", r_test, r_test)) / d))
    return {"t": ts, "mse_train": mse_train, "mse_test": mse_test}


def figure1_run(
    d: int,
    n: int,
    p: float,
    kappa: float,
    grid_points: int,
    epochs: int,
    K: int,
    seed: int,
    sigma: float = 1.0,
    workers: int = 1,
    budget: float = 1.0e12,
    train_overrides: Optional[dict] = None,
) -> ExperimentReport:
    """Mode-probability recovery with and without time dilation.

    Trains one denoiser schedule per interpolant (identity and two-leg
    dilated), generates K trajectories with each, and reports the terminal
    estimate of P(M > 0) along with the full curves over time.
    """
    cost = float(d) * n * grid_points * epochs
    if cost > budget:
        raise ValueError(
            f"resource budget exceeded: d*n*grid_points*epochs = {cost:.3g} > {budget:.3g}"
        )
    t_start = time.time()
    config = dict(
        experiment="figure1", d=d, n=n, p=p, sigma=sigma, kappa=kappa,
        grid_points=grid_points, epochs=epochs, K=K, seed=seed,
    )
    params = make_mixture(d=d, p=p, sigma=sigma)
    dataset = sample_dataset(params, n, seed=stream(seed, "fig1_data").integers(2**31))
    overrides = train_overrides or {}

    report = ExperimentReport(name="figure1", config=config, seeds={"master": seed})
    for label, sched in (
        ("dilated", two_mode_schedule(kappa=kappa, d=d)),
        ("identity", identity_schedule()),
    ):
        grid = np.linspace(sched.t_min, sched.t_max, grid_points)
        cfg = TrainConfig(
            epochs=epochs,
            seed=stream(seed, "fig1_train", label).integers(2**31),
            **overrides,
        )
        trained = train_all(dataset, sched, grid, cfg, workers=workers)
        ens = integrate_ensemble(
            learned_field(trained, sched), d, K, grid,
            seed=stream(seed, "fig1_flow", label).integers(2**31),
            params=params, checkpoints="endpoints",
        )
        p_curve = (ens.M >= 0.0).mean(axis=1)
        report.curves[f"p_curve_{label}"] = {
            "t": grid.tolist(),
            "p_hat": p_curve.tolist(),
        }
        report.metrics[f"p_hat_{label}"] = float(p_curve[-1])
        report.metrics[f"sigma_hat_{label}"] = estimate_sigma(ens, params)
    report.metrics["p_err_dilated"] = abs(report.metrics["p_hat_dilated"] - p)
    report.metrics["p_err_identity"] = abs(report.metrics["p_hat_identity"] - p)
    report.wall_time = time.time() - t_start
    return report


def uturn_curve(
    theta_schedule: DenoiserSchedule,
    params: MixtureParams,
    schedule: TimeSchedule,
    t0_list: Sequence[float],
    trials: int,
    seed: int,
) -> dict:
    """Mode retention of backward-to-t0, renoise, forward-to-end runs.

    For each start mode s0: draw x1 ~ N(s0 mu, sigma^2 Id), run the learned
    flow backward from the terminal time to t0 on the reversed grid, then
    restart the forward flow from

        x <- alpha_t0 * g  +  beta_t0 * f_theta(x, t0),    g ~ N(0, Id)

    i.e. keep the denoiser's data estimate and redraw the entire noise leg
    of the interpolant, and classify the regenerated sample by the sign of
    its terminal mode projection.  The deterministic flow is reversible,
    so any scheme that preserves the mode-carrying projection across t0
    retains the mode with probability one; redrawing the noise leg is what
    makes the restart carry exactly the information the time-t0 state has
    about the data, matching the role of the independent noise in the
    stochastic variant of this procedure.  At t0 = terminal no noise is
    injected (alpha = 0) and retention is exactly 1; as t0 -> 0 the restart
    approaches a fresh generation and retention falls to the flow's own
    mode probability.  Curves are reported per starting mode and pooled by
    the mixture weights.
    """
    grid = np.asarray(theta_schedule.grid, dtype=np.float64)
    d = params.d
    field_fn = learned_field(theta_schedule, schedule)
    from .dae import dae_forward
    from .flow import rk4_step

    t0_idx = [int(np.argmin(np.abs(grid - t0))) for t0 in t0_list]
    curves = {"t0": [float(grid[i]) for i in t0_idx]}
    retention = {}
    for s0 in (1.0, -1.0):
        key = "plus" if s0 > 0 else "minus"
        rng = stream(seed, "uturn", key)
        z = rng.standard_normal((trials, d))
        x_end = s0 * params.mu[None, :] + params.sigma * z
        kept = []
        for idx in t0_idx:
            x = x_end.copy()
            for j in range(len(grid) - 1, idx, -1):
                h = float(grid[j - 1] - grid[j])  # negative: backward
                x = rk4_step(field_fn, float(grid[j]), h, x)
            t0 = float(grid[idx])
            co = coeffs_at(schedule, t0)
            x1_hat = dae_forward(theta_schedule.slice_at_or_below(t0), x)
            g = rng.standard_normal((trials, d))
            x = co.alpha * g + co.beta * x1_hat
            for j in range(idx, len(grid) - 1):
                h = float(grid[j + 1] - grid[j])
                x = rk4_step(field_fn, float(grid[j]), h, x)
            M_final = (x @ params.mu) / d
            same = (M_final >= 0.0) if s0 > 0 else (M_final < 0.0)
            kept.append(float(np.mean(same)))
        retention[key] = kept
    curves["retention_plus"] = retention["plus"]
    curves["retention_minus"] = retention["minus"]
    curves["retention_pooled"] = [
        params.p * a + (1.0 - params.p) * b
        for a, b in zip(retention["plus"], retention["minus"])
    ]
    return curves
