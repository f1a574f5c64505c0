import math

import numpy as np
import pytest

from gmflow.dae import DenoiserSchedule, SliceParams, TrainConfig, train_all
from gmflow.experiments import (
    estimate_p,
    estimate_sigma,
    exact_vs_learned_gap,
    figure1_run,
    mse_empirical,
    theory_slices,
    uturn_curve,
)
from gmflow.flow import TrajectoryEnsemble, exact_field, integrate_ensemble
from gmflow.mixture import attach_paired_noise, make_mixture, projection_states, sample_dataset
from gmflow.schedule import coeffs_at, two_mode_schedule


def _ensemble_of(params, states):
    stats = projection_states(params, states, 1.0)
    return TrajectoryEnsemble(
        grid=np.array([0.0, 1.0]),
        d=params.d,
        K=states.shape[0],
        seed=0,
        M=np.stack([stats.M, stats.M]),
        nu=np.stack([stats.nu, stats.nu]),
        orth_var=np.array([stats.orth_variance, stats.orth_variance]),
        checkpoints={0: states, 1: states},
    )


def test_estimate_p_degenerate_ensembles():
    params = make_mixture(d=12, p=0.5, sigma=1.0)
    plus = _ensemble_of(params, np.tile(params.mu, (9, 1)))
    minus = _ensemble_of(params, np.tile(-params.mu, (9, 1)))
    assert estimate_p(plus) == 1.0
    assert estimate_p(minus) == 0.0


def test_estimate_p_counts_ties_as_plus():
    params = make_mixture(d=12, p=0.5, sigma=1.0)
    zeros = _ensemble_of(params, np.zeros((4, 12)))
    assert estimate_p(zeros) == 1.0


def test_estimate_p_binomial_band():
    # unbiased binomial estimator: 3-sigma coverage over 100 seeds
    p, K = 0.8, 400
    params = make_mixture(d=8, p=p, sigma=1.0)
    inside = 0
    band = 3 * math.sqrt(p * (1 - p) / K)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        signs = np.where(rng.random(K) < p, 1.0, -1.0)
        states = signs[:, None] * params.mu[None, :]
        if abs(estimate_p(_ensemble_of(params, states)) - p) < band:
            inside += 1
    assert inside >= 95


def test_estimate_sigma_exact_modes():
    params = make_mixture(d=16, p=0.7, sigma=1.0)
    signs = np.where(np.arange(10) % 3 == 0, 1.0, -1.0)
    states = signs[:, None] * params.mu[None, :]
    assert estimate_sigma(_ensemble_of(params, states), params) == pytest.approx(0.0, abs=1e-12)


def test_estimate_sigma_chi2_band():
    # s mu + sigma g with g orthogonal Gaussian; K(d-1) >= 1e5 draws
    sigma = 1.5
    params = make_mixture(d=2000, p=0.6, sigma=sigma)
    rng = np.random.default_rng(3)
    K = 60
    g = rng.standard_normal((K, 2000))
    g -= np.multiply.outer(g @ params.mu / 2000, params.mu)
    signs = np.where(rng.random(K) < 0.6, 1.0, -1.0)
    states = signs[:, None] * params.mu[None, :] + sigma * g
    est = estimate_sigma(_ensemble_of(params, states), params)
    assert abs(est - sigma) < 0.02 * sigma


def _gap_setup(d=300, n=6, kappa=3.0):
    params = make_mixture(d=d, p=0.8, sigma=1.0)
    sched = two_mode_schedule(kappa=kappa, d=d)
    ds = attach_paired_noise(sample_dataset(params, n, seed=1), seed=2)
    return params, sched, ds


def test_gap_zero_for_exact_matched_slices():
    # matched slices must exist at every RK4 stage time (the lookup is
    # piecewise-constant), so the slice grid carries the midpoints too
    params, sched, ds = _gap_setup()
    grid = np.linspace(0, 2, 41)
    slice_grid = np.unique(np.concatenate([grid, (grid[:-1] + grid[1:]) / 2]))
    slices = []
    for t in slice_grid:
        co = coeffs_at(sched, float(t))
        denom = co.alpha**2 + params.sigma**2 * co.beta**2
        slices.append(
            SliceParams(
                c=co.beta * params.sigma**2 / denom,
                b=params.h,
                u=(co.alpha**2 / denom) * params.mu,
                w=math.sqrt(params.d) * co.beta / denom * params.mu,
                t=float(t),
            )
        )
    matched = DenoiserSchedule(grid=slice_grid, slices=slices)
    gap = exact_vs_learned_gap(params, ds, sched, matched, K=20, seed=5, grid=grid)
    assert gap["span_mean"] < 1e-6
    assert gap["orth_mean"] < 1e-6


def test_gap_requires_paired_noise():
    params, sched, _ = _gap_setup()
    ds = sample_dataset(params, 6, seed=1)
    grid = np.linspace(0, 2, 11)
    slices = theory_slices(attach_paired_noise(ds, seed=2), sched, grid)
    with pytest.raises(ValueError, match="paired noise"):
        exact_vs_learned_gap(params, ds, sched, slices, K=4, seed=0)


def test_gap_deterministic_given_seed():
    params, sched, ds = _gap_setup()
    grid = np.linspace(0, 2, 31)
    slices = theory_slices(ds, sched, grid)
    a = exact_vs_learned_gap(params, ds, sched, slices, K=12, seed=9)
    b = exact_vs_learned_gap(params, ds, sched, slices, K=12, seed=9)
    assert a == b


def test_theory_slices_structure():
    params, sched, ds = _gap_setup()
    grid = np.array([0.3, 0.9, 1.4, 2.0])
    slices = theory_slices(ds, sched, grid)
    assert slices.slices[0].c == 0.0  # first phase has no skip
    assert slices.slices[2].c > 0.0  # second phase does
    # first-phase gate weight is along mu at strength kt
    w0 = slices.slices[0].w
    assert np.allclose(w0, (sched.kappa * 0.3) * params.mu)


def test_mse_empirical_matched_point_masses():
    # sigma = 0 data and the identity denoiser at the terminal slice: mse 0
    params = make_mixture(d=20, p=0.7, sigma=0.0, allow_degenerate_sigma=True)
    sched = two_mode_schedule(kappa=2.0, d=400)
    ds = sample_dataset(params, 5, seed=3)
    grid = np.array([2.0])
    ident = DenoiserSchedule(
        grid=grid,
        slices=[SliceParams(c=1.0, b=0.0, u=np.zeros(20), w=np.zeros(20), t=2.0)],
    )
    curve = mse_empirical(ident, ds, params, sched, test_draws=16, seed=0)
    assert curve["mse_train"][0] == pytest.approx(0.0, abs=1e-12)
    assert curve["mse_test"][0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.slow
def test_mse_empirical_tracks_limit_values():
    # trained ends of the sweep approach the published limits at desk scale
    d, n = 800, 64
    params = make_mixture(d=d, p=0.8, sigma=1.0)
    sched = two_mode_schedule(kappa=4.0, d=d)
    ds = attach_paired_noise(sample_dataset(params, n, seed=11), seed=12)
    grid = np.array([0.0, 1.0 + 1e-9, 2.0])
    cfg = TrainConfig(epochs=2500, seed=4)
    trained = train_all(ds, sched, grid, cfg, workers=2)
    curve = mse_empirical(trained, ds, params, sched, test_draws=800, seed=5)
    assert abs(curve["mse_test"][0] - 1.64) < 0.1  # sigma^2 + 4p(1-p)
    assert abs(curve["mse_test"][1] - 1.0) < 0.1  # sigma^2 at the phase switch
    assert curve["mse_test"][2] < 0.1  # 0 at the terminal time


def test_figure1_budget_guard():
    with pytest.raises(ValueError, match="budget"):
        figure1_run(d=5000, n=128, p=0.8, kappa=4.0, grid_points=100,
                    epochs=5000, K=10, seed=0, budget=1e9)


def test_figure1_accepts_paper_scale_config():
    # the published-scale configuration passes the resource guard
    cost = 5000 * 128 * 100 * 5000
    assert cost <= 1.0e12


@pytest.mark.slow
def test_figure1_balanced_case_needs_no_dilation():
    # seed 9 draws a dataset whose empirical sign fraction is exactly 0.5,
    # so the 0.05 band tests the flow rather than the data fluctuation
    report = figure1_run(
        d=300, n=128, p=0.5, kappa=4.0, grid_points=40, epochs=600, K=400,
        seed=9, workers=2,
    )
    assert abs(report.metrics["p_hat_dilated"] - 0.5) < 0.05
    assert abs(report.metrics["p_hat_identity"] - 0.5) < 0.05


@pytest.mark.slow
def test_figure1_kappa_doubling_does_not_hurt():
    kwargs = dict(d=400, n=64, p=0.8, grid_points=50, epochs=800, K=400, seed=3, workers=2)
    r4 = figure1_run(kappa=4.0, **kwargs)
    r8 = figure1_run(kappa=8.0, **kwargs)
    assert r8.metrics["p_err_dilated"] <= r4.metrics["p_err_dilated"] + 0.03


def _theory_uturn_setup(d=250, kappa=4.0, p=0.8):
    params = make_mixture(d=d, p=p, sigma=1.0)
    sched = two_mode_schedule(kappa=kappa, d=d)
    ds = attach_paired_noise(sample_dataset(params, 16, seed=21), seed=22)
    grid = np.linspace(0, 2, 51)
    slices = theory_slices(ds, sched, grid)
    return params, sched, slices


def test_uturn_terminal_time_retains_everything():
    params, sched, slices = _theory_uturn_setup()
    curves = uturn_curve(slices, params, sched, t0_list=[2.0], trials=60, seed=1)
    assert curves["retention_plus"][0] == 1.0
    assert curves["retention_minus"][0] == 1.0


@pytest.mark.slow
def test_uturn_curve_shape():
    params, sched, slices = _theory_uturn_setup()
    t0s = [0.04, 0.4, 0.8, 1.2, 1.6, 2.0]
    curves = uturn_curve(slices, params, sched, t0_list=t0s, trials=500, seed=7)
    rp = curves["retention_plus"]
    rm = curves["retention_minus"]
    assert rp[-1] == 1.0 and rm[-1] == 1.0
    # early-t0 retention collapses to the generation probability of the class
    assert abs(rp[0] - 0.8) < 0.07
    assert abs(rm[0] - 0.2) < 0.07
    # non-decreasing within a Monte Carlo band
    assert all(b >= a - 0.03 for a, b in zip(rp, rp[1:]))
    assert all(b >= a - 0.03 for a, b in zip(rm, rm[1:]))
