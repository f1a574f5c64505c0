import math

import numpy as np
import pytest

from gmflow.dae import SliceParams
from gmflow.mixture import attach_paired_noise, make_mixture, sample_dataset
from gmflow.theory import (
    OverlapSet,
    SaddleConfig,
    first_phase_residuals,
    free_energy_first_phase,
    gm_average,
    limit_overlaps,
    measure_overlaps,
    mse_theory,
    phi_moments,
    second_phase_c,
    solve_first_phase,
    solve_second_phase,
    solve_second_phase_free_energy,
)


def test_gm_average_sign_function():
    out = gm_average(lambda s, a: np.full_like(a, s), p=0.8, omega=1.3, b=0.2, kt=0.7)
    assert out == pytest.approx(0.6, abs=1e-14)


def test_gm_average_gate_mean_at_limit_point():
    # at (omega, b) = (kt, atanh(2p-1)) the gate is the posterior mean of s,
    # so E[phi] = E[s]
    p, kt = 0.8, 1.5
    b = math.atanh(2 * p - 1)
    phibar = gm_average(lambda s, a: np.tanh(a), p=p, omega=kt, b=b, kt=kt, order="dense")
    assert phibar == pytest.approx(2 * p - 1, abs=1e-10)


def test_gm_average_b_equation_consistency_at_limit_point():
    # E[phi' s] * E[phi^2] = E[phi phi'] * E[phi s] at the limit point
    p, kt = 0.7, 1.1
    b = math.atanh(2 * p - 1)
    mom = phi_moments(p, kt, b, kt, order=96)
    lhs = mom["dphi_s"] * mom["phi_sq"]
    rhs = mom["phi_dphi"] * mom["phi_s"]
    assert lhs == pytest.approx(rhs, abs=1e-8)


def test_gm_average_quadrature_check():
    # order-4 quadrature cannot integrate a sharp gate; the doubling check fires
    with pytest.raises(ValueError, match="too low"):
        gm_average(
            lambda s, a: np.tanh(50 * a), p=0.6, omega=4.0, b=0.3, kt=2.0,
            order=4, check_tol=1e-12,
        )
    # adequate order passes the same check
    gm_average(lambda s, a: np.tanh(a), p=0.5, omega=1.0, b=0.0, kt=1.0,
               order=64, check_tol=1e-9)


def test_phi_moments_against_bruteforce_mc():
    rng = np.random.default_rng(0)
    p, omega, b, kt = 0.65, 0.8, 0.3, 1.2
    mom = phi_moments(p, omega, b, kt, order=96)
    N = 400_000
    s = np.where(rng.random(N) < p, 1.0, -1.0)
    z = rng.standard_normal(N)
    a = b + kt * omega * s + omega * z
    phi = np.tanh(a)
    se = 3.0 / math.sqrt(N)
    assert mom["phi_s"] == pytest.approx(float(np.mean(phi * s)), abs=se)
    assert mom["phi_sq"] == pytest.approx(float(np.mean(phi * phi)), abs=se)
    assert mom["dphi"] == pytest.approx(float(np.mean(1 - phi * phi)), abs=se)


def test_solve_first_phase_symmetric_origin():
    ov = solve_first_phase(n=6, p=0.5, sigma=1.0, lam=0.2, ell=0.2, kt=0.0)
    assert ov.omega == 0.0 and ov.b == 0.0
    mom = phi_moments(0.5, 0.0, 0.0, 0.0, "dense")
    assert ov.m == pytest.approx(6 * mom["phi_s"] / (0.2 + 6 * mom["phi_sq"]), abs=1e-12)
    assert ov.c == 0.0 and ov.q_xi == 0.0 and ov.p_eta == 0.0


@pytest.mark.parametrize("p", [0.6, 0.8])
@pytest.mark.parametrize("kt", [0.5, 1.0, 2.0, 4.0])
def test_solve_first_phase_infinite_sample_limit(p, kt):
    # n = 10^6 with vanishing regularization reproduces the limit overlaps
    ov = solve_first_phase(n=1e6, p=p, sigma=1.0, lam=1e-8, ell=1e-8, kt=kt)
    assert abs(ov.b - math.atanh(2 * p - 1)) < 1e-3
    assert abs(ov.omega - kt) < 1e-3
    assert abs(ov.m - 1.0) < 1e-3


def test_solve_first_phase_residuals_small():
    for (n, p, kt, lam, ell) in [(8, 0.8, 1.0, 0.1, 0.1), (20, 0.65, 1.7, 0.3, 0.05)]:
        ov = solve_first_phase(n=n, p=p, sigma=1.2, lam=lam, ell=ell, kt=kt)
        assert abs(ov.residuals["b_eq"]) < 1e-6
        assert abs(ov.residuals["omega_eq"]) < 1e-6


def test_solve_first_phase_grid_box_rejection():
    # tiny box excluding the extremum reports no interior solution
    cfg = SaddleConfig(grid_box=((0.0, 0.05), (-0.05, 0.05)), grid_points=5)
    with pytest.raises(RuntimeError, match="no interior"):
        solve_first_phase(n=8, p=0.8, sigma=1.0, lam=0.1, ell=0.1, kt=1.0, cfg=cfg)


def test_solve_first_phase_degenerate_branch_detected():
    # at small kt the constant-gate branch dominates and |b| runs away
    with pytest.raises(RuntimeError, match="no interior"):
        solve_first_phase(n=8, p=0.8, sigma=1.0, lam=0.1, ell=0.1, kt=0.05)


def test_free_energy_extremizer_matches_dense_grid():
    # oracle: 120x120 grid scan must bracket the refined extremizer
    n, p, sigma, lam, ell, kt = 8, 0.8, 1.0, 0.1, 0.1, 1.2
    ov = solve_first_phase(n=n, p=p, sigma=sigma, lam=lam, ell=ell, kt=kt)
    oms = np.linspace(0.0, kt + 3.0, 120)
    bs = np.linspace(-3.0, 3.0, 120)
    F = np.array(
        [[free_energy_first_phase(om, bb, n, p, sigma, lam, ell, kt) for bb in bs] for om in oms]
    )
    i, j = np.unravel_index(np.argmax(F), F.shape)
    assert abs(oms[i] - ov.omega) <= (oms[1] - oms[0])
    assert abs(bs[j] - ov.b) <= (bs[1] - bs[0])


def test_second_phase_printed_worked_example():
    ov = solve_second_phase(8, 1.0, 0.1, 0.5)
    assert ov.c == pytest.approx(3.6 / 8.125, abs=1e-12)
    assert ov.c == pytest.approx(0.443077, abs=1e-6)
    assert ov.m == pytest.approx(0.768851, abs=1e-6)


def test_second_phase_tau_zero_has_no_skip():
    for variant in ("result2", "saddle_k1", "saddle_fresh"):
        assert solve_second_phase(5, 1.3, 0.2, 0.0, variant=variant).c == 0.0


def test_second_phase_printed_infinite_sample_limit():
    # published n -> infinity closed form
    ov = solve_second_phase(1e6, 2.0, 0.1, 0.5)
    c_t = 0.5 * 4 / (1 + 3 * 0.25)
    assert abs(ov.c - c_t) < 1e-4
    assert abs(ov.c - 1.142857) < 1e-4
    # internal identity m = n(1 - c tau)/(lam + n)
    assert ov.m == pytest.approx(1e6 * (1 - ov.c * 0.5) / (0.1 + 1e6), abs=1e-12)
    assert abs(ov.m - 0.428571) < 1e-4


def test_second_phase_saddle_limits_to_exact_denoiser():
    # the self-consistent variants approach the closed-form denoiser skip
    for sigma in (0.5, 1.0, 2.0):
        for tau in (0.2, 0.5, 0.8):
            c_exact = tau * sigma**2 / ((1 - tau) ** 2 + sigma**2 * tau**2)
            for variant in ("saddle_k1", "saddle_fresh"):
                c = second_phase_c(1e7, sigma, 0.1, tau, variant=variant)
                assert abs(c - c_exact) < 1e-5


def test_second_phase_saddle_k1_matches_free_energy_oracle():
    # independent numeric extremization of the effective free energy
    for (n, sigma, lam, tau) in [(8, 1.0, 0.1, 0.5), (8, 1.3, 0.2, 0.45), (24, 0.7, 0.05, 0.7)]:
        closed = solve_second_phase(n, sigma, lam, tau, variant="saddle_k1")
        oracle = solve_second_phase_free_energy(n, sigma, lam, tau)
        assert oracle.residuals["grad_norm"] < 1e-7
        for attr in ("c", "m", "q", "q_xi", "q_eta"):
            assert getattr(closed, attr) == pytest.approx(getattr(oracle, attr), abs=1e-6)


def test_limit_overlaps_values():
    first = limit_overlaps("first", 0.5, 1.0, 1.0)
    assert first.b == 0.0 and first.m == 1.0
    first2 = limit_overlaps("first", 0.8, 1.0, 2.0)
    assert first2.b == pytest.approx(0.693147, abs=1e-6)
    assert (first2.omega, first2.m) == (2.0, 1.0)
    second = limit_overlaps("second", 0.5, 1.0, 1.0)
    assert second.c == 1.0 and second.m == 0.0


def test_measure_overlaps_mu_aligned():
    params = make_mixture(d=30, p=0.7, sigma=1.0)
    ds = sample_dataset(params, 6, seed=1)
    theta = SliceParams(c=0.2, b=0.1, u=params.mu.copy(), w=np.zeros(30), t=0.5)
    ov = measure_overlaps(theta, ds, params, "first")
    assert ov.m == pytest.approx(1.0, abs=1e-12)
    assert ov.q == pytest.approx(1.0, abs=1e-12)
    assert ov.omega == 0.0 and ov.r == 0.0 and ov.p_eta == 0.0


def test_measure_overlaps_dot_product_oracle():
    # brute-force per-sample dot products at d = 50
    params = make_mixture(d=50, p=0.6, sigma=1.4)
    ds = attach_paired_noise(sample_dataset(params, 9, seed=2), seed=3)
    rng = np.random.default_rng(4)
    theta = SliceParams(c=0.3, b=-0.2, u=rng.standard_normal(50), w=rng.standard_normal(50), t=0.5)
    ov = measure_overlaps(theta, ds, params, "second", gauge="none")
    q_eta = np.mean([ds.s[i] * float(ds.z[i] @ theta.u) / 50 for i in range(9)])
    q_xi = np.mean([ds.s[i] * float(ds.x0[i] @ theta.u) / 50 for i in range(9)])
    p_xi = np.mean([ds.s[i] * float(ds.x0[i] @ theta.w) / 50 for i in range(9)])
    assert ov.q_eta == pytest.approx(q_eta, abs=1e-12)
    assert ov.q_xi == pytest.approx(q_xi, abs=1e-12)
    assert ov.p_xi == pytest.approx(p_xi, abs=1e-12)
    assert ov.r == pytest.approx(float(theta.w @ theta.w) / 50, abs=1e-12)


def test_measure_overlaps_gauge_canonicalization():
    # (u, w, b) -> (-u, -w, -b) leaves the network invariant; measurement
    # reports the m >= 0 representative
    params = make_mixture(d=20, p=0.7, sigma=1.0)
    ds = sample_dataset(params, 5, seed=5)
    theta = SliceParams(c=0.1, b=0.4, u=params.mu.copy(), w=2 * params.mu, t=0.3)
    flipped = SliceParams(c=0.1, b=-0.4, u=-params.mu, w=-2 * params.mu, t=0.3)
    a = measure_overlaps(theta, ds, params, "first")
    b = measure_overlaps(flipped, ds, params, "first")
    for attr in ("m", "omega", "b", "q_eta", "p_eta", "q", "r", "c"):
        assert getattr(a, attr) == pytest.approx(getattr(b, attr), abs=1e-12)


def test_mse_limit_table():
    rng = np.random.default_rng(6)
    for _ in range(5):
        p = float(rng.uniform(0.55, 0.95))
        sigma = float(rng.uniform(0.5, 2.0))
        at0 = mse_theory("first", limit_overlaps("first", p, sigma, 0.0), p, sigma, n_mode="infinite")
        assert at0 == pytest.approx(sigma**2 + 4 * p * (1 - p), abs=1e-6)
        just_after = mse_theory("second", limit_overlaps("second", p, sigma, 0.0), p, sigma, n_mode="infinite")
        assert just_after == pytest.approx(sigma**2, abs=1e-6)
        at_end = mse_theory("second", limit_overlaps("second", p, sigma, 1.0), p, sigma, n_mode="infinite")
        assert at_end == pytest.approx(0.0, abs=1e-6)


def test_mse_second_phase_worked_example():
    # sigma = 1, tau = 0.5, published limit: c = 0.5, mse = 0.625
    ov = limit_overlaps("second", 0.8, 1.0, 0.5)
    assert ov.c == pytest.approx(0.5, abs=1e-12)
    assert mse_theory("second", ov, 0.8, 1.0, n_mode="infinite") == pytest.approx(0.625, abs=1e-12)


def test_mse_first_phase_monotone_for_strong_dilation():
    for kappa in (2.0, 4.0):
        vals = [
            mse_theory("first", limit_overlaps("first", 0.8, 1.0, kappa * t), 0.8, 1.0, n_mode="infinite")
            for t in np.linspace(0.01, 0.99, 40)
        ]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_mse_finite_n_approaches_infinite_form():
    p, sigma, kt = 0.8, 1.0, 1.5
    ov = solve_first_phase(n=1e6, p=p, sigma=sigma, lam=1e-8, ell=1e-8, kt=kt)
    fin_train = mse_theory("first", ov, p, sigma, which="train")
    fin_test = mse_theory("first", ov, p, sigma, which="test")
    inf = mse_theory("first", limit_overlaps("first", p, sigma, kt), p, sigma, n_mode="infinite")
    assert fin_train == pytest.approx(inf, abs=1e-4)
    assert fin_test == pytest.approx(inf, abs=1e-4)


def test_cor2_footnote_phis_equals_phisq_at_limit_point():
    # the two published infinite-sample mse forms coincide because
    # E[phi s] = E[phi^2] at the limit point
    for (p, kt) in [(0.8, 0.5), (0.6, 2.0), (0.9, 1.0)]:
        b = math.atanh(2 * p - 1)
        mom = phi_moments(p, kt, b, kt, order="dense")
        assert mom["phi_s"] == pytest.approx(mom["phi_sq"], abs=1e-10)


def test_consistency_chain_first_phase():
    # solve at n = 10^6 agrees with the limit overlaps componentwise to 1e-3
    ov = solve_first_phase(n=1e6, p=0.8, sigma=1.0, lam=1e-8, ell=1e-8, kt=1.0)
    lim = limit_overlaps("first", 0.8, 1.0, 1.0)
    for attr in ("m", "omega", "b", "q", "c", "q_eta", "p_eta", "q_xi"):
        assert abs(getattr(ov, attr) - getattr(lim, attr)) < 1e-3


def test_consistency_chain_second_phase():
    ov = solve_second_phase(1e6, 1.5, 1e-8, 0.6)
    lim = limit_overlaps("second", 0.8, 1.5, 0.6)
    for attr in ("m", "c", "q", "q_eta", "q_xi"):
        assert abs(getattr(ov, attr) - getattr(lim, attr)) < 1e-3


def test_quadrature_doubling_stability():
    ov64 = solve_first_phase(n=8, p=0.8, sigma=1.0, lam=0.1, ell=0.1, kt=1.0,
                             cfg=SaddleConfig(quad_order=64))
    ov128 = solve_first_phase(n=8, p=0.8, sigma=1.0, lam=0.1, ell=0.1, kt=1.0,
                              cfg=SaddleConfig(quad_order=128))
    for attr in ("m", "omega", "b", "q", "q_eta", "r"):
        assert abs(getattr(ov64, attr) - getattr(ov128, attr)) < 1e-8
    assert ov64.residuals["quad_shift"] < 1e-8


def test_overlapset_validates_phase():
    with pytest.raises(ValueError):
        OverlapSet(phase="third", n=1)
