"""Reduced 1-D projection dynamics for multi-mode mixtures.

Projecting the flow onto one mode direction gives a scalar ODE

    nu' = (tau'/tau) * (nu - eta_tau(nu))

where eta_t(nu) = E[Z | (1-t) Z + t M = nu] is the posterior mean of the
base noise given the scalar observation, and M is a 1-D Gaussian mixture.
The 1/tau factor is singular at the start, so integration begins at
eps = domain_length / steps with the initial condition drawn from the
interpolant law at eps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .rng import stream
from .schedule import TimeSchedule

__all__ = [
    "Mixture1D",
    "reduced_denoiser_1d",
    "noise_posterior_mean",
    "ReducedEnsemble",
    "integrate_reduced",
]


@dataclass(frozen=True)
class Mixture1D:
    """Scalar mixture sum_i p_i N(r_i, width^2); width defaults to 1."""

    weights: tuple
    locations: tuple
    width: float = 1.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        r = tuple(float(x) for x in self.locations)
        if len(w) != len(r) or len(w) == 0:
            raise ValueError("weights and locations must have equal nonzero length")
        if any(x <= 0 for x in w):
            raise ValueError("weights must be positive")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {sum(w)}")
        if self.width < 0:
            raise ValueError("width must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "locations", r)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        locs = np.asarray(self.locations)[comp]
        return locs + self.width * rng.standard_normal(count)

    def nearest_mode(self, values: np.ndarray) -> np.ndarray:
        locs = np.asarray(self.locations)
        return np.argmin(np.abs(np.subtract.outer(values, locs)), axis=-1)


def reduced_denoiser_1d(mix: Mixture1D, t: float, nu) -> np.ndarray | float:
    """Posterior mean E[Z | (1-t) Z + t M = nu] via mode responsibilities.

    Per mode the observation is N(t r_i, (1-t)^2 + t^2 width^2) and the
    conditional mean of Z is (1-t)(nu - t r_i) / var_i; responsibilities are
    softmax-combined in the log domain.  At t = 0 this reduces to nu.
    """
    nu_arr = np.atleast_1d(np.asarray(nu, dtype=np.float64))
    locs = np.asarray(mix.locations)
    var = (1.0 - t) ** 2 + (t * mix.width) ** 2
    if var <= 0.0:
        # t=1 with width 0: observation pins M exactly, Z unconstrained.
        out = np.zeros_like(nu_arr)
        return out if np.ndim(nu) else float(out[0])
    resid = nu_arr[:, None] - t * locs[None, :]
    logw = np.log(mix.weights)[None, :] - 0.5 * resid**2 / var
    w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    cond = (1.0 - t) * resid / var
    out = np.sum(w * cond, axis=1)
    return out if np.ndim(nu) else float(out[0])


def noise_posterior_mean(mix: Mixture1D, scale: float, x) -> np.ndarray | float:
    """E[Z | Z + scale * M = x] with M ~ mix.

    Per mode the observation is N(scale*r_i, 1 + scale^2 width^2) and the
    conditional mean of Z is (x - scale*r_i) / (1 + scale^2 width^2).
    Tends to x as scale -> 0 and to 0 as scale -> infinity.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    locs = np.asarray(mix.locations)
    var = 1.0 + (scale * mix.width) ** 2
    resid = x_arr[:, None] - scale * locs[None, :]
    logw = np.log(mix.weights)[None, :] - 0.5 * resid**2 / var
    w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    out = np.sum(w * resid / var, axis=1)
    return out if np.ndim(x) else float(out[0])


@dataclass
class ReducedEnsemble:
    """Scalar trajectory ensemble with terminal mode assignments."""

    grid: np.ndarray
    nu0: np.ndarray
    nu_final: np.ndarray
    mode_index: np.ndarray
    mode_fractions: np.ndarray
    seed: int


def integrate_reduced(
    mix: Mixture1D,
    schedule: TimeSchedule,
    K: int,
    steps: int,
    seed: int,
    eps: float | str = "auto",
) -> ReducedEnsemble:
    """Integrate K scalar trajectories of the reduced ODE with RK4.

    Integration starts at a small eps > 0 (the 1/tau drift factor is
    singular at the origin) from the interpolant law at eps.  The default
    "auto" caps eps so that tau(eps) * max|r_i| <= 0.05: drawing the start
    from the exact law is only legitimate while that law is still
    indistinguishable from the base noise, otherwise the draw would hand
    the integrator mode information the schedule under test never
    resolved.  Records nearest-location mode fractions at the end.
    """
    if steps < 10:
        raise ValueError(f"steps must be >= 10, got {steps}")
    t0, t1 = schedule.t_min, schedule.t_max
    span = t1 - t0
    if eps == "auto":
        eps_t = t0 + span / steps
        rmax = max(abs(r) for r in mix.locations)
        if rmax > 0:
            # invert the piecewise-linear tau at the information-free level
            tau_cap = 0.05 / rmax
            t_cap = float(np.interp(tau_cap, schedule.tau_knots, schedule.t_knots))
            eps_t = min(eps_t, max(t_cap, t0 + 1e-9 * span))
    else:
        eps_t = t0 + float(eps)
    grid = np.empty(steps)
    grid[0] = eps_t
    grid[1:] = np.linspace(t0 + span / steps, t1, steps - 1)
    if grid[1] <= grid[0]:
        grid = np.linspace(eps_t, t1, steps)
    eps = eps_t

    rng = stream(seed, "reduced_init")
    tau_eps = schedule.tau(eps)
    z = rng.standard_normal(K)
    m = mix.sample(K, rng)
    nu = (1.0 - tau_eps) * z + tau_eps * m
    nu0 = nu.copy()

    def rate(t: float, v: np.ndarray) -> np.ndarray:
        tau = schedule.tau(t)
        tau_dot = schedule.tau_dot(t)
        return (tau_dot / tau) * (v - reduced_denoiser_1d(mix, tau, v))

    for i in range(steps - 1):
        h = float(grid[i + 1] - grid[i])
        t = float(grid[i])
        k1 = rate(t, nu)
        k2 = rate(t + 0.5 * h, nu + 0.5 * h * k1)
        k3 = rate(t + 0.5 * h, nu + 0.5 * h * k2)
        k4 = rate(t + h, nu + h * k3)
        nu = nu + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(nu)):
            raise FloatingPointError(f"non-finite reduced state at t={grid[i + 1]:.6g}")

    modes = mix.nearest_mode(nu)
    fracs = np.bincount(modes, minlength=len(mix.weights)) / K
    return ReducedEnsemble(
        grid=grid, nu0=nu0, nu_final=nu, mode_index=modes, mode_fractions=fracs, seed=seed
    )
