"""Closed-form flow for the two-mode mixture and fixed-step ODE integration.

The denoiser E[x1 | x_t = x] and the probability-flow velocity field are
available in closed form.  The velocity is implemented in the combined form

    b(x) = [(a*a' + s^2 b*b') x + a(a b' - a' b) mu tanh(h + b mu.x / D)] / D

with D = a^2 + s^2 b^2 (a = alpha, b = beta, s = sigma), which stays finite
as alpha -> 0, unlike the skip/denoiser decomposition.

Ensembles of trajectories are integrated with classical 4-stage Runge-Kutta
at fixed steps on the supplied grid; mode-projection summaries (M, nu,
orthogonal variance) are recorded at every grid time, full states only at
requested checkpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .mixture import MixtureParams, ProjectionStats, projection_states
from .rng import stream
from .schedule import InterpolantCoeffs, TimeSchedule, coeffs_at

__all__ = [
    "TrajectoryEnsemble",
    "exact_denoiser",
    "exact_velocity",
    "exact_field",
    "rk4_step",
    "integrate_ensemble",
]

_GRID_ATOL = 1e-9


@dataclass
class TrajectoryEnsemble:
    """K trajectories with per-grid-time projection summaries.

    M, nu have shape (T, K); orth_var has shape (T,).  Full (K, d) states
    are kept only at checkpoint times (always including the endpoints).
    """

    grid: np.ndarray
    d: int
    K: int
    seed: int
    M: np.ndarray
    nu: np.ndarray
    orth_var: np.ndarray
    checkpoints: dict = field(default_factory=dict)  # grid index -> (K, d)

    def grid_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.grid - t)))
        if abs(self.grid[idx] - t) > _GRID_ATOL:
            raise ValueError(f"time {t} not on ensemble grid")
        return idx

    def states_at(self, t: float) -> Optional[np.ndarray]:
        idx = self.grid_index(t)
        return self.checkpoints.get(idx)

    @property
    def terminal_states(self) -> np.ndarray:
        return self.checkpoints[len(self.grid) - 1]

    def projection_rows(self):
        """(traj_id, t, M, nu) rows for CSV export."""
        for i, t in enumerate(self.grid):
            for k in range(self.K):
                yield k, float(t), float(self.M[i, k]), float(self.nu[i, k])


def exact_denoiser(
    params: MixtureParams, coeffs: InterpolantCoeffs, x: np.ndarray
) -> np.ndarray:
    """E[x1 | x_t = x] for the two-mode mixture; x is (d,) or (K, d)."""
    a, b = coeffs.alpha, coeffs.beta
    denom = a * a + params.sigma**2 * b * b
    if denom <= 0.0:
        raise ValueError("alpha and beta cannot both vanish")
    proj = np.asarray(x) @ params.mu
    gate = np.tanh(b * proj / denom + params.h)
    skip = (b * params.sigma**2 / denom) * np.asarray(x)
    amp = a * a / denom
    return skip + amp * np.multiply.outer(gate, params.mu)


def exact_velocity(
    params: MixtureParams, schedule: TimeSchedule, t: float, x: np.ndarray
) -> np.ndarray:
    """Probability-flow drift at time t, finite for all t in the domain."""
    co = coeffs_at(schedule, t)
    a, b = co.alpha, co.beta
    ad, bd = co.alpha_dot, co.beta_dot
    denom = a * a + params.sigma**2 * b * b
    proj = np.asarray(x) @ params.mu
    gate = np.tanh(params.h + b * proj / denom)
    lin = (a * ad + params.sigma**2 * b * bd) / denom
    amp = a * (a * bd - ad * b) / denom
    return lin * np.asarray(x) + amp * np.multiply.outer(gate, params.mu)


def exact_field(params: MixtureParams, schedule: TimeSchedule) -> Callable:
    """Velocity closure field(t, X) for integrate_ensemble."""

    def field_fn(t: float, x: np.ndarray) -> np.ndarray:
        return exact_velocity(params, schedule, t, x)

    return field_fn


_STAGE_NUDGE = 1e-9


def rk4_step(field: Callable, t: float, h: float, x: np.ndarray) -> np.ndarray:
    """One classical Runge-Kutta step of size h (h < 0 steps backward).

    Stage abscissae are nudged strictly inside (t, t+h) so that at grid
    points sitting on schedule knots the one-sided slope of the segment
    being crossed is used; the O(1e-9 h) abscissa shift is far below the
    integration error.
    """
    e = _STAGE_NUDGE * h
    k1 = field(t + e, x)
    k2 = field(t + 0.5 * h, x + (0.5 * h) * k1)
    k3 = field(t + 0.5 * h, x + (0.5 * h) * k2)
    k4 = field(t + h - e, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_ensemble(
    field: Callable,
    d: int,
    K: int,
    grid: Sequence[float],
    seed: int,
    params: Optional[MixtureParams] = None,
    checkpoints: str | Sequence[float] = "endpoints",
    initial: Optional[np.ndarray] = None,
) -> TrajectoryEnsemble:
    """Integrate K trajectories from N(0, Id) across the grid with RK4.

    `params` enables mode-projection summaries at every grid time (pass the
    mixture whose mu defines the projections).  `checkpoints` is "all",
    "endpoints", or an explicit list of grid times at which full states are
    stored.  `initial` overrides the N(0, Id) start (shape (K, d)), e.g. for
    gap experiments sharing initial conditions across fields.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2:
        raise ValueError("grid must hold at least 2 ascending times")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly ascending")
    if initial is None:
        x = stream(seed, "ensemble_init").standard_normal((K, d))
    else:
        x = np.array(initial, dtype=np.float64)
        if x.shape != (K, d):
            raise ValueError(f"initial must have shape ({K}, {d})")

    T = len(grid)
    if checkpoints == "all":
        ckpt_idx = set(range(T))
    elif checkpoints == "endpoints":
        ckpt_idx = {0, T - 1}
    else:
        ckpt_idx = {int(np.argmin(np.abs(grid - t))) for t in checkpoints}
        ckpt_idx |= {0, T - 1}

    ens = TrajectoryEnsemble(
        grid=grid,
        d=d,
        K=K,
        seed=seed,
        M=np.empty((T, K)),
        nu=np.empty((T, K)),
        orth_var=np.empty(T),
    )

    def record(i: int, xs: np.ndarray) -> None:
        if params is not None:
            st = projection_states(params, xs, float(grid[i]))
            ens.M[i] = st.M
            ens.nu[i] = st.nu
            ens.orth_var[i] = st.orth_variance
        else:
            ens.M[i] = np.nan
            ens.nu[i] = np.nan
            ens.orth_var[i] = np.nan
        if i in ckpt_idx:
            ens.checkpoints[i] = xs.copy()

    record(0, x)
    for i in range(T - 1):
        h = float(grid[i + 1] - grid[i])
        x = rk4_step(field, float(grid[i]), h, x)
        if not np.all(np.isfinite(x)):
            bad = np.where(~np.isfinite(x).all(axis=1))[0]
            raise FloatingPointError(
                f"non-finite state at t={grid[i + 1]:.6g} "
                f"(trajectories {bad[:5].tolist()}{'...' if len(bad) > 5 else ''})"
            )
        record(i + 1, x)
    return ens


def dilated_grid(schedule: TimeSchedule, points: int) -> np.ndarray:
    """Uniform grid of `points` times spanning the schedule domain."""
    return np.linspace(schedule.t_min, schedule.t_max, points)


def projection_stats_at(
    params: MixtureParams, ens: TrajectoryEnsemble, t: float
) -> ProjectionStats:
    states = ens.states_at(t)
    if states is not None:
        return projection_states(params, states, t)
    i = ens.grid_index(t)
    return ProjectionStats(
        t=t, M=ens.M[i].copy(), nu=ens.nu[i].copy(), orth_variance=float(ens.orth_var[i])
    )
