"""Two-mode Gaussian mixture in d dimensions.

Data model: x1 = s*mu + sigma*z with s = +1 with probability p, else -1,
z ~ N(0, Id), and ||mu||^2 = d. The tilt h = atanh(2p-1) is the log-odds
of the two modes and appears in the closed-form denoiser.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import stream

__all__ = [
    "MixtureParams",
    "Dataset",
    "ProjectionStats",
    "make_mixture",
    "sample_dataset",
    "sample_noise",
    "attach_paired_noise",
    "projection_stats",
]

_NORM_RTOL = 1e-8


@dataclass(frozen=True)
class MixtureParams:
    """Parameters of p*N(mu, sigma^2 Id) + (1-p)*N(-mu, sigma^2 Id)."""

    d: int
    p: float
    sigma: float
    mu: np.ndarray
    h: float

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must be in (0,1), got {self.p}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.shape != (self.d,):
            raise ValueError(f"mu must have shape ({self.d},), got {mu.shape}")
        nrm2 = float(mu @ mu)
        if abs(nrm2 - self.d) > 1e-10 * self.d:
            raise ValueError(f"||mu||^2 = {nrm2} differs from d = {self.d}")
        object.__setattr__(self, "mu", mu)


@dataclass
class Dataset:
    """n mixture samples with their latent signs and within-mode noise.

    x1[i] = s[i]*mu + sigma*z[i] holds bitwise for the stored fields.
    eta = sigma * sum_i z[i].  x0 (one base-noise draw paired to each
    sample) and xi = sum_i s[i]*x0[i] are only present after
    `attach_paired_noise`.
    """

    params: MixtureParams
    n: int
    x1: np.ndarray  # (n, d)
    s: np.ndarray  # (n,) in {+1, -1}
    z: np.ndarray  # (n, d)
    eta: np.ndarray  # (d,)
    x0: Optional[np.ndarray] = None  # (n, d) paired base noise
    xi: Optional[np.ndarray] = None  # (d,)
    sample_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.n)

    @property
    def has_paired_noise(self) -> bool:
        return self.x0 is not None

    def permuted(self, perm: np.ndarray) -> "Dataset":
        """Same samples in a different storage order (ids travel along)."""
        return Dataset(
            params=self.params,
            n=self.n,
            x1=self.x1[perm],
            s=self.s[perm],
            z=self.z[perm],
            eta=self.eta,
            x0=None if self.x0 is None else self.x0[perm],
            xi=self.xi,
            sample_ids=self.sample_ids[perm],
        )


@dataclass(frozen=True)
class ProjectionStats:
    """Mode-direction projections of a trajectory ensemble at one time.

    M[k] = mu.X_k/d, nu[k] = mu.X_k/sqrt(d); M*sqrt(d) == nu exactly.
    orth_variance is the per-coordinate mean square of X - (mu.X/d) mu,
    pooled over the d-1 directions orthogonal to mu and over trajectories
    (the orthogonal law is centered, so no mean is subtracted).
    """

    t: float
    M: np.ndarray
    nu: np.ndarray
    orth_variance: float


def make_mixture(
    d: int,
    p: float,
    sigma: float,
    mu_style: str = "all_ones",
    mu: Optional[np.ndarray] = None,
    seed: int = 0,
    allow_degenerate_sigma: bool = False,
) -> MixtureParams:
    """Build mixture parameters with h = atanh(2p-1).

    mu_style is one of "all_ones", "random_signs", "explicit".  The explicit
    vector must satisfy ||mu||^2 = d to relative tolerance 1e-8; sign vectors
    satisfy it exactly.  sigma = 0 is rejected unless allow_degenerate_sigma
    (point-mass modes, for tests only).
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0,1), got {p}")
    if sigma <= 0.0 and not (allow_degenerate_sigma and sigma == 0.0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    if mu_style == "all_ones":
        mu_vec = np.ones(d)
    elif mu_style == "random_signs":
        mu_vec = stream(seed, "mu_signs").choice([-1.0, 1.0], size=d)
    elif mu_style == "explicit":
        if mu is None:
            raise ValueError("mu_style='explicit' requires mu")
        mu_vec = np.asarray(mu, dtype=np.float64)
        nrm2 = float(mu_vec @ mu_vec)
        if abs(nrm2 - d) > _NORM_RTOL * d:
            raise ValueError(f"explicit mu has ||mu||^2 = {nrm2}, need {d}")
    else:
        raise ValueError(f"unknown mu_style {mu_style!r}")
    h = math.atanh(2.0 * p - 1.0)
    return MixtureParams(d=d, p=p, sigma=sigma, mu=mu_vec, h=h)


def sample_dataset(params: MixtureParams, n: int, seed: int) -> Dataset:
    """Draw n i.i.d. samples; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rs = stream(seed, "dataset", "signs")
    rz = stream(seed, "dataset", "z")
    s = np.where(rs.random(n) < params.p, 1.0, -1.0)
    z = rz.standard_normal((n, params.d))
    x1 = s[:, None] * params.mu[None, :] + params.sigma * z
    eta = params.sigma * z.sum(axis=0)
    return Dataset(params=params, n=n, x1=x1, s=s, z=z, eta=eta)


def attach_paired_noise(dataset: Dataset, seed: int) -> Dataset:
    """Pair one base-noise draw x0 with each sample and compute xi."""
    rng = stream(seed, "dataset", "paired_x0")
    x0 = rng.standard_normal((dataset.n, dataset.params.d))
    xi = (dataset.s[:, None] * x0).sum(axis=0)
    return Dataset(
        params=dataset.params,
        n=dataset.n,
        x1=dataset.x1,
        s=dataset.s,
        z=dataset.z,
        eta=dataset.eta,
        x0=x0,
        xi=xi,
        sample_ids=dataset.sample_ids,
    )


def sample_noise(d: int, count: int, seed: int, label: object = "noise") -> np.ndarray:
    """count i.i.d. N(0, Id_d) vectors; deterministic for a fixed seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return stream(seed, label).standard_normal((count, d))


def projection_states(params: MixtureParams, states: np.ndarray, t: float) -> ProjectionStats:
    """Projection statistics of a (K, d) state block."""
    d = params.d
    states = np.atleast_2d(states)
    M = states @ params.mu / d
    nu = M * math.sqrt(d)  # nu == M * sqrt(d) bitwise by construction
    # ||X - M mu||^2 = ||X||^2 - d M^2; pooled over K(d-1) coordinates.
    sq = np.einsum("kd,kd->k", states, states) - d * M**2
    orth_variance = float(sq.sum() / (states.shape[0] * (d - 1)))
    return ProjectionStats(t=t, M=M, nu=nu, orth_variance=orth_variance)


def projection_stats(params: MixtureParams, ensemble, t: float) -> ProjectionStats:
    """Projection statistics of `ensemble` at grid time t.

    The ensemble must hold full states at t (a checkpoint); otherwise the
    per-time summaries recorded during integration are used.
    """
    idx = ensemble.grid_index(t)
    states = ensemble.states_at(t)
    if states is not None:
        return projection_states(params, states, t)
    return ProjectionStats(
        t=t,
        M=ensemble.M[idx].copy(),
        nu=ensemble.nu[idx].copy(),
        orth_variance=float(ensemble.orth_var[idx]),
    )
