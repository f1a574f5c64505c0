"""Two-layer denoising autoencoder with a trainable skip connection.

    f_theta(x) = c x + u tanh(w.x / sqrt(d) + b),   theta = (c, u, w, b)

One independent parameter set is trained per time slice by full-batch
adaptive-moment gradient descent on

    sum_pairs ||f_theta(x_t) - x1||^2 + (lam/2)||u||^2 + (ell/2)||w||^2.

Noise policies: "fresh_per_epoch" redraws the base noise x0 every epoch
(the infinite-noise-sample regime the asymptotic theory assumes);
"fixed_k" trains on k quenched noise draws per sample (k = 1 reuses the
dataset's paired noise when present, so xi-dependent quantities refer to
the same draws training saw).

Noise is always attached to sample ids in id-sorted order, so permuting
dataset storage order leaves every trained parameter bitwise unchanged.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .mixture import Dataset
from .rng import stream
from .schedule import TimeSchedule, coeffs_at

__all__ = [
    "SliceParams",
    "DenoiserSchedule",
    "TrainConfig",
    "dae_forward",
    "empirical_loss",
    "loss_gradient",
    "train_slice",
    "train_all",
    "learned_velocity",
    "learned_field",
    "slice_seed_labels",
    "save_schedule",
    "load_schedule",
]

_ALPHA_FLOOR = 1e-8


@dataclass
class SliceParams:
    """Autoencoder parameters at one time slice."""

    c: float
    b: float
    u: np.ndarray
    w: np.ndarray
    t: float

    @property
    def d(self) -> int:
        return len(self.u)

    def copy(self) -> "SliceParams":
        return SliceParams(c=self.c, b=self.b, u=self.u.copy(), w=self.w.copy(), t=self.t)


@dataclass
class DenoiserSchedule:
    """One trained slice per grid time (grid matches the training grid)."""

    grid: np.ndarray
    slices: list

    def __post_init__(self):
        if len(self.grid) != len(self.slices):
            raise ValueError("grid and slices must have equal length")

    @property
    def d(self) -> int:
        return self.slices[0].d

    def slice_at_or_below(self, t: float) -> SliceParams:
        """Piecewise-constant lookup: slice at the last grid time <= t.

        Times within 1e-7 below a grid point snap to it, so integrator
        stage times nudged just inside a step still see that step's
        endpoint slice.
        """
        g = self.grid
        if t < g[0] - 1e-7 or t > g[-1] + 1e-7:
            raise ValueError(f"t={t} outside trained grid [{g[0]}, {g[-1]}]")
        idx = int(np.searchsorted(g, t + 1e-7, side="right")) - 1
        return self.slices[max(idx, 0)]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and regularization settings for slice training.

    noise_pool bounds the number of distinct base-noise draws held per
    sample under fresh_per_epoch; epochs beyond the pool cycle through it
    with per-epoch sign refreshes (z and -z are identically distributed),
    which keeps the long-run gradient average close to the exact noise
    expectation at a fraction of the draw cost.  noise_pool = 0 (default)
    sizes the pool automatically: at least 16*d/n rows so the pooled pairs
    cannot be interpolated in d dimensions (pool memorization would bias
    the trained overlaps), within a ~0.5 GB memory cap.  Set an explicit
    noise_pool >= epochs for strictly i.i.d. redraws.
    """

    epochs: int = 5000
    step_size: float = 1e-2
    moment_decays: tuple = (0.9, 0.999)
    lam: float = 0.1
    ell: float = 0.1
    noise_policy: str = "fresh_per_epoch"  # or "fixed_k"
    noise_k: int = 1
    noise_pool: int = 0  # 0 = auto
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        b1, b2 = self.moment_decays
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.lam < 0 or self.ell < 0:
            raise ValueError("regularization strengths must be nonnegative")
        if self.noise_policy not in ("fresh_per_epoch", "fixed_k"):
            raise ValueError(f"unknown noise_policy {self.noise_policy!r}")
        if self.noise_policy == "fixed_k" and self.noise_k < 1:
            raise ValueError("fixed_k requires noise_k >= 1")
        if self.noise_pool < 0:
            raise ValueError("noise_pool must be >= 0")


def dae_forward(theta: SliceParams, x: np.ndarray) -> np.ndarray:
    """c x + u tanh(w.x/sqrt(d) + b); x is (d,) or (n, d)."""
    x = np.asarray(x)
    if x.shape[-1] != theta.d:
        raise ValueError(f"x has dimension {x.shape[-1]}, expected {theta.d}")
    pre = x @ theta.w / math.sqrt(theta.d) + theta.b
    return theta.c * x + np.multiply.outer(np.tanh(pre), theta.u)


def empirical_loss(
    theta: SliceParams, batch: tuple, lam: float, ell: float
) -> float:
    """sum ||f(x_t) - x1||^2 + (lam/2)||u||^2 + (ell/2)||w||^2."""
    x_t, x_1 = batch
    x_t = np.atleast_2d(x_t)
    x_1 = np.atleast_2d(x_1)
    if x_t.shape != x_1.shape or x_t.shape[0] == 0:
        raise ValueError("batch must hold equal-shape, nonempty x_t and x_1")
    resid = dae_forward(theta, x_t) - x_1
    return float(
        np.einsum("nd,nd->", resid, resid)
        + 0.5 * lam * theta.u @ theta.u
        + 0.5 * ell * theta.w @ theta.w
    )


def loss_gradient(theta: SliceParams, batch: tuple, lam: float, ell: float) -> dict:
    """Exact analytic gradient of empirical_loss over (c, b, u, w)."""
    x_t, x_1 = batch
    x_t = np.atleast_2d(x_t)
    x_1 = np.atleast_2d(x_1)
    if x_t.shape != x_1.shape or x_t.shape[0] == 0:
        raise ValueError("batch must hold equal-shape, nonempty x_t and x_1")
    sqrt_d = math.sqrt(theta.d)
    pre = x_t @ theta.w / sqrt_d + theta.b
    phi = np.tanh(pre)
    resid = theta.c * x_t + phi[:, None] * theta.u[None, :] - x_1
    g_c = 2.0 * float(np.einsum("nd,nd->", resid, x_t))
    g_u = 2.0 * (phi @ resid) + lam * theta.u
    dpre = 2.0 * (resid @ theta.u) * (1.0 - phi * phi)
    g_w = (dpre @ x_t) / sqrt_d + ell * theta.w
    g_b = float(dpre.sum())
    return {"c": g_c, "b": g_b, "u": g_u, "w": g_w}


def slice_seed_labels(base_seed: int, slice_index: int) -> tuple:
    """Label path for the RNG streams of one slice (shared by train_all)."""
    return (base_seed, "slice", slice_index)


def _init_params(d: int, t: float, seed_labels: tuple) -> SliceParams:
    # Overlaps start at O(1/sqrt(d)), inside the theory's basin.
    rng = stream(*seed_labels, "init")
    scale = 1.0 / math.sqrt(d)
    return SliceParams(
        c=0.0,
        b=0.0,
        u=rng.standard_normal(d) * scale,
        w=rng.standard_normal(d) * scale,
        t=t,
    )


def train_slice(
    dataset: Dataset,
    schedule: TimeSchedule,
    t: float,
    config: TrainConfig,
    slice_index: int = 0,
    return_history: bool = False,
    init: Optional[SliceParams] = None,
):
    """Train one slice with full-batch Adam; pure given (dataset, config).

    The batch is processed in sample-id order internally, so the result is
    independent of dataset storage order.  `init` warm-starts from given
    parameters instead of the default random initialization.
    """
    co = coeffs_at(schedule, t)
    alpha, beta = co.alpha, co.beta
    d, n = dataset.params.d, dataset.n

    order = np.argsort(dataset.sample_ids, kind="stable")
    x1 = np.ascontiguousarray(dataset.x1[order])

    labels = slice_seed_labels(config.seed, slice_index)
    theta = init.copy() if init is not None else _init_params(d, t, labels)
    theta = SliceParams(c=theta.c, b=theta.b, u=theta.u.copy(), w=theta.w.copy(), t=float(t))

    if config.noise_policy == "fixed_k":
        if config.noise_k == 1 and dataset.has_paired_noise:
            x0_fixed = np.ascontiguousarray(dataset.x0[order])[None, :, :]
        else:
            rng = stream(*labels, "fixed_noise")
            x0_fixed = rng.standard_normal((config.noise_k, n, d))
        x1_rep = np.tile(x1, (config.noise_k, 1))
        x0_flat = x0_fixed.reshape(config.noise_k * n, d)
        pool = offs = None
    else:
        noise_rng = stream(*labels, "fresh_noise")
        x1_rep = x1
        x0_flat = None
        if config.noise_pool == 0:
            mem_cap = max(1, int(6.4e7 / (n * d)))
            P = min(config.epochs, max(256, -(-16 * d // n), 1), mem_cap)
        else:
            P = min(config.epochs, config.noise_pool)
        P = max(P, 1)
        pool = noise_rng.standard_normal((P, n, d))
        offs = noise_rng.integers(0, P, size=n)
        sample_idx = np.arange(n)

    beta_x1 = beta * x1_rep
    sqrt_d = math.sqrt(d)
    b1, b2 = config.moment_decays
    lr, eps = config.step_size, config.eps
    lam, ell = config.lam, config.ell

    c, b = theta.c, theta.b
    u, w = theta.u, theta.w
    m_c = v_c = m_b = v_b = 0.0
    m_u = np.zeros(d)
    v_u = np.zeros(d)
    m_w = np.zeros(d)
    v_w = np.zeros(d)

    losses = np.empty(config.epochs) if return_history else None
    nb = x1_rep.shape[0]
    x_t = np.empty((nb, d))
    resid = np.empty((nb, d))

    for epoch in range(config.epochs):
        if config.noise_policy == "fresh_per_epoch":
            rows = (epoch + offs) % len(pool)
            np.take(pool.reshape(-1, d), rows * n + sample_idx, axis=0, out=x_t)
            signs = 1.0 - 2.0 * noise_rng.integers(0, 2, size=n).astype(np.float64)
            x_t *= (alpha * signs)[:, None]
        else:
            np.multiply(x0_flat, alpha, out=x_t)
        x_t += beta_x1

        pre = x_t @ w
        pre /= sqrt_d
        pre += b
        phi = np.tanh(pre)
        np.multiply(x_t, c, out=resid)
        resid -= x1_rep
        resid += phi[:, None] * u[None, :]

        g_c = 2.0 * np.einsum("nd,nd->", resid, x_t)
        g_u = 2.0 * (phi @ resid)
        g_u += lam * u
        dpre = 2.0 * (resid @ u)
        dpre *= 1.0 - phi * phi
        g_w = dpre @ x_t
        g_w /= sqrt_d
        g_w += ell * w
        g_b = dpre.sum()

        if return_history:
            losses[epoch] = (
                np.einsum("nd,nd->", resid, resid)
                + 0.5 * lam * u @ u
                + 0.5 * ell * w @ w
            )

        step = epoch + 1
        corr1 = 1.0 - b1**step
        corr2 = 1.0 - b2**step
        m_c = b1 * m_c + (1 - b1) * g_c
        v_c = b2 * v_c + (1 - b2) * g_c * g_c
        c -= lr * (m_c / corr1) / (math.sqrt(v_c / corr2) + eps)
        m_b = b1 * m_b + (1 - b1) * g_b
        v_b = b2 * v_b + (1 - b2) * g_b * g_b
        b -= lr * (m_b / corr1) / (math.sqrt(v_b / corr2) + eps)
        m_u *= b1
        m_u += (1 - b1) * g_u
        v_u *= b2
        v_u += (1 - b2) * g_u * g_u
        u -= lr * (m_u / corr1) / (np.sqrt(v_u / corr2) + eps)
        m_w *= b1
        m_w += (1 - b1) * g_w
        v_w *= b2
        v_w += (1 - b2) * g_w * g_w
        w -= lr * (m_w / corr1) / (np.sqrt(v_w / corr2) + eps)

        if not (math.isfinite(c) and math.isfinite(b)):
            raise FloatingPointError(
                f"training diverged at slice t={t:.6g}, epoch {epoch}"
            )

    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
        raise FloatingPointError(f"training diverged at slice t={t:.6g}")
    theta = SliceParams(c=float(c), b=float(b), u=u, w=w, t=float(t))
    if return_history:
        return theta, losses
    return theta


def _train_slice_task(args):
    dataset, schedule, t, config, idx = args
    try:
        return idx, train_slice(dataset, schedule, t, config, slice_index=idx)
    except FloatingPointError as exc:
        raise FloatingPointError(f"slice {idx} (t={t:.6g}): {exc}") from exc


def train_all(
    dataset: Dataset,
    schedule: TimeSchedule,
    grid: Sequence[float],
    config: TrainConfig,
    workers: int = 1,
) -> DenoiserSchedule:
    """Independent train_slice per grid time; slices may run in parallel.

    Per-slice RNG streams are keyed by (config.seed, slice index), so the
    result is identical for any worker count or evaluation order.
    """
    grid = np.asarray(grid, dtype=np.float64)
    tasks = [(dataset, schedule, float(t), config, i) for i, t in enumerate(grid)]
    slices: list = [None] * len(grid)
    if workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, theta in pool.map(_train_slice_task, tasks, chunksize=1):
                slices[idx] = theta
    else:
        for task in tasks:
            idx, theta = _train_slice_task(task)
            slices[idx] = theta
    return DenoiserSchedule(grid=grid, slices=slices)


def learned_velocity(
    sched: DenoiserSchedule, schedule: TimeSchedule, t: float, x: np.ndarray
) -> np.ndarray:
    """Drift built from the trained denoiser at the slice at-or-below t.

    For alpha > 0:  (beta_dot - (alpha_dot/alpha) beta) f(x) +
    (alpha_dot/alpha) x.  At the terminal point (alpha = 0) the denoiser is
    the identity in the would-be-exact limit and the singular part carries a
    vanishing prefactor there, leaving beta_dot * f(x).
    """
    theta = sched.slice_at_or_below(t)
    co = coeffs_at(schedule, t)
    f = dae_forward(theta, x)
    if co.alpha > _ALPHA_FLOOR:
        ratio = co.alpha_dot / co.alpha
        return (co.beta_dot - ratio * co.beta) * f + ratio * np.asarray(x)
    return co.beta_dot * f


def learned_field(sched: DenoiserSchedule, schedule: TimeSchedule) -> Callable:
    """Velocity closure field(t, X) for integrate_ensemble."""

    def field_fn(t: float, x: np.ndarray) -> np.ndarray:
        return learned_velocity(sched, schedule, t, x)

    return field_fn


_CKPT_VERSION = 1


def schedule_config_hash(config: TrainConfig) -> str:
    payload = json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_schedule(path, sched: DenoiserSchedule, config: Optional[TrainConfig] = None):
    """Versioned checkpoint: header (d, grid, config hash) + per-slice arrays."""
    meta = {
        "version": _CKPT_VERSION,
        "d": sched.d,
        "config_hash": schedule_config_hash(config) if config else "",
    }
    np.savez(
        path,
        meta=json.dumps(meta, sort_keys=True),
        grid=sched.grid,
        t=np.array([s.t for s in sched.slices]),
        c=np.array([s.c for s in sched.slices]),
        b=np.array([s.b for s in sched.slices]),
        u=np.stack([s.u for s in sched.slices]),
        w=np.stack([s.w for s in sched.slices]),
    )


def load_schedule(path) -> DenoiserSchedule:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    if meta.get("version") != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    slices = [
        SliceParams(
            c=float(data["c"][i]),
            b=float(data["b"][i]),
            u=data["u"][i].copy(),
            w=data["w"][i].copy(),
            t=float(data["t"][i]),
        )
        for i in range(len(data["grid"]))
    ]
    return DenoiserSchedule(grid=data["grid"].copy(), slices=slices)
