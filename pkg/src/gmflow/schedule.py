"""Time dilation maps and interpolant coefficients.

The interpolant is x_t = alpha_t x0 + beta_t x1 with alpha = 1 - tau(t),
beta = tau(t).  Three piecewise-linear dilations are provided:

  identity          tau(t) = t on [0, 1]
  two_mode_dilated  tau(0)=0, tau(1)=kappa/sqrt(d), tau(2)=1 on [0, 2];
                    the stretched first leg holds the mode-splitting window
                    (which shrinks like 1/sqrt(d) in undilated time) at
                    unit length for every d
  multi_mode        one stretched leg per distinct mode norm |r_i| on the
                    uniform subdivision of [0, 1] into m+1 pieces, largest
                    norm first, then a final leg to tau(1)=1

All maps are continuous and strictly increasing; tau_dot returns the
right-hand slope at knots (ODE steppers evaluate forward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TimeSchedule",
    "InterpolantCoeffs",
    "identity_schedule",
    "two_mode_schedule",
    "multi_mode_schedule",
    "tau_two_mode",
    "tau_multi_mode",
    "coeffs_at",
]


@dataclass(frozen=True)
class InterpolantCoeffs:
    """alpha, beta and their time derivatives at one query time."""

    alpha: float
    beta: float
    alpha_dot: float
    beta_dot: float


@dataclass(frozen=True)
class TimeSchedule:
    """Piecewise-linear dilation tau with knot representation.

    t_knots/tau_knots list the breakpoints including both endpoints;
    slopes[j] is the slope on [t_knots[j], t_knots[j+1]].
    """

    kind: str
    domain: tuple
    t_knots: np.ndarray
    tau_knots: np.ndarray
    slopes: np.ndarray
    kappa: float = 0.0
    d: int = 0
    norms: tuple = field(default=())

    @property
    def t_min(self) -> float:
        return self.domain[0]

    @property
    def t_max(self) -> float:
        return self.domain[1]

    def _check_domain(self, t: float) -> None:
        if not (self.t_min - 1e-12 <= t <= self.t_max + 1e-12):
            raise ValueError(f"t={t} outside schedule domain {self.domain}")

    def tau(self, t: float) -> float:
        self._check_domain(t)
        if t >= self.t_max - 1e-15:
            return float(self.tau_knots[-1])
        j = int(np.searchsorted(self.t_knots, t, side="right")) - 1
        j = min(max(j, 0), len(self.slopes) - 1)
        return float(self.tau_knots[j] + self.slopes[j] * (t - self.t_knots[j]))

    def tau_dot(self, t: float) -> float:
        """Right-hand slope (left-hand at the domain end)."""
        self._check_domain(t)
        if t >= self.t_max - 1e-15:
            return float(self.slopes[-1])
        j = int(np.searchsorted(self.t_knots, t, side="right")) - 1
        j = min(max(j, 0), len(self.slopes) - 1)
        return float(self.slopes[j])

    def to_config(self) -> dict:
        cfg = {"kind": self.kind}
        if self.kind == "two_mode_dilated":
            cfg.update(kappa=self.kappa, d=self.d)
        elif self.kind == "multi_mode":
            cfg.update(kappa=self.kappa, norms=list(self.norms))
        return cfg

    @staticmethod
    def from_config(cfg: dict) -> "TimeSchedule":
        kind = cfg.get("kind")
        if kind == "identity":
            return identity_schedule()
        if kind == "two_mode_dilated":
            return two_mode_schedule(kappa=float(cfg["kappa"]), d=int(cfg["d"]))
        if kind == "multi_mode":
            return multi_mode_schedule(kappa=float(cfg["kappa"]), norms=cfg["norms"])
        raise ValueError(f"unknown schedule kind {kind!r}")


def identity_schedule() -> TimeSchedule:
    return TimeSchedule(
        kind="identity",
        domain=(0.0, 1.0),
        t_knots=np.array([0.0, 1.0]),
        tau_knots=np.array([0.0, 1.0]),
        slopes=np.array([1.0]),
    )


def two_mode_schedule(kappa: float, d: int) -> TimeSchedule:
    """tau with slope kappa/sqrt(d) on [0,1] and 1 - kappa/sqrt(d) on [1,2]."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if kappa >= math.sqrt(d):
        raise ValueError(f"need kappa < sqrt(d); got kappa={kappa}, d={d}")
    eps = kappa / math.sqrt(d)
    return TimeSchedule(
        kind="two_mode_dilated",
        domain=(0.0, 2.0),
        t_knots=np.array([0.0, 1.0, 2.0]),
        tau_knots=np.array([0.0, eps, 1.0]),
        slopes=np.array([eps, 1.0 - eps]),
        kappa=float(kappa),
        d=int(d),
    )


def multi_mode_schedule(kappa: float, norms: Sequence[float]) -> TimeSchedule:
    """One stretched leg per distinct norm, descending, then a leg to 1.

    With m distinct norms |r_1| <= ... <= |r_m| and n = m+1, piece
    j in {1..m} covers [(j-1)/n, j/n] at slope kappa*n/|r_{m-j+1}| and the
    final piece runs linearly to tau(1) = 1.  Consecutive equal norms are
    collapsed into one piece (their windows coincide) and the knot grid is
    renormalized.  Requires kappa * sum_i 1/|r_i| < 1.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    raw = [abs(float(r)) for r in norms]
    if len(raw) == 0:
        raise ValueError("norms must be non-empty")
    if any(r <= 0 for r in raw):
        raise ValueError("norms must be nonzero")
    if any(raw[i] > raw[i + 1] for i in range(len(raw) - 1)):
        raise ValueError(f"norms must be ascending, got {norms}")
    uniq: list[float] = []
    for r in raw:
        if not uniq or r != uniq[-1]:
            uniq.append(r)
    total = kappa * sum(1.0 / r for r in uniq)
    if total >= 1.0:
        raise ValueError(
            f"kappa * sum(1/|r_i|) = {total} must be < 1 for a valid dilation"
        )
    m = len(uniq)
    n = m + 1
    t_knots = [j / n for j in range(n + 1)]
    tau_knots = [0.0]
    for j in range(1, m + 1):
        tau_knots.append(tau_knots[-1] + kappa / uniq[m - j])
    tau_knots.append(1.0)
    slopes = [
        (tau_knots[j + 1] - tau_knots[j]) * n for j in range(n)
    ]  # each piece has width 1/n
    return TimeSchedule(
        kind="multi_mode",
        domain=(0.0, 1.0),
        t_knots=np.array(t_knots),
        tau_knots=np.array(tau_knots),
        slopes=np.array(slopes),
        kappa=float(kappa),
        norms=tuple(uniq),
    )


def tau_two_mode(t: float, kappa: float, d: int) -> tuple[float, float]:
    """(tau, tau_dot) of the two-leg dilation at time t in [0, 2]."""
    sched = two_mode_schedule(kappa, d)
    return sched.tau(t), sched.tau_dot(t)


def tau_multi_mode(t: float, kappa: float, norms: Sequence[float]) -> tuple[float, float]:
    """(tau, tau_dot) of the multi-leg dilation at time t in [0, 1]."""
    sched = multi_mode_schedule(kappa, norms)
    return sched.tau(t), sched.tau_dot(t)


def coeffs_at(schedule: TimeSchedule, t: float) -> InterpolantCoeffs:
    """Interpolant coefficients alpha = 1 - tau, beta = tau at time t."""
    tau = schedule.tau(t)
    tau_dot = schedule.tau_dot(t)
    return InterpolantCoeffs(
        alpha=1.0 - tau, beta=tau, alpha_dot=-tau_dot, beta_dot=tau_dot
    )
