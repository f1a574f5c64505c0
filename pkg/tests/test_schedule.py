import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmflow.schedule import (
    TimeSchedule,
    coeffs_at,
    identity_schedule,
    multi_mode_schedule,
    tau_multi_mode,
    tau_two_mode,
    two_mode_schedule,
)


def test_two_mode_endpoints():
    tau0, _ = tau_two_mode(0.0, kappa=4, d=5000)
    assert tau0 == 0.0
    tau2, _ = tau_two_mode(2.0, kappa=4, d=5000)
    assert tau2 == 1.0


def test_two_mode_knee_value():
    tau1, dot1 = tau_two_mode(1.0, kappa=4, d=5000)
    assert tau1 == pytest.approx(4 / math.sqrt(5000), abs=1e-12)
    assert tau1 == pytest.approx(0.0565685, abs=1e-7)
    # right-hand slope at the knot
    assert dot1 == pytest.approx(1 - 4 / math.sqrt(5000), abs=1e-12)


def test_two_mode_midpoint_second_leg():
    tau, dot = tau_two_mode(1.5, kappa=4, d=5000)
    assert tau == pytest.approx(0.0565685 + 0.9434315 * 0.5, abs=1e-7)
    assert tau == pytest.approx(0.5282843, abs=1e-7)


def test_two_mode_domain_and_kappa_checks():
    with pytest.raises(ValueError):
        tau_two_mode(2.5, kappa=4, d=5000)
    with pytest.raises(ValueError):
        tau_two_mode(-0.1, kappa=4, d=5000)
    with pytest.raises(ValueError):
        two_mode_schedule(kappa=80, d=100)  # kappa >= sqrt(d)


def test_multi_mode_endpoint_is_one():
    for norms in [(10.0,), (10.0, 100.0), (3.0, 30.0, 300.0)]:
        tau, _ = tau_multi_mode(1.0, kappa=0.5, norms=norms)
        assert tau == 1.0


def test_multi_mode_worked_values():
    # m=2, |r|=(10,100), kappa=1: tau(1/3) = 3*(1/3)/100, tau(2/3) = 0.01+0.1
    tau13, _ = tau_multi_mode(1 / 3, kappa=1.0, norms=(10, 100))
    assert tau13 == pytest.approx(0.01, abs=1e-12)
    tau23, _ = tau_multi_mode(2 / 3, kappa=1.0, norms=(10, 100))
    assert tau23 == pytest.approx(0.11, abs=1e-12)


def test_multi_mode_single_norm_matches_two_mode_after_remap():
    # one stretched leg at |r| = sqrt(d) equals the two-leg map under t -> 2t
    d = 2500
    kappa = 3.0
    mm = multi_mode_schedule(kappa=kappa, norms=(math.sqrt(d),))
    tm = two_mode_schedule(kappa=kappa, d=d)
    for t in np.linspace(0, 1, 37):
        assert mm.tau(t) == pytest.approx(tm.tau(2 * t), abs=1e-12)


def test_multi_mode_collapses_equal_norms():
    a = multi_mode_schedule(kappa=0.5, norms=(10.0, 10.0, 100.0))
    b = multi_mode_schedule(kappa=0.5, norms=(10.0, 100.0))
    assert a.norms == b.norms
    for t in np.linspace(0, 1, 23):
        assert a.tau(t) == pytest.approx(b.tau(t), abs=1e-14)


def test_multi_mode_validation():
    with pytest.raises(ValueError):
        multi_mode_schedule(kappa=1.0, norms=(100.0, 10.0))  # not ascending
    with pytest.raises(ValueError):
        multi_mode_schedule(kappa=5.0, norms=(1.0, 2.0))  # kappa sum too large
    with pytest.raises(ValueError):
        multi_mode_schedule(kappa=1.0, norms=())


def test_coeffs_identity():
    co = coeffs_at(identity_schedule(), 0.3)
    assert (co.alpha, co.beta) == (0.7, 0.3)
    assert (co.alpha_dot, co.beta_dot) == (-1.0, 1.0)


def test_coeffs_two_mode_endpoint():
    co = coeffs_at(two_mode_schedule(kappa=4, d=5000), 2.0)
    assert (co.alpha, co.beta) == (0.0, 1.0)


def test_coeffs_two_mode_first_leg_value():
    co = coeffs_at(two_mode_schedule(kappa=4, d=5000), 0.5)
    assert co.beta == pytest.approx(0.0282843, abs=1e-7)


@st.composite
def schedules(draw):
    kind = draw(st.sampled_from(["identity", "two_mode", "multi_mode"]))
    if kind == "identity":
        return identity_schedule()
    if kind == "two_mode":
        d = draw(st.integers(min_value=25, max_value=10_000))
        kappa = draw(st.floats(min_value=0.1, max_value=0.8)) * math.sqrt(d)
        return two_mode_schedule(kappa=kappa, d=d)
    m = draw(st.integers(min_value=1, max_value=4))
    base = draw(st.floats(min_value=4.0, max_value=50.0))
    norms = tuple(base * (3.0**i) for i in range(m))
    kappa = draw(st.floats(min_value=0.05, max_value=0.9)) / sum(1.0 / r for r in norms)
    return multi_mode_schedule(kappa=kappa, norms=norms)


@given(schedules(), st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=60, deadline=None)
def test_tau_strictly_increasing(sched, f1, f2):
    lo, hi = sched.domain
    t1, t2 = lo + f1 * (hi - lo), lo + f2 * (hi - lo)
    if t1 > t2:
        t1, t2 = t2, t1
    if t2 - t1 > 1e-9:
        assert sched.tau(t2) > sched.tau(t1)


@given(schedules())
@settings(max_examples=40, deadline=None)
def test_knot_continuity(sched):
    for tk in sched.t_knots[1:-1]:
        left = sched.tau(tk - 1e-12)
        right = sched.tau(tk + 1e-12)
        assert abs(left - right) < 1e-10


@given(schedules(), st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=60, deadline=None)
def test_slope_matches_numerical_derivative(sched, frac):
    lo, hi = sched.domain
    t = lo + frac * (hi - lo)
    # stay away from knots where the slope jumps
    if np.min(np.abs(sched.t_knots - t)) < 1e-3:
        return
    h = 1e-6
    num = (sched.tau(t + h) - sched.tau(t - h)) / (2 * h)
    assert abs(num - sched.tau_dot(t)) < 1e-8


@given(schedules(), st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=60, deadline=None)
def test_alpha_plus_beta_is_one(sched, frac):
    lo, hi = sched.domain
    co = coeffs_at(sched, lo + frac * (hi - lo))
    assert co.alpha + co.beta == pytest.approx(1.0, abs=1e-12)
    assert co.alpha_dot == -co.beta_dot


def test_config_round_trip():
    for sched in (
        identity_schedule(),
        two_mode_schedule(kappa=4, d=1000),
        multi_mode_schedule(kappa=0.5, norms=(10, 100, 1000)),
    ):
        back = TimeSchedule.from_config(sched.to_config())
        assert back.kind == sched.kind
        for t in np.linspace(sched.t_min, sched.t_max, 17):
            assert back.tau(t) == sched.tau(t)
