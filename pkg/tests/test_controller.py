import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forcetune.controller import (
    ControllerConfig,
    ControllerFault,
    ControllerGains,
    ControllerState,
    control_step,
    reset,
)
from forcetune.plant import PlantParams

TS = 0.01
WIDE = ControllerConfig(u_max_mm_s=1e9)


def run(gains, errors, config=WIDE, u_ff=0.0):
    state, out = reset(), []
    for e in errors:
        state, u = control_step(state, gains, e, TS, config, u_ff)
        out.append(u)
    return out


def test_zero_gains_pass_feedforward():
    cfg = ControllerConfig()
    for e in (-1.0, 0.0, 0.3):
        assert run(ControllerGains(), [e], cfg, u_ff=7.5) == [7.5]
    # clamped to the actuator range
    assert run(ControllerGains(), [0.1], cfg, u_ff=40.0) == [25.0]


def test_pure_proportional():
    assert run(ControllerGains(kp=1.0), [0.1]) == [pytest.approx(0.1)]


def test_fast_derivative_first_step_by_hand():
    gains = ControllerGains(kd=10.0)
    out = run(gains, [0.0, 0.1])
    assert out[1] == pytest.approx(10 * (0.01 / 0.03) * (0.1 / 0.01))
    assert out[1] == pytest.approx(33.333333, rel=1e-6)


def test_reset_zeroes_state():
    state = ControllerState(1.0, 2.0, 3.0, 4.0, True)
    assert reset(state) == ControllerState()
    state, u = control_step(reset(state), ControllerGains(5, 5, 5, 5), 0.0, TS, ControllerConfig(), 3.0)
    assert u == 3.0


def test_first_step_has_no_derivative_kick():
    assert run(ControllerGains(kd=100.0, kdd=100.0), [0.2]) == [0.0]


def test_anti_windup_keeps_integral_term_bounded():
    cfg = ControllerConfig()
    gains = ControllerGains(ki=10.0)
    state = reset()
    for _ in range(5000):
        state, _ = control_step(state, gains, 1.0, TS, cfg)
    assert abs(gains.ki * state.integrator) <= cfg.u_max_mm_s + 1e-12
    # the saturated integrator unwinds as soon as the error flips
    state, u = control_step(state, gains, -1.0, TS, cfg)
    assert u > 0
    for _ in range(300):
        state, u = control_step(state, gains, -1.0, TS, cfg)
    assert u == 0.0


def test_slow_derivative_responds_slower():
    state = reset()
    cfg = ControllerConfig()
    state, _ = control_step(state, ControllerGains(), 0.0, TS, cfg)
    fast, slow = [], []
    for _ in range(100):
        state, _ = control_step(state, ControllerGains(), 0.0 if fast else 0.1, TS, cfg)
        fast.append(state.deriv_fast)
        slow.append(state.deriv_slow)
    assert fast[0] > slow[0] > 0
    # the fast filter has forgotten the step long before the slow one
    assert abs(fast[50]) < 1e-8 < abs(slow[50])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40),
    st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0, 100)] * 2),
    st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0, 100)] * 2),
)
def test_linear_in_gains_while_unclamped(increments, g1, g2):
    # a rising non-negative error keeps every term >= 0, so no clamp engages
    errors, acc = [], 0.0
    for d in increments:
        acc += d
        errors.append(acc)
    a = run(ControllerGains(*g1), errors)
    b = run(ControllerGains(*g2), errors)
    mix = [(x + y) / 2 for x, y in zip(g1, g2)]
    c = run(ControllerGains(*mix), errors)
    for ua, ub, uc in zip(a, b, c):
        assert uc == pytest.approx((ua + ub) / 2, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60),
    st.tuples(*[st.floats(0, 50)] * 2, *[st.floats(0, 100)] * 2),
    st.floats(0, 30),
)
def test_output_inside_actuator_range(errors, g, u_ff):
    cfg = ControllerConfig()
    for u in run(ControllerGains(*g), errors, cfg, u_ff):
        assert 0.0 <= u <= cfg.u_max_mm_s


def test_deterministic():
    errors = [0.1 * math.sin(k / 7) for k in range(300)]
    g = ControllerGains(3, 20, 1, 4)
    assert run(g, errors) == run(g, errors)


def test_non_finite_error_faults():
    with pytest.raises(ControllerFault):
        control_step(reset(), ControllerGains(), float("nan"), TS, ControllerConfig())


@pytest.mark.parametrize("bad", [dict(kp=-1), dict(ki=51), dict(kd=100.5), dict(kdd=-0.1)])
def test_gain_bounds(bad):
    with pytest.raises(ValueError):
        ControllerGains(**bad)


def test_feedforward_modes():
    p = PlantParams()
    assert ControllerConfig(u_ff_mode="zero").feedforward(p, 0.3) == 0.0
    assert ControllerConfig(u_ff_mode=4.0).feedforward(p, 0.3) == 4.0
    u = ControllerConfig().feedforward(p, 0.3)
    assert p.steady_state_force(u) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        ControllerConfig(u_ff_mode="bogus")
