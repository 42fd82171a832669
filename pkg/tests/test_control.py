import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iderr.control import (
    AccelPolicy,
    AdaptiveFbState,
    FeedbackPair,
    GainPair,
    PidState,
    adaptive_feedback,
    compose_torque,
    exp_filter,
    pid_feedback,
    policy_accel,
)
from iderr.dynamics import JointState
from iderr.experiment import nominal_reference

finite = st.floats(-100, 100, allow_nan=False)
vec2 = arrays(float, 2, elements=finite)


def test_policy_fixed_point_and_p_law():
    pol = AccelPolicy(np.array([1.0, 1.0]), 16.0, 8.0)
    np.testing.assert_array_equal(policy_accel(pol, JointState.at_rest([1.0, 1.0])), [0.0, 0.0])
    pol = AccelPolicy(np.array([1.0, 1.0]), 1.0, 1e-9)
    np.testing.assert_allclose(policy_accel(pol, JointState.at_rest([0.0, 0.0])), [1.0, 1.0])
    with pytest.raises(ValueError):
        AccelPolicy(np.zeros(2), 0.0, 1.0)


def test_policy_rollout_matches_damped_ode():
    # kp=9, kd=6 is critically damped: e(t) = e0 (1 + 3t) exp(-3t)
    pol = AccelPolicy(np.array([1.0, -0.5]), 9.0, 6.0)
    dt, n = 1e-3, 5000
    ref = nominal_reference(pol, np.zeros(2), np.zeros(2), dt, n)
    t = np.arange(n + 1)[:, None] * dt
    e0 = pol.q_des - 0.0
    closed = pol.q_des - e0 * (1 + 3 * t) * np.exp(-3 * t)
    np.testing.assert_allclose(ref, closed, atol=5e-3)
    np.testing.assert_allclose(ref[-1], pol.q_des, atol=3e-5 + 1e-3)


def test_pid_examples():
    pid = PidState.for_dim(1, 10.0, 0.0, 0.0)
    np.testing.assert_allclose(pid_feedback(pid, np.array([0.1]), 1e-3), [1.0])
    pid = PidState.for_dim(2, 3.0, 2.0, 1.0)
    for _ in range(5):
        np.testing.assert_array_equal(pid_feedback(pid, np.zeros(2), 1e-3), [0.0, 0.0])
    with pytest.raises(ValueError):
        pid_feedback(pid, np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        PidState.for_dim(2, -1.0, 0.0, 0.0)


def test_pid_integral_clamped():
    pid = PidState.for_dim(1, 0.0, 1.0, 0.0, integral_limit=0.5)
    for _ in range(100):
        out = pid_feedback(pid, np.array([1.0]), 0.1)
    assert pid.integral[0] == 0.5 and out[0] == 0.5


@given(st.lists(vec2, min_size=1, max_size=20), st.floats(0.01, 1.0))
def test_pid_linear_in_gain_scale(errs, scale):
    a, b = PidState.for_dim(2, 30.0, 0.25, 7.5), PidState.for_dim(2, 30.0, 0.25, 7.5)
    for e in errs:
        ya, yb = pid_feedback(a, e, 1e-3, scale), pid_feedback(b, e, 1e-3, 1.0)
        np.testing.assert_allclose(ya, scale * yb, rtol=1e-12, atol=1e-12)


def test_adaptive_examples():
    fb = AdaptiveFbState.for_dim(2, 0.1)
    np.testing.assert_allclose(adaptive_feedback(fb, np.array([2.0, 0.0]), np.zeros(2)), [0.2, 0.0])
    before = fb.offset.copy()
    for _ in range(10):
        adaptive_feedback(fb, np.array([1.0, -1.0]), np.array([1.0, -1.0]))
    np.testing.assert_array_equal(fb.offset, before)
    with pytest.raises(ValueError):
        AdaptiveFbState.for_dim(2, 0.0)
    with pytest.raises(ValueError):
        AdaptiveFbState.for_dim(2, 0.1, leak=1.0)


@pytest.mark.parametrize("leak", [0.0, 0.0036])
def test_adaptive_compensates_constant_bias(leak):
    """Plant M qdd = M_hat qdd_d + offset - b: the offset follows the scalar
    recurrence e_{k+1} = (1 - leak - g eta / M) e_k around its fixed point."""
    M, M_hat, b, qdd_d, g, eta = 5.0, 0.5, 3.0, 0.7, 1.0, 0.02
    fb = AdaptiveFbState.for_dim(1, eta, leak)
    fixed = g * eta * (b + (M - M_hat) * qdd_d) / (leak * M + g * eta)
    rate = 1 - leak - g * eta / M
    e0 = 0.0 - fixed
    for k in range(1, 10001):
        qdd_a = (M_hat * qdd_d + fb.offset - b) / M
        adaptive_feedback(fb, np.array([qdd_d]), qdd_a, g)
        np.testing.assert_allclose(fb.offset[0], fixed + e0 * rate**k, atol=1e-10)
    if leak == 0.0:
        # full compensation: realized acceleration reaches the desired one
        np.testing.assert_allclose((M_hat * qdd_d + fb.offset[0] - b) / M, qdd_d, atol=1e-9)


def test_compose_examples():
    np.testing.assert_allclose(compose_torque([0.5, 0.0], [0.0, 0.0], [0.0, 0.0]), [0.5, 0.0])
    np.testing.assert_array_equal(compose_torque(np.zeros(2), np.zeros(2), np.zeros(2)), np.zeros(2))
    np.testing.assert_allclose(compose_torque(np.zeros(2), [100.0, 0.0], np.zeros(2), clamp=20.0), [20.0, 0.0])
    with pytest.raises(ValueError):
        compose_torque(np.zeros(2), np.zeros(3), np.zeros(2))


@given(vec2, vec2, vec2, st.floats(0.1, 50))
def test_compose_clamp_bounds_model_term(rbd, f, fb, c):
    out = compose_torque(rbd, f, fb, clamp=c)
    assert (np.abs(out - rbd - fb) <= c + 1e-9).all()


def test_exp_filter_examples():
    assert exp_filter(0.0, 1.0, 0.1) == pytest.approx(0.1)
    np.testing.assert_allclose(exp_filter([2.5, -1.0], [2.5, -1.0], 0.3), [2.5, -1.0])
    with pytest.raises(ValueError):
        exp_filter(0.0, 1.0, 0.0)


@given(vec2, vec2, st.floats(1e-3, 1.0))
def test_exp_filter_is_convex(prev, new, beta):
    out = exp_filter(prev, new, beta)
    lo, hi = np.minimum(prev, new), np.maximum(prev, new)
    assert (out >= lo - 1e-9).all() and (out <= hi + 1e-9).all()


def test_gain_pair_validation():
    with pytest.raises(ValueError):
        GainPair(1.0, 0.1)
    with pytest.raises(ValueError):
        GainPair(0.0, 1.0)


@given(st.lists(st.tuples(vec2, vec2, vec2), min_size=1, max_size=15), st.sampled_from(["pid", "adaptive"]))
def test_shadow_is_gain_ratio_times_applied(steps, kind):
    """Both controllers see the same error, so the shadow is a fixed multiple."""
    gains = GainPair(0.1, 1.0)
    if kind == "pid":
        make = lambda: PidState.for_dim(2, 30.0, 0.25, 7.5, integral_limit=1e6)  # noqa: E731
    else:
        make = lambda: AdaptiveFbState.for_dim(2, 0.02)  # noqa: E731
    pair = FeedbackPair(kind, gains, make(), make(), 0.1)
    for q_err, qdd_d, qdd_a in steps:
        pair.update(q_err * 1e-2, qdd_d, qdd_a, 1e-3)
        np.testing.assert_allclose(pair.shadow, 10 * pair.applied, rtol=1e-9, atol=1e-9)
