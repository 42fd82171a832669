"""Acceleration policy, feedback controllers and torque composition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import JointState


@dataclass
class AccelPolicy:
    """PD-to-goal acceleration policy."""

    q_des: np.ndarray
    kp_pol: float = 16.0
    kd_pol: float = 8.0

    def __post_init__(self):
        self.q_des = np.asarray(self.q_des, dtype=float)
        if self.kp_pol <= 0 or self.kd_pol <= 0:
            raise ValueError("policy gains must be positive")


def policy_accel(policy: AccelPolicy, state: JointState) -> np.ndarray:
    return policy.kp_pol * (policy.q_des - state.q) - policy.kd_pol * state.qd


@dataclass
class GainPair:
    """Applied gain scale and the learner-only (shadow) gain scale."""

    g_low: float = 0.1
    g_high: float = 1.0

    def __post_init__(self):
        if not self.g_high >= self.g_low > 0:
            raise ValueError(f"need g_high >= g_low > 0, got {self.g_low}, {self.g_high}")


@dataclass
class PidState:
    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    integral: np.ndarray = None
    last_error: np.ndarray = None
    integral_limit: float = 10.0

    def __post_init__(self):
        self.kp, self.ki, self.kd = (np.asarray(g, dtype=float) for g in (self.kp, self.ki, self.kd))
        if (self.kp < 0).any() or (self.ki < 0).any() or (self.kd < 0).any():
            raise ValueError("PID gains must be non-negative")
        shape = np.broadcast(self.kp, self.ki, self.kd).shape
        if self.integral is None:
            self.integral = np.zeros(shape)
        if self.last_error is None:
            self.last_error = np.zeros(shape)

    @classmethod
    def for_dim(cls, dim: int, kp: float, ki: float, kd: float, integral_limit: float = 10.0) -> "PidState":
        return cls(np.full(dim, kp), np.full(dim, ki), np.full(dim, kd), integral_limit=integral_limit)


def pid_feedback(pid: PidState, q_err, dt: float, gain_scale: float = 1.0) -> np.ndarray:
    """One PID update; mutates ``pid`` and returns the scaled torque.

    The integral is clamped to ``±pid.integral_limit`` (anti-windup).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    q_err = np.asarray(q_err, dtype=float)
    pid.integral = np.clip(pid.integral + q_err * dt, -pid.integral_limit, pid.integral_limit)
    deriv = (q_err - pid.last_error) / dt
    pid.last_error = q_err
    return gain_scale * (pid.kp * q_err + pid.ki * pid.integral + pid.kd * deriv)


@dataclass
class AdaptiveFbState:
    """Online-learned feedback torque offset driven by acceleration error."""

    offset: np.ndarray
    eta: float = 0.1
    leak: float = 0.0

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if not 0 <= self.leak < 1:
            raise ValueError("leak must be in [0, 1)")

    @classmethod
    def for_dim(cls, dim: int, eta: float, leak: float = 0.0) -> "AdaptiveFbState":
        return cls(np.zeros(dim), eta, leak)


def adaptive_feedback(fb: AdaptiveFbState, qdd_des, qdd_act, gain_scale: float = 1.0) -> np.ndarray:
    """Gradient step on the acceleration error; mutates ``fb``.

    A non-zero ``fb.leak`` shrinks the offset toward zero each step
    (L2-regularized online gradient descent).
    """
    fb.offset = (1.0 - fb.leak) * fb.offset + gain_scale * fb.eta * (np.asarray(qdd_des) - qdd_act)
    return fb.offset.copy()


def compose_torque(tau_rbd, f_err, tau_fb, clamp: float | None = None) -> np.ndarray:
    tau_rbd = np.asarray(tau_rbd, dtype=float)
    f_err = np.asarray(f_err, dtype=float)
    tau_fb = np.asarray(tau_fb, dtype=float)
    if not tau_rbd.shape == f_err.shape == tau_fb.shape:
        raise ValueError("torque terms must share one shape")
    if clamp is not None:
        f_err = np.clip(f_err, -clamp, clamp)
    return tau_rbd + f_err + tau_fb


def exp_filter(prev, new, beta: float) -> np.ndarray:
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    return (1.0 - beta) * np.asarray(prev, dtype=float) + beta * np.asarray(new, dtype=float)


@dataclass
class FeedbackPair:
    """Applied and shadow controllers of identical structure.

    Only ``applied`` ever reaches the plant; ``learner`` is the exponentially
    filtered shadow signal handed to the direct data source.
    """

    kind: str
    gains: GainPair
    applied_ctrl: PidState | AdaptiveFbState
    shadow_ctrl: PidState | AdaptiveFbState
    beta: float = 0.1
    applied: np.ndarray = field(default=None)
    shadow: np.ndarray = field(default=None)
    learner: np.ndarray = field(default=None)

    def __post_init__(self):
        dim = self.applied_ctrl.offset.shape if self.kind == "adaptive" else self.applied_ctrl.kp.shape
        for name in ("applied", "shadow", "learner"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(dim))

    def update(self, q_err, qdd_des, qdd_act, dt: float) -> None:
        if self.kind == "pid":
            self.applied = pid_feedback(self.applied_ctrl, q_err, dt, self.gains.g_low)
            self.shadow = pid_feedback(self.shadow_ctrl, q_err, dt, self.gains.g_high)
        else:
            self.applied = adaptive_feedback(self.applied_ctrl, qdd_des, qdd_act, self.gains.g_low)
            self.shadow = adaptive_feedback(self.shadow_ctrl, qdd_des, qdd_act, self.gains.g_high)
        self.learner = exp_filter(self.learner, self.shadow, self.beta)
