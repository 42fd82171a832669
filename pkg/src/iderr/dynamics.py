"""Point-mass plant with friction, stiction and sensing noise, plus the
approximate rigid-body model whose errors are learned.

The true system is decoupled per dimension:

    M qdd = tau - viscous * qd - coulomb(q) * sign(qd)

with a stiction hold whenever the mass is (nearly) at rest and the net
non-Coulomb force stays below the break-away threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

AccelKind = Literal["actual", "desired"]

# Cell multipliers for the 2x2 Coulomb grid; the mean is 1 so a level keeps
# its nominal magnitude on average.
COULOMB_PATTERN = np.array([[0.5, 1.0], [1.0, 1.5]])

VISCOUS_LEVELS = {"medium": 2.0, "high": 5.0}
COULOMB_LEVELS = {"medium": 1.0, "high": 3.0}
BREAK_TORQUE_LEVELS = {"medium": 2.0, "high": 5.0}


class SimulationFault(RuntimeError):
    """Raised when the plant is driven with a non-finite torque."""


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.q.shape != self.qd.shape or self.q.ndim != 1:
            raise ValueError(f"q and qd must be 1-d with equal shape, got {self.q.shape} and {self.qd.shape}")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.q).all() and np.isfinite(self.qd).all())

    @classmethod
    def at_rest(cls, q) -> "JointState":
        q = np.asarray(q, dtype=float)
        return cls(q.copy(), np.zeros_like(q))


@dataclass
class InputPoint:
    """Regression input ``x = (q, qd, qdd)`` tagged by where qdd came from."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    accel_kind: AccelKind = "desired"

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd, self.qdd])

    @property
    def dim(self) -> int:
        return len(self.q)


@dataclass
class FrictionParams:
    viscous: np.ndarray
    coulomb_levels: np.ndarray
    region_edges: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.viscous = np.atleast_1d(np.asarray(self.viscous, dtype=float))
        self.coulomb_levels = np.asarray(self.coulomb_levels, dtype=float)
        self.region_edges = [np.sort(np.atleast_1d(np.asarray(e, dtype=float))) for e in self.region_edges]
        if (self.viscous < 0).any() or (self.coulomb_levels < 0).any():
            raise ValueError("friction coefficients must be non-negative")
        expected = tuple(len(e) + 1 for e in self.region_edges)
        if self.coulomb_levels.shape != expected:
            raise ValueError(f"coulomb_levels has shape {self.coulomb_levels.shape}, grid implies {expected}")

    @classmethod
    def none(cls, dim: int = 2) -> "FrictionParams":
        return cls(np.zeros(dim), np.zeros(()), [])

    def coulomb(self, q: np.ndarray) -> float:
        """Coulomb magnitude of the grid cell containing ``q``."""
        if not self.region_edges:
            return float(self.coulomb_levels)
        idx = tuple(int(np.searchsorted(e, qi, side="right")) for e, qi in zip(self.region_edges, q))
        return float(self.coulomb_levels[idx])


@dataclass
class StictionParams:
    break_torque: float = 0.0
    v_stick: float = 1e-3

    def __post_init__(self):
        if self.break_torque < 0:
            raise ValueError("break_torque must be >= 0")
        if self.v_stick <= 0:
            raise ValueError("v_stick must be > 0")


@dataclass
class TrueSystem:
    mass: np.ndarray
    friction: FrictionParams
    stiction: StictionParams = field(default_factory=StictionParams)
    noise_max: float = 0.0
    dt: float = 1e-3

    def __post_init__(self):
        self.mass = np.atleast_1d(np.asarray(self.mass, dtype=float))
        if (self.mass <= 0).any():
            raise ValueError("mass entries must be strictly positive")
        if self.noise_max < 0:
            raise ValueError("noise_max must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")

    @property
    def dim(self) -> int:
        return self.mass.shape[0]


@dataclass
class ApproxRbdModel:
    mass_hat: np.ndarray
    h_hat: np.ndarray | None = None

    def __post_init__(self):
        self.mass_hat = np.atleast_1d(np.asarray(self.mass_hat, dtype=float))
        if (self.mass_hat <= 0).any():
            raise ValueError("mass_hat entries must be strictly positive")
        if self.h_hat is None:
            self.h_hat = np.zeros_like(self.mass_hat)
        self.h_hat = np.asarray(self.h_hat, dtype=float)


def make_friction(level: str | None, dim: int = 2, split: float = 0.5) -> FrictionParams:
    """Viscous + grid-Coulomb friction at a named level (``None`` = frictionless).

    The grid is split at ``split`` along each of the first two dimensions.
    """
    if level is None:
        return FrictionParams.none(dim)
    if level not in VISCOUS_LEVELS:
        raise ValueError(f"unknown friction level {level!r}; valid: {sorted(VISCOUS_LEVELS)}")
    levels = COULOMB_LEVELS[level] * COULOMB_PATTERN
    edges = [np.array([split]), np.array([split])]
    if dim != 2:
        levels = np.full((2,) * dim, COULOMB_LEVELS[level])
        edges = [np.array([split])] * dim
    return FrictionParams(np.full(dim, VISCOUS_LEVELS[level]), levels, edges)


def make_stiction(level: str | None, v_stick: float = 1e-3) -> StictionParams:
    if level is None:
        return StictionParams(0.0, v_stick)
    if level not in BREAK_TORQUE_LEVELS:
        raise ValueError(f"unknown stiction level {level!r}; valid: {sorted(BREAK_TORQUE_LEVELS)}")
    return StictionParams(BREAK_TORQUE_LEVELS[level], v_stick)


def true_acceleration(system: TrueSystem, state: JointState, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Acceleration and a per-dimension stuck mask for ``tau`` at ``state``."""
    fr = system.friction
    drive = tau - fr.viscous * state.qd
    stuck = (np.abs(state.qd) < system.stiction.v_stick) & (np.abs(drive) < system.stiction.break_torque)
    qdd = (drive - fr.coulomb(state.q) * np.sign(state.qd)) / system.mass
    qdd[stuck] = 0.0
    return qdd, stuck


def simulate_step(system: TrueSystem, state: JointState, tau, rng: np.random.Generator) -> tuple[JointState, np.ndarray]:
    """Advance the true plant one semi-implicit Euler step under ``tau``.

    Returns the next true state and a noisy position measurement of it.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != state.q.shape:
        raise ValueError(f"torque shape {tau.shape} does not match state dim {state.dim}")
    if not np.isfinite(tau).all():
        raise SimulationFault(f"non-finite torque {tau}")
    qdd, stuck = true_acceleration(system, state, tau)
    qd = state.qd + qdd * system.dt
    qd[stuck] = 0.0
    q = state.q + qd * system.dt
    nxt = JointState(q, qd)
    return nxt, measure(system, nxt, rng)


def measure(system: TrueSystem, state: JointState, rng: np.random.Generator) -> np.ndarray:
    """Position reading with bounded uniform noise."""
    noise = rng.uniform(-system.noise_max, system.noise_max, size=state.dim)
    return state.q + noise


def finite_diff(q_t, q_tm1, qd_tm1, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity at ``t`` and the realized acceleration at ``t - 1``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    qd_t = (np.asarray(q_t, dtype=float) - q_tm1) / dt
    qdd_tm1 = (qd_t - qd_tm1) / dt
    return qd_t, qdd_tm1


def rbd_torque(model: ApproxRbdModel, x: InputPoint | np.ndarray) -> np.ndarray:
    qdd = x.qdd if isinstance(x, InputPoint) else np.asarray(x, dtype=float)
    if qdd.shape != model.mass_hat.shape:
        raise ValueError(f"acceleration dim {qdd.shape} does not match model dim {model.mass_hat.shape}")
    return model.mass_hat * qdd + model.h_hat
