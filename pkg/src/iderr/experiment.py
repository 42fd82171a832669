"""Task execution, the iterative learning loop, sweeps and aggregation."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .control import AccelPolicy, AdaptiveFbState, FeedbackPair, GainPair, PidState, compose_torque, policy_accel
from .datasets import Dataset, StepTrace, build_dataset
from .dynamics import (
    ApproxRbdModel,
    InputPoint,
    JointState,
    SimulationFault,
    TrueSystem,
    finite_diff,
    make_friction,
    make_stiction,
    rbd_torque,
    simulate_step,
)
from .error_model import ErrorModel

log = logging.getLogger(__name__)

NOISE_LEVELS = {"none": 0.0, "low": 0.0001, "medium": 0.0005, "high": 0.007, "very_high": 0.008}
FRICTION_LEVELS = ("none", "medium", "high")
STICTION_LEVELS = ("none", "medium", "high")
CONTROLLERS = ("pid", "adaptive")
GAIN_SETTINGS = ("low", "high")
DATA_SOURCES = ("indirect", "direct", "joint")
METRIC_NAMES = ("pos_err_mean", "fb_mag_mean", "accel_err_mean")

CHOICES = {
    "noise_level": tuple(NOISE_LEVELS),
    "friction_level": FRICTION_LEVELS,
    "stiction_level": STICTION_LEVELS,
    "controller": CONTROLLERS,
    "gain_setting": GAIN_SETTINGS,
    "data_source": DATA_SOURCES,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the sweep grid plus every tunable of the simulation.

    ``seed`` is the repetition seed; the random streams of a run derive from
    it and the system condition (noise, friction, stiction) only.
    """

    noise_level: str = "low"
    friction_level: str = "medium"
    stiction_level: str = "high"
    controller: str = "pid"
    gain_setting: str = "low"
    data_source: str = "joint"
    epochs: int = 20
    n_iterations: int = 20
    seed: int = 0
    horizon: int = 5000
    accumulate_data: bool = False

    dt: float = 0.001
    mass: tuple[float, ...] = (5.0, 5.0)
    mass_hat: tuple[float, ...] = (0.5, 0.5)
    q_init: tuple[float, ...] = (0.0, 0.0)
    q_des: tuple[float, ...] = (1.0, 1.0)
    v_stick: float = 1e-3

    kp_pol: float = 9.0
    kd_pol: float = 6.0
    # PID gains per unit of modeled mass at the high gain level
    pid_kp: float = 60.0
    pid_ki: float = 0.5
    pid_kd: float = 15.0
    integral_limit: float = 10.0
    adaptive_eta: float = 0.1
    adaptive_leak: float = 0.018
    gain_ratio: float = 10.0
    filter_beta: float = 0.1

    hidden_layer_sizes: tuple[int, ...] = (200, 100, 50, 20)
    learning_rate: float = 1e-3
    batch_size: int = 64
    output_clamp: float = 20.0
    scale_targets: bool = False

    conv_pos_tol: float = 1e-3
    conv_vel_tol: float = 1e-2
    abort_threshold: float = 1e3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                object.__setattr__(self, f.name, tuple(value))
        for key, valid in CHOICES.items():
            if getattr(self, key) not in valid:
                raise ValueError(f"{key}={getattr(self, key)!r} is not one of {list(valid)}")
        dims = {len(self.mass), len(self.mass_hat), len(self.q_init), len(self.q_des)}
        if len(dims) != 1:
            raise ValueError(f"mass, mass_hat, q_init and q_des must share one dimension, got lengths {sorted(dims)}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.gain_ratio < 1:
            raise ValueError("gain_ratio must be >= 1")
        positive = ("dt", "kp_pol", "kd_pol", "adaptive_eta", "learning_rate", "output_clamp",
                    "conv_pos_tol", "conv_vel_tol", "abort_threshold", "v_stick", "integral_limit")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if min(self.pid_kp, self.pid_ki, self.pid_kd) < 0:
            raise ValueError("PID gains must be non-negative")
        if not 0 <= self.adaptive_leak < 1:
            raise ValueError("adaptive_leak must be in [0, 1)")
        if not 0 < self.filter_beta <= 1:
            raise ValueError("filter_beta must be in (0, 1]")
        if self.batch_size < 1 or not self.hidden_layer_sizes or min(self.hidden_layer_sizes) < 1:
            raise ValueError("batch_size and hidden_layer_sizes must be positive")
        if min(self.mass) <= 0 or min(self.mass_hat) <= 0:
            raise ValueError("mass and mass_hat entries must be > 0")

    @property
    def dim(self) -> int:
        return len(self.mass)

    @property
    def noise_max(self) -> float:
        return NOISE_LEVELS[self.noise_level]

    @property
    def condition(self) -> tuple[int, int, int]:
        return (
            CHOICES["noise_level"].index(self.noise_level),
            FRICTION_LEVELS.index(self.friction_level),
            STICTION_LEVELS.index(self.stiction_level),
        )

    @property
    def gains(self) -> GainPair:
        """Applied and learner gain scales.

        The learner always sees the high-gain level; the applied level is
        ``1 / gain_ratio`` of it in the low setting.
        """
        low = 1.0 / self.gain_ratio if self.gain_setting == "low" else 1.0
        return GainPair(low, 1.0)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def build_system(self) -> TrueSystem:
        friction = make_friction(None if self.friction_level == "none" else self.friction_level, self.dim)
        stiction = make_stiction(None if self.stiction_level == "none" else self.stiction_level, self.v_stick)
        return TrueSystem(np.array(self.mass), friction, stiction, self.noise_max, self.dt)

    def build_rbd(self) -> ApproxRbdModel:
        return ApproxRbdModel(np.array(self.mass_hat))

    def build_policy(self) -> AccelPolicy:
        return AccelPolicy(np.array(self.q_des), self.kp_pol, self.kd_pol)

    @property
    def pid_gains(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Absolute high-level (kp, ki, kd) per axis, scaled by the modeled mass."""
        m = np.array(self.mass_hat, dtype=float)
        return self.pid_kp * m, self.pid_ki * m, self.pid_kd * m

    def build_feedback(self) -> FeedbackPair:
        if self.controller == "pid":
            kp, ki, kd = self.pid_gains
            make = lambda: PidState(kp.copy(), ki.copy(), kd.copy(), integral_limit=self.integral_limit)  # noqa: E731
        else:
            make = lambda: AdaptiveFbState.for_dim(self.dim, self.adaptive_eta, self.adaptive_leak)  # noqa: E731
        return FeedbackPair(self.controller, self.gains, make(), make(), self.filter_beta)

    def build_model(self) -> ErrorModel:
        return ErrorModel(
            n_joints=self.dim,
            hidden_layer_sizes=tuple(self.hidden_layer_sizes),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            output_clamp=self.output_clamp,
            scale_targets=self.scale_targets,
        )

    def rng(self, stream: int, iteration: int) -> np.random.Generator:
        """Stream 0 drives sensing noise, stream 1 drives training."""
        return np.random.default_rng([self.seed, *self.condition, stream, iteration])


@dataclass
class IterationRecord:
    iteration: int
    pos_err_mean: float
    fb_mag_mean: float
    accel_err_mean: float
    converged: bool
    steps: int
    aborted: bool = False


@dataclass
class RunMetrics:
    config: ExperimentConfig
    records: list[IterationRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def aborted(self) -> bool:
        return self.error is not None or any(r.aborted for r in self.records)

    def series(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records], dtype=float)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunMetrics) and self.config == other.config and self.records == other.records and self.error == other.error


def nominal_reference(policy: AccelPolicy, q0, qd0, dt: float, n_steps: int) -> np.ndarray:
    """Positions of the policy rolled out under perfect dynamics, ``(n_steps + 1, dim)``."""
    q, qd = np.array(q0, dtype=float), np.array(qd0, dtype=float)
    out = np.empty((n_steps + 1, len(q)))
    out[0] = q
    for t in range(n_steps):
        qdd = policy.kp_pol * (policy.q_des - q) - policy.kd_pol * qd
        qd = qd + qdd * dt
        q = q + qd * dt
        out[t + 1] = q
    return out


def run_episode(cfg: ExperimentConfig, model: ErrorModel, rng: np.random.Generator,
                system: TrueSystem | None = None, rbd: ApproxRbdModel | None = None,
                apply_feedback: bool = True) -> tuple[list[StepTrace], IterationRecord]:
    """Execute the task once with error model ``model`` and collect data.

    Every step records the desired-acceleration input; the realized
    acceleration of step ``t`` becomes known after the measurement at
    ``t + 1``.  Step 0 gets no realized acceleration because its velocity is
    the given initial condition, not a finite-difference estimate.

    The loop runs compiled; :func:`run_episode_reference` is the same
    algorithm written with the per-operation functions.
    """
    system = system or cfg.build_system()
    rbd = rbd or cfg.build_rbd()
    policy = cfg.build_policy()
    noise = rng.uniform(-system.noise_max, system.noise_max, size=(cfg.horizon + 1, cfg.dim))
    ref = nominal_reference(policy, cfg.q_init, np.zeros(cfg.dim), cfg.dt, cfg.horizon)
    fr = system.friction
    n_edges = np.array([len(e) for e in fr.region_edges] or [0] * cfg.dim, dtype=np.int64)
    edges = np.full((cfg.dim, max(1, n_edges.max())), np.inf)
    for i, e in enumerate(fr.region_edges):
        edges[i, : len(e)] = e
    levels = np.ascontiguousarray(fr.coulomb_levels, dtype=float).ravel()
    if fr.region_edges:
        strides = np.array([int(np.prod(fr.coulomb_levels.shape[i + 1 :])) for i in range(cfg.dim)], dtype=np.int64)
    else:
        strides = np.zeros(cfg.dim, dtype=np.int64)
    gains = cfg.gains
    has_model = not model.is_zero
    if has_model:
        flat, stats = model.flat_params(), (model.x_mean_, model.x_scale_, model.y_mean_, model.y_scale_)
    else:
        flat, stats = np.zeros(1), (np.zeros(3 * cfg.dim), np.ones(3 * cfg.dim), np.zeros(cfg.dim), np.ones(cfg.dim))
    out = _kernels.episode(
        np.array(cfg.q_init, dtype=float), noise, ref, cfg.dt, cfg.horizon,
        system.mass, rbd.mass_hat, rbd.h_hat, fr.viscous, edges, n_edges, levels, strides,
        system.stiction.break_torque, system.stiction.v_stick,
        policy.q_des, policy.kp_pol, policy.kd_pol,
        0 if cfg.controller == "pid" else 1, *cfg.pid_gains,
        cfg.integral_limit, cfg.adaptive_eta, cfg.adaptive_leak, gains.g_low, gains.g_high, cfg.filter_beta,
        apply_feedback, has_model, flat, model.widths, *stats, float(model.output_clamp),
        cfg.conv_pos_tol, cfg.conv_vel_tol, cfg.abort_threshold,
    )
    steps, converged, aborted, q_meas, qd_est, q_true, _, qdd_d, qdd_a, tau, fb, learner, f_prev = out
    trace = []
    for t in range(steps):
        entry = StepTrace(t, InputPoint(q_meas[t], qd_est[t], qdd_d[t], "desired"), tau[t], learner[t], f_prev[t],
                          tau_fb_applied=fb[t])
        if not np.isnan(qdd_a[t, 0]):
            entry.x_a = InputPoint(q_meas[t], qd_est[t], qdd_a[t], "actual")
            entry.tau_rbd_at_xa = rbd_torque(rbd, qdd_a[t])
        trace.append(entry)
    has_a = ~np.isnan(qdd_a[:steps, 0])
    record = IterationRecord(
        iteration=model.iteration + 1,
        pos_err_mean=float(np.linalg.norm(ref[1 : steps + 1] - q_true[1 : steps + 1], axis=1).mean()),
        fb_mag_mean=float(np.linalg.norm(fb[:steps], axis=1).mean()),
        accel_err_mean=float(np.linalg.norm(qdd_d[:steps][has_a] - qdd_a[:steps][has_a], axis=1).mean()) if has_a.any() else 0.0,
        converged=bool(converged),
        steps=int(steps),
        aborted=bool(aborted),
    )
    return trace, record


def run_episode_reference(cfg: ExperimentConfig, model: ErrorModel, rng: np.random.Generator,
                          system: TrueSystem | None = None, rbd: ApproxRbdModel | None = None,
                          apply_feedback: bool = True) -> tuple[list[StepTrace], IterationRecord]:
    """Plain-Python twin of :func:`run_episode` (slow; used as its oracle)."""
    system = system or cfg.build_system()
    rbd = rbd or cfg.build_rbd()
    policy = cfg.build_policy()
    fb = cfg.build_feedback()
    dt = cfg.dt
    clamp = model.output_clamp
    noise = rng.uniform(-system.noise_max, system.noise_max, size=(cfg.horizon + 1, cfg.dim))
    ref = nominal_reference(policy, cfg.q_init, np.zeros(cfg.dim), dt, cfg.horizon)

    state = JointState(np.array(cfg.q_init, dtype=float), np.zeros(cfg.dim))
    q_meas = state.q + noise[0]
    qd_est = state.qd.copy()
    zero = np.zeros(cfg.dim)
    trace: list[StepTrace] = []
    pos_err = fb_mag = acc_err = 0.0
    n_acc = steps = 0
    converged = aborted = False
    for t in range(cfg.horizon):
        qdd_d = policy_accel(policy, JointState(q_meas, qd_est))
        x_d = InputPoint(q_meas, qd_est, qdd_d, "desired")
        f_prev = zero if model.is_zero else model.predict_one(x_d.as_array())
        tau_fb = fb.applied if apply_feedback else zero
        tau = compose_torque(rbd_torque(rbd, x_d), f_prev, tau_fb, clamp)
        entry = StepTrace(t, x_d, tau, fb.learner, f_prev, tau_fb_applied=tau_fb)
        trace.append(entry)
        steps = t + 1
        try:
            state, _ = simulate_step(system, state, tau, _NullRng)
        except SimulationFault:
            aborted = True
            break
        q_next = state.q + noise[t + 1]
        qd_next, qdd_a = finite_diff(q_next, q_meas, qd_est, dt)
        if t > 0:
            entry.x_a = InputPoint(q_meas, qd_est, qdd_a, "actual")
            entry.tau_rbd_at_xa = rbd_torque(rbd, entry.x_a)
            acc_err += float(np.linalg.norm(qdd_d - qdd_a))
            n_acc += 1
        fb.update(ref[t + 1] - q_next, qdd_d, qdd_a, dt)
        fb_mag += float(np.linalg.norm(tau_fb))
        pos_err += float(np.linalg.norm(ref[t + 1] - state.q))
        q_meas, qd_est = q_next, qd_next
        if not state.is_finite() or max(np.abs(state.q).max(), np.abs(state.qd).max()) > cfg.abort_threshold:
            aborted = True
            break
        if np.linalg.norm(state.q - policy.q_des) < cfg.conv_pos_tol and np.linalg.norm(state.qd) < cfg.conv_vel_tol:
            converged = True
            break
    record = IterationRecord(model.iteration + 1, pos_err / steps, fb_mag / steps,
                             acc_err / n_acc if n_acc else 0.0, converged, steps, aborted)
    return trace, record


class _NullRng:
    """Noise source for the reference loop, whose noise is pre-drawn."""

    @staticmethod
    def uniform(low, high, size):
        return np.zeros(size)


@dataclass
class LearningResult:
    metrics: RunMetrics
    model: ErrorModel
    datasets: list[Dataset]


def run_learning(cfg: ExperimentConfig, keep_datasets: bool = False, train_last: bool = False,
                 system: TrueSystem | None = None, rbd: ApproxRbdModel | None = None,
                 on_episode=None) -> LearningResult:
    """Alternate task execution and error-model training for ``n_iterations``.

    The model trained after the final execution is not needed for the
    metrics and is skipped unless ``train_last`` is set.  ``on_episode`` is
    called as ``on_episode(k, trace, record, dataset)`` after every execution.
    """
    model = cfg.build_model()
    metrics = RunMetrics(cfg)
    kept: list[Dataset] = []
    pool: Dataset | None = None
    for k in range(1, cfg.n_iterations + 1):
        trace, record = run_episode(cfg, model, cfg.rng(0, k), system, rbd)
        record.iteration = k
        metrics.records.append(record)
        data = build_dataset(trace, cfg.data_source, iteration=k)
        if on_episode is not None:
            on_episode(k, trace, record, data)
        if keep_datasets:
            kept.append(data)
        if record.aborted:
            log.warning("episode %d aborted (%s); skipping training", k, cfg)
            continue
        if cfg.accumulate_data:
            pool = data if pool is None else pool.accumulate(data)
            data = pool
        if k < cfg.n_iterations or train_last:
            model.fit(data.X, data.Y, epochs=cfg.epochs, rng=cfg.rng(1, k))
    return LearningResult(metrics, model, kept)


def _run_one(cfg: ExperimentConfig) -> RunMetrics:
    try:
        return run_learning(cfg).metrics
    except Exception as exc:  # recorded, the sweep continues
        log.error("run failed: %s\n%s", cfg, traceback.format_exc())
        return RunMetrics(cfg, [], error=f"{type(exc).__name__}: {exc}")


def run_sweep(grid: Sequence[ExperimentConfig], n_jobs: int = 1, progress=None) -> list[RunMetrics]:
    if not grid:
        raise ValueError("empty grid")
    if n_jobs == 1:
        out = []
        for i, cfg in enumerate(grid):
            out.append(_run_one(cfg))
            if progress:
                progress(i + 1, len(grid), out[-1])
        return out
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(_run_one)(cfg) for cfg in grid)


def make_grid(base: ExperimentConfig | None = None, seeds: Iterable[int] = (0,), **axes) -> list[ExperimentConfig]:
    """Cartesian product of the given axes (lists of values) over ``base``."""
    base = base or ExperimentConfig()
    names = list(axes)
    grid = []
    for values in itertools.product(*(axes[n] for n in names)):
        for seed in seeds:
            grid.append(base.replace(seed=seed, **dict(zip(names, values))))
    return grid


def full_grid(base: ExperimentConfig | None = None, n_seeds: int = 10) -> list[ExperimentConfig]:
    """16 system conditions x seeds x sources x epochs x gains x controllers."""
    return make_grid(
        base,
        seeds=range(n_seeds),
        noise_level=["low", "medium", "high", "very_high"],
        friction_level=["medium", "high"],
        stiction_level=["medium", "high"],
        controller=list(CONTROLLERS),
        gain_setting=list(GAIN_SETTINGS),
        epochs=[20, 50],
        data_source=list(DATA_SOURCES),
    )


@dataclass
class AggregateResult:
    key: tuple
    iterations: np.ndarray
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    n_runs: int
    n_excluded: int = 0


def aggregate(runs: Sequence[RunMetrics], group_by: Sequence[str] = ("controller", "gain_setting", "data_source")) -> dict[tuple, AggregateResult]:
    """Per-iteration mean and (population) std of each metric per group.

    Aborted runs are excluded and counted.
    """
    if not runs:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple, list[RunMetrics]] = {}
    for run in runs:
        key = tuple(getattr(run.config, g) for g in group_by)
        groups.setdefault(key, []).append(run)
    out = {}
    for key in sorted(groups):
        members = groups[key]
        good = [r for r in members if not r.aborted]
        if not good:
            raise ValueError(f"group {key} has no completed runs")
        n_it = min(len(r.records) for r in good)
        mean, std = {}, {}
        for metric in METRIC_NAMES:
            stack = np.array([r.series(metric)[:n_it] for r in good])
            mean[metric] = stack.mean(axis=0)
            std[metric] = stack.std(axis=0)
        out[key] = AggregateResult(key, np.arange(1, n_it + 1), mean, std, len(good), len(members) - len(good))
    return out


METRICS_HEADER = ["iteration", "pos_err_mean", "fb_mag_mean", "accel_err_mean", "converged", "steps", "aborted"]


def write_metrics_csv(run: RunMetrics, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in run.records:
            w.writerow([r.iteration, repr(r.pos_err_mean), repr(r.fb_mag_mean), repr(r.accel_err_mean), int(r.converged), r.steps, int(r.aborted)])
    return path


def read_metrics_csv(path, cfg: ExperimentConfig) -> RunMetrics:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    recs = [
        IterationRecord(int(r["iteration"]), float(r["pos_err_mean"]), float(r["fb_mag_mean"]), float(r["accel_err_mean"]),
                        bool(int(r["converged"])), int(r["steps"]), bool(int(r.get("aborted", 0))))
        for r in rows
    ]
    return RunMetrics(cfg, recs)


def write_trace_csv(trace: Sequence[StepTrace], path) -> Path:
    path = Path(path)
    d = trace[0].x_d.dim if trace else 0
    cols = ["t"]
    for name in ("q", "qd", "qdd_d", "qdd_a", "tau_total", "tau_fb", "tau_fb_learner", "f_prev"):
        cols += [f"{name}{i}" for i in range(d)]
    nan = np.full(d, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in trace:
            qdd_a = s.x_a.qdd if s.x_a is not None else nan
            fb = s.tau_fb_applied if s.tau_fb_applied is not None else nan
            row = [s.t, *s.x_d.q, *s.x_d.qd, *s.x_d.qdd, *qdd_a, *s.tau_total, *fb, *s.tau_fb_learner, *s.f_prev_at_xd]
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    return path


def write_aggregate_csv(aggs: dict[tuple, AggregateResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["group", "iteration", "n_runs", "n_excluded"]
        for m in METRIC_NAMES:
            header += [f"{m}_mean", f"{m}_std"]
        w.writerow(header)
        for key, agg in aggs.items():
            for i, it in enumerate(agg.iterations):
                row = ["/".join(map(str, key)), int(it), agg.n_runs, agg.n_excluded]
                for m in METRIC_NAMES:
                    row += [repr(float(agg.mean[m][i])), repr(float(agg.std[m][i]))]
                w.writerow(row)
    return path
