"""Indirect, direct and joint training sets built from an execution trace."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

from .dynamics import InputPoint

Source = Literal["indirect", "direct"]
KIND_FOR_SOURCE = {"indirect": "actual", "direct": "desired"}


@dataclass
class StepTrace:
    t: int
    x_d: InputPoint
    tau_total: np.ndarray
    tau_fb_learner: np.ndarray
    f_prev_at_xd: np.ndarray
    x_a: InputPoint | None = None
    tau_rbd_at_xa: np.ndarray | None = None
    tau_fb_applied: np.ndarray | None = None

    @property
    def finalized(self) -> bool:
        return self.x_a is not None


@dataclass
class TrainingSample:
    x: InputPoint
    y: np.ndarray
    source: Source

    def __post_init__(self):
        if self.x.accel_kind != KIND_FOR_SOURCE[self.source]:
            raise ValueError(f"{self.source} sample needs a {KIND_FOR_SOURCE[self.source]}-acceleration input")


@dataclass
class Dataset:
    """Array-backed set of ``(x, y)`` pairs with a per-sample source label."""

    X: np.ndarray
    Y: np.ndarray
    source: np.ndarray
    t: np.ndarray
    label: str = "joint"
    iteration: int = 0
    dim: int = field(default=0)

    def __post_init__(self):
        if not self.dim:
            self.dim = self.Y.shape[1] if self.Y.ndim == 2 else 0
        n = len(self.X)
        if not (len(self.Y) == len(self.source) == len(self.t) == n):
            raise ValueError("dataset columns have inconsistent lengths")

    @classmethod
    def empty(cls, dim: int, label: str, iteration: int = 0) -> "Dataset":
        return cls(np.zeros((0, 3 * dim)), np.zeros((0, dim)), np.array([], dtype="<U8"), np.zeros(0, dtype=int), label, iteration, dim)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample], ts: Sequence[int], label: str, iteration: int, dim: int) -> "Dataset":
        if not samples:
            return cls.empty(dim, label, iteration)
        return cls(
            np.array([s.x.as_array() for s in samples]),
            np.array([s.y for s in samples], dtype=float),
            np.array([s.source for s in samples]),
            np.asarray(ts, dtype=int),
            label,
            iteration,
            dim,
        )

    def __len__(self) -> int:
        return len(self.X)

    @property
    def samples(self) -> Iterator[TrainingSample]:
        d = self.dim
        for x, y, src in zip(self.X, self.Y, self.source):
            point = InputPoint(x[:d], x[d : 2 * d], x[2 * d :], KIND_FOR_SOURCE[str(src)])
            yield TrainingSample(point, y, str(src))

    def subset(self, source: Source) -> "Dataset":
        mask = self.source == source
        return Dataset(self.X[mask], self.Y[mask], self.source[mask], self.t[mask], source, self.iteration, self.dim)

    def accumulate(self, other: "Dataset") -> "Dataset":
        """Concatenation across iterations (labels kept, iteration from ``other``)."""
        return Dataset(
            np.concatenate([self.X, other.X]),
            np.concatenate([self.Y, other.Y]),
            np.concatenate([self.source, other.source]),
            np.concatenate([self.t, other.t]),
            other.label,
            other.iteration,
            other.dim,
        )


def _trace_dim(trace: Sequence[StepTrace]) -> int:
    return trace[0].x_d.dim if trace else 0


def build_indirect(trace: Sequence[StepTrace], iteration: int = 0) -> Dataset:
    """Inputs at realized accelerations, targets ``tau_total - tau_rbd(x_a)``.

    Steps whose actual acceleration is not yet known are skipped.
    """
    dim = _trace_dim(trace)
    done = [s for s in trace if s.finalized]
    if not done:
        return Dataset.empty(dim, "indirect", iteration)
    return Dataset(
        np.array([s.x_a.as_array() for s in done]),
        np.array([s.tau_total - s.tau_rbd_at_xa for s in done]),
        np.full(len(done), "indirect"),
        np.array([s.t for s in done]),
        "indirect",
        iteration,
        dim,
    )


def build_direct(trace: Sequence[StepTrace], iteration: int = 0) -> Dataset:
    """Inputs at desired accelerations, targets = filtered shadow feedback
    plus the previous error model's prediction there."""
    dim = _trace_dim(trace)
    if not trace:
        return Dataset.empty(dim, "direct", iteration)
    return Dataset(
        np.array([s.x_d.as_array() for s in trace]),
        np.array([s.tau_fb_learner + s.f_prev_at_xd for s in trace]),
        np.full(len(trace), "direct"),
        np.array([s.t for s in trace]),
        "direct",
        iteration,
        dim,
    )


def build_joint(indirect: Dataset, direct: Dataset) -> Dataset:
    if indirect.iteration != direct.iteration:
        raise ValueError(f"iteration mismatch: indirect k={indirect.iteration}, direct k={direct.iteration}")
    dim = direct.dim or indirect.dim
    return Dataset(
        np.concatenate([indirect.X.reshape(-1, 3 * dim), direct.X.reshape(-1, 3 * dim)]),
        np.concatenate([indirect.Y.reshape(-1, dim), direct.Y.reshape(-1, dim)]),
        np.concatenate([indirect.source, direct.source]),
        np.concatenate([indirect.t, direct.t]),
        "joint",
        direct.iteration,
        dim,
    )


def build_dataset(trace: Sequence[StepTrace], source: str, iteration: int = 0) -> Dataset:
    if source == "indirect":
        return build_indirect(trace, iteration)
    if source == "direct":
        return build_direct(trace, iteration)
    if source == "joint":
        return build_joint(build_indirect(trace, iteration), build_direct(trace, iteration))
    raise ValueError(f"unknown data source {source!r}")


def write_dataset_csv(data: Dataset, path) -> Path:
    """Columns: t, source, q[i], qd[i], qdd[i], y[i]."""
    path = Path(path)
    d = data.dim
    header = ["t", "source"]
    for block in ("q", "qd", "qdd"):
        header += [f"{block}{i}" for i in range(d)]
    header += [f"y{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, src, x, y in zip(data.t, data.source, data.X, data.Y):
            w.writerow([int(t), str(src), *(repr(float(v)) for v in x), *(repr(float(v)) for v in y)])
    return path


def read_dataset_csv(path, iteration: int = 0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("y"))
    sources = np.array([r[1] for r in body])
    labels = set(sources.tolist())
    label = labels.pop() if len(labels) == 1 else "joint"
    if not body:
        return Dataset.empty(d, label, iteration)
    vals = np.array([[float(v) for v in r[2:]] for r in body])
    return Dataset(vals[:, : 3 * d], vals[:, 3 * d :], sources, np.array([int(r[0]) for r in body]), label, iteration, d)
