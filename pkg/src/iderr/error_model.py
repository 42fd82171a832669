"""Learnable inverse-dynamics error model.

One fully connected PReLU network per joint.  The per-joint networks share
layer widths, so their parameters are stored stacked along a leading joint
axis and evaluated with batched matmuls; they never share parameter values.

The estimator follows scikit-learn conventions (``fit``/``predict``,
``get_params``), with two twists dictated by the learning loop:

* an unfitted model (iteration 0) predicts exact zeros instead of raising;
* ``fit`` always warm-starts from the current parameters.
"""
from __future__ import annotations

import copy
import json
import warnings
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array

from . import _kernels

CHECKPOINT_VERSION = 1
DEFAULT_WIDTHS = (200, 100, 50, 20)


class EmptyDatasetWarning(UserWarning):
    pass


def prelu(z, alpha):
    return np.where(z > 0, z, alpha * z)


def standardize(x, mean, scale):
    return (x - mean) / scale


def destandardize(u, mean, scale):
    return u * scale + mean


def _safe_scale(values: np.ndarray) -> np.ndarray:
    scale = values.std(axis=0)
    return np.where(scale > 1e-12, scale, 1.0)


def init_params(n_joints: int, input_dim: int, hidden: tuple[int, ...], alpha0: float, rng: np.random.Generator) -> dict:
    """He-style fan-in scaled weights, zero biases, PReLU slopes at ``alpha0``."""
    widths = (input_dim, *hidden, 1)
    gain = 2.0 / (1.0 + alpha0**2)
    W, b = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(n_joints, fan_in, fan_out)))
        b.append(np.zeros((n_joints, 1, fan_out)))
    alpha = [np.full((n_joints, 1, 1), float(alpha0)) for _ in hidden]
    return {"W": W, "b": b, "alpha": alpha}


def forward(params: dict, u: np.ndarray, keep: bool = False):
    """Raw network outputs, shape ``(n_joints, n_samples)``, for standardized ``u``.

    With ``keep`` the pre-activations and activations are returned for the
    backward pass.
    """
    W, b, alpha = params["W"], params["b"], params["alpha"]
    h = u
    zs, hs = [], [u]
    last = len(W) - 1
    for i in range(len(W)):
        z = h @ W[i] + b[i]
        if i < last:
            h = np.where(z > 0, z, alpha[i] * z)
        else:
            h = z
        if keep:
            zs.append(z)
            hs.append(h)
    out = h[..., 0]
    if keep:
        return out, (zs, hs)
    return out


def loss_and_grad(params: dict, u: np.ndarray, v: np.ndarray):
    """Mean squared error (summed over joints) and its exact gradient.

    ``u`` is ``(n, d_in)``, ``v`` is ``(n, n_joints)``; both standardized.
    """
    n = u.shape[0]
    out, (zs, hs) = forward(params, u, keep=True)
    resid = out - v.T
    loss = float(np.sum(resid**2) / n)
    W, alpha = params["W"], params["alpha"]
    gW, gb, ga = [None] * len(W), [None] * len(W), [None] * len(alpha)
    g = (2.0 / n) * resid[..., None]
    for i in reversed(range(len(W))):
        if i < len(W) - 1:
            z = zs[i]
            pos = z > 0
            ga[i] = np.sum(np.where(pos, 0.0, z) * g, axis=(1, 2), keepdims=True)
            g = np.where(pos, g, alpha[i] * g)
        h_in = hs[i]
        if h_in.ndim == 2:
            gW[i] = np.einsum("ni,jno->jio", h_in, g)
        else:
            gW[i] = np.swapaxes(h_in, 1, 2) @ g
        gb[i] = g.sum(axis=1, keepdims=True)
        if i > 0:
            g = g @ np.swapaxes(W[i], 1, 2)
    return loss, {"W": gW, "b": gb, "alpha": ga}


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([a.ravel() for key in ("W", "b", "alpha") for a in params[key]])


def unflatten(vec: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for key in ("W", "b", "alpha"):
        arrs = []
        for a in like[key]:
            arrs.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        out[key] = arrs
    return out


class _Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: [np.zeros_like(a) for a in v] for k, v in params.items()}
        self.v = {k: [np.zeros_like(a) for a in v] for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, plist in params.items():
            for p, g, m, v in zip(plist, grads[key], self.m[key], self.v[key]):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ErrorModel(RegressorMixin, BaseEstimator):
    """Per-joint PReLU MLP mapping ``(q, qd, qdd)`` to a torque correction.

    Parameters
    ----------
    n_joints : int
        Output dimensionality; one network per joint.
    hidden_layer_sizes : tuple of int
        Hidden widths; a final width-1 layer is always appended.
    prelu_alpha_init : float
        Initial negative slope of every PReLU (learned per layer).
    learning_rate, batch_size, epochs :
        Adam step size, minibatch size and passes per ``fit``.
    output_clamp : float
        Predictions are clipped to ``±output_clamp``.
    random_state : int or None
        Seed used when ``fit`` is called without an explicit generator.
    engine : {"numba", "numpy"}
        Compiled training loop or the plain numpy reference.
    scale_targets : bool
        Standardize targets as well as inputs.  Off means the network
        regresses raw torques.
    """

    def __init__(
        self,
        n_joints: int = 2,
        hidden_layer_sizes: tuple[int, ...] = DEFAULT_WIDTHS,
        prelu_alpha_init: float = 0.25,
        learning_rate: float = 1e-3,
        batch_size: int = 64,
        epochs: int = 20,
        output_clamp: float = 100.0,
        random_state: int | None = None,
        engine: str = "numba",
        scale_targets: bool = False,
    ):
        self.n_joints = n_joints
        self.hidden_layer_sizes = hidden_layer_sizes
        self.prelu_alpha_init = prelu_alpha_init
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.output_clamp = output_clamp
        self.random_state = random_state
        self.engine = engine
        self.scale_targets = scale_targets

    @property
    def iteration(self) -> int:
        return getattr(self, "iteration_", 0)

    @property
    def is_zero(self) -> bool:
        return self.iteration == 0 or not hasattr(self, "params_")

    @property
    def input_dim(self) -> int:
        return 3 * self.n_joints

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64, ensure_2d=False, ensure_min_samples=0)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input features, got {X.shape[1]}")
        return X

    def predict_raw(self, X) -> np.ndarray:
        """Unclamped predictions, shape ``(n_samples, n_joints)``."""
        X = self._check_X(X)
        if self.is_zero:
            return np.zeros((X.shape[0], self.n_joints))
        u = standardize(X, self.x_mean_, self.x_scale_)
        out = forward(self.params_, u).T
        return destandardize(out, self.y_mean_, self.y_scale_)

    def predict(self, X) -> np.ndarray:
        X = self._check_X(X)
        if self.is_zero:
            return np.zeros((X.shape[0], self.n_joints))
        return np.clip(self.predict_raw(X), -self.output_clamp, self.output_clamp)

    def predict_one(self, x: np.ndarray) -> np.ndarray:
        """Fast path for a single 1-d input inside the control loop."""
        if self.is_zero:
            return np.zeros(self.n_joints)
        u = (x - self.x_mean_) / self.x_scale_
        out = forward(self.params_, u[None, :])[:, 0]
        return np.clip(out * self.y_scale_ + self.y_mean_, -self.output_clamp, self.output_clamp)

    def _renormalize(self, x_mean, x_scale, y_mean, y_scale) -> None:
        """Swap in new standardization stats without changing the function."""
        W, b = self.params_["W"], self.params_["b"]
        shift = (x_mean - self.x_mean_) / self.x_scale_
        b[0] = b[0] + (shift[None, None, :] @ W[0])
        W[0] = W[0] * (x_scale / self.x_scale_)[None, :, None]
        ratio = self.y_scale_ / y_scale
        W[-1] = W[-1] * ratio[:, None, None]
        b[-1] = (b[-1] * self.y_scale_[:, None, None] + (self.y_mean_ - y_mean)[:, None, None]) / y_scale[:, None, None]
        self.x_mean_, self.x_scale_, self.y_mean_, self.y_scale_ = x_mean, x_scale, y_mean, y_scale

    def fit(self, X, Y, epochs: int | None = None, rng: np.random.Generator | None = None) -> "ErrorModel":
        """Warm-started minibatch Adam on mean squared torque error.

        Standardization statistics are recomputed from ``X``/``Y``; existing
        weights are re-expressed in the new coordinates first, so the model
        starts exactly where the previous iteration left it.
        """
        epochs = self.epochs if epochs is None else epochs
        if rng is None:
            rng = np.random.default_rng(self.random_state)
        X = self._check_X(X)
        Y = check_array(Y, dtype=np.float64, ensure_2d=False, ensure_min_samples=0)
        if Y.ndim == 1:
            Y = Y[:, None]
        if len(X) == 0:
            warnings.warn("empty dataset; model left unchanged", EmptyDatasetWarning, stacklevel=2)
            self.fit_skipped_ = True
            return self
        if Y.shape != (len(X), self.n_joints):
            raise ValueError(f"targets must have shape ({len(X)}, {self.n_joints}), got {Y.shape}")
        self.fit_skipped_ = False
        if epochs == 0:
            return self
        x_mean, x_scale = X.mean(axis=0), _safe_scale(X)
        if self.scale_targets:
            y_mean, y_scale = Y.mean(axis=0), _safe_scale(Y)
        else:
            y_mean, y_scale = np.zeros(self.n_joints), np.ones(self.n_joints)
        if self.is_zero:
            self.params_ = init_params(
                self.n_joints, self.input_dim, tuple(self.hidden_layer_sizes), self.prelu_alpha_init, rng
            )
            self.x_mean_, self.x_scale_, self.y_mean_, self.y_scale_ = x_mean, x_scale, y_mean, y_scale
        else:
            self._renormalize(x_mean, x_scale, y_mean, y_scale)
        u = standardize(X, x_mean, x_scale)
        v = standardize(Y, y_mean, y_scale)
        n, bs = len(u), self.batch_size
        perms = np.stack([rng.permutation(n) for _ in range(epochs)])
        if self.engine == "numba":
            flat = flatten(self.params_)
            _kernels.train_adam(flat, self.widths, self.n_joints, u, v, perms, bs, self.learning_rate, 0.9, 0.999, 1e-8)
            self.params_ = unflatten(flat, self.params_)
        elif self.engine == "numpy":
            opt = _Adam(self.params_, self.learning_rate)
            for order in perms:
                for start in range(0, n, bs):
                    idx = order[start : start + bs]
                    _, grads = loss_and_grad(self.params_, u[idx], v[idx])
                    opt.step(self.params_, grads)
        else:
            raise ValueError(f"unknown engine {self.engine!r}")
        self.iteration_ = self.iteration + 1
        return self

    @property
    def widths(self) -> np.ndarray:
        return np.array([self.input_dim, *self.hidden_layer_sizes, 1], dtype=np.int64)

    def flat_params(self) -> np.ndarray:
        """Parameters as one flat vector (layout of the compiled kernels)."""
        return flatten(self.params_)

    def loss(self, X, Y) -> float:
        """Mean over samples and joints of the squared clamped residual."""
        X = self._check_X(X)
        Y = np.asarray(Y, dtype=float).reshape(len(X), self.n_joints)
        if len(X) == 0:
            raise ValueError("loss of an empty dataset is undefined")
        return float(np.mean((Y - self.predict(X)) ** 2))

    def score(self, X, Y, sample_weight=None):
        return -self.loss(X, Y)

    # checkpoint I/O

    def save(self, path) -> Path:
        path = Path(path)
        meta = {
            "version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "iteration": self.iteration,
        }
        meta["params"]["hidden_layer_sizes"] = list(self.hidden_layer_sizes)
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        if not self.is_zero:
            for key in ("W", "b", "alpha"):
                for i, a in enumerate(self.params_[key]):
                    arrays[f"{key}{i}"] = a
            for name in ("x_mean_", "x_scale_", "y_mean_", "y_scale_"):
                arrays[name] = getattr(self, name)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "ErrorModel":
        with np.load(path) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            params = meta["params"]
            params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
            model = cls(**params)
            if meta["iteration"] > 0:
                n_layers = len(params["hidden_layer_sizes"]) + 1
                model.params_ = {
                    "W": [data[f"W{i}"] for i in range(n_layers)],
                    "b": [data[f"b{i}"] for i in range(n_layers)],
                    "alpha": [data[f"alpha{i}"] for i in range(n_layers - 1)],
                }
                for name in ("x_mean_", "x_scale_", "y_mean_", "y_scale_"):
                    setattr(model, name, data[name])
                model.iteration_ = meta["iteration"]
        return model


def predict(model: ErrorModel, x) -> np.ndarray:
    """Clamped torque correction for one input point (or a batch)."""
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    out = model.predict(arr)
    return out[0] if arr.ndim == 1 else out


def train(model: ErrorModel, data, epochs: int | None = None, rng: np.random.Generator | None = None) -> ErrorModel:
    """Return a trained copy of ``model``; the input model is not modified."""
    new = copy.deepcopy(model)
    return new.fit(data.X, data.Y, epochs=epochs, rng=rng)


def mse_loss(model: ErrorModel, data) -> float:
    if len(data) == 0:
        raise ValueError("loss of an empty dataset is undefined")
    return model.loss(data.X, data.Y)
