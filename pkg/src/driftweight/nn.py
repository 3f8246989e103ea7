"""Dense feed-forward networks with hand-written backpropagation.

Parameters live in one flat float64 vector, laid out layer-major::

    [W_0 (in_0 x out_0, row-major), b_0 (out_0), W_1, b_1, ...]

Hidden layers use ReLU (or tanh); the last layer is linear.  Softmax is
folded into the cross-entropy loss.  Every function here is pure: parameter
objects are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, TrainingError

TASKS = ("classification", "regression")
ACTIVATIONS = ("relu", "tanh")


def n_params(layer_sizes: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the architecture needed to read it."""

    layer_sizes: tuple
    flat: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        flat = np.asarray(self.flat, dtype=np.float64).ravel()
        if flat.size != n_params(sizes):
            raise ConfigError(
                f"flat vector has {flat.size} entries, layer sizes {sizes} need {n_params(sizes)}"
            )
        if not np.all(np.isfinite(flat)):
            raise TrainingError("non-finite entries in parameter vector")
        if not flat.flags.writeable and flat.dtype == np.float64:
            object.__setattr__(self, "flat", flat)
        else:
            object.__setattr__(self, "flat", _readonly(flat))

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (W, b) views for each layer."""
        yield from _unflatten(self.flat, self.layer_sizes)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.layer_sizes, flat, self.activation)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.activation == other.activation
            and np.array_equal(self.flat, other.flat)
        )


def _unflatten(flat, sizes):
    off = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = flat[off:off + a * b].reshape(a, b)
        off += a * b
        bias = flat[off:off + b]
        off += b
        yield W, bias


@dataclass(frozen=True, eq=False)
class Batch:
    """Features ``[n x d]``, labels ``[n]`` and optional training ages ``[n]``."""

    features: np.ndarray
    labels: np.ndarray
    ages: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataError("batch needs a non-empty [n x d] feature matrix")
        y = np.asarray(self.labels)
        if y.shape[0] != X.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.ages is not None:
            ages = np.asarray(self.ages, dtype=np.float64).ravel()
            if ages.shape[0] != X.shape[0]:
                raise DataError("ages length does not match batch size")
            if not np.all(np.isfinite(ages)):
                raise DataError("non-finite ages")
            object.__setattr__(self, "ages", ages)

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "Batch":
        ages = None if self.ages is None else self.ages[idx]
        return Batch(self.features[idx], self.labels[idx], ages)


def mlp_init(layer_sizes: Sequence[int], seed: int, scale: float = 1.0,
             activation: str = "relu") -> ModelParams:
    """Seeded uniform(-scale/sqrt(fan_in), +scale/sqrt(fan_in)) weights, zero biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) != s or s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be >= 2 positive integers, got {sizes}")
    if not scale > 0:
        raise ConfigError("init scale must be positive")
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = scale / np.sqrt(a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(np.zeros(b))
    return ModelParams(tuple(sizes), np.concatenate(chunks), activation)


def _check_input(params: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise DataError(f"expected features with {params.in_dim} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite input features")
    return X


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _forward_cache(params: ModelParams, X: np.ndarray):
    """Return layer inputs, pre-activations and the network output."""
    inputs, pres = [], []
    a = X
    layers = list(params.layers())
    for i, (W, b) in enumerate(layers):
        inputs.append(a)
        # overflow surfaces as a non-finite loss or gradient, reported by the caller
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ W + b
        pres.append(z)
        a = z if i == len(layers) - 1 else _act(z, params.activation)
    return inputs, pres, a


def _backprop(params: ModelParams, inputs, pres, dout):
    """Per-layer row-wise deltas dL/dz for the given output gradient rows."""
    layers = list(params.layers())
    deltas = [None] * len(layers)
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = d
        if i > 0:
            W = layers[i][0]
            a_prev = inputs[i]
            d = (d @ W.T) * _act_grad(pres[i - 1], a_prev, params.activation)
    return deltas


def _grad_from_deltas(inputs, deltas) -> np.ndarray:
    parts = []
    for a, d in zip(inputs, deltas):
        parts.append((a.T @ d).ravel())
        parts.append(d.sum(axis=0))
    return np.concatenate(parts)


def forward(params: ModelParams, features) -> np.ndarray:
    """Network outputs ``[n x out_dim]`` (logits for classification)."""
    X = _check_input(params, features)
    return _forward_cache(params, X)[2]


def _loss_rows(out: np.ndarray, labels, task: str):
    """Per-example losses and d loss_i / d out_i."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if not np.all(np.isfinite(out)):
        raise TrainingError("non-finite network outputs")
    n = out.shape[0]
    if task == "classification":
        y = np.asarray(labels)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError("classification labels must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= out.shape[1]):
            raise DataError(f"label out of range [0, {out.shape[1]})")
        m = out.max(axis=1, keepdims=True)
        ez = np.exp(out - m)
        s = ez.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        losses = (np.log(s[:, 0]) + m[:, 0]) - out[rows, y]
        dout = ez / s
        dout[rows, y] -= 1.0
        return losses, dout
    y = np.asarray(labels, dtype=np.float64).reshape(n, -1)
    if y.shape[1] != out.shape[1]:
        raise DataError("regression target width does not match network output")
    r = out - y
    return (r * r).sum(axis=1), 2.0 * r


def per_example_losses(params: ModelParams, batch: Batch, task: str) -> np.ndarray:
    out = forward(params, batch.features)
    return _loss_rows(out, batch.labels, task)[0]


def loss_eval(params: ModelParams, batch: Batch, task: str) -> float:
    """Mean cross-entropy (classification) or squared error (regression)."""
    return float(per_example_losses(params, batch, task).mean())


def weighted_loss_and_grad(params: ModelParams, batch: Batch, task: str,
                           weights: Optional[np.ndarray] = None):
    """``(1/n) sum_i w_i l_i`` and its gradient in one forward/backward pass.

    ``weights=None`` means plain ERM.
    """
    X = _check_input(params, batch.features)
    inputs, pres, out = _forward_cache(params, X)
    losses, dout = _loss_rows(out, batch.labels, task)
    n = X.shape[0]
    if weights is None:
        value = losses.mean()
        dout = dout / n
    else:
        w = np.asarray(weights, dtype=np.float64)
        value = (w * losses).sum() / n
        dout = dout * (w[:, None] / n)
    grad = _grad_from_deltas(inputs, _backprop(params, inputs, pres, dout))
    return float(value), grad


def grad_mean(params: ModelParams, batch: Batch, task: str) -> np.ndarray:
    return weighted_loss_and_grad(params, batch, task)[1]


def grads_per_example(params: ModelParams, batch: Batch, task: str) -> np.ndarray:
    """Row ``i`` is the gradient of ``l_i`` alone, shape ``[n x n_params]``."""
    X = _check_input(params, batch.features)
    inputs, pres, out = _forward_cache(params, X)
    dout = _loss_rows(out, batch.labels, task)[1]
    deltas = _backprop(params, inputs, pres, dout)
    parts = []
    for a, d in zip(inputs, deltas):
        parts.append(np.einsum("ni,nj->nij", a, d).reshape(len(a), -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def per_example_dot(params: ModelParams, batch: Batch, task: str, vector) -> np.ndarray:
    """``s_i = <vector, grad l_i>`` for every example without materialising the gradients."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != params.flat.shape:
        raise ConfigError("vector length must equal parameter count")
    X = _check_input(params, batch.features)
    inputs, pres, out = _forward_cache(params, X)
    dout = _loss_rows(out, batch.labels, task)[1]
    deltas = _backprop(params, inputs, pres, dout)
    s = np.zeros(X.shape[0])
    for (Vw, vb), a, d in zip(_unflatten(v, params.layer_sizes), inputs, deltas):
        s += np.einsum("ij,nj,ni->n", Vw, d, a) + d @ vb
    return s


def hvp_fd(params: ModelParams, batch: Batch, vector, step: float = 1e-4,
           task: str = "classification", weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Central-difference Hessian-vector product of the (weighted) mean loss."""

    def grad(flat):
        return weighted_loss_and_grad(params.with_flat(flat), batch, task, weights)[1]

    return hvp_fd_fn(grad, params.flat, vector, step)


def hvp_fd_fn(grad_fn, theta: np.ndarray, vector, step: float = 1e-4) -> np.ndarray:
    """``(g(theta + e v) - g(theta - e v)) / 2e`` with ``e = step / (|v| + tiny)``."""
    v = np.asarray(vector, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("hvp needs a non-empty vector")
    if v.shape != np.shape(theta):
        raise ConfigError("vector length must equal parameter count")
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    eps = step / (norm + 1e-300)
    return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)


def sgd_step(params: ModelParams, gradient, lr: float) -> ModelParams:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ConfigError("gradient length must equal parameter count")
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise TrainingError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    return params.with_flat(params.flat - lr * g)
