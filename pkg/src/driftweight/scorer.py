"""Scorer network: instance -> positive mixing weights over timescales.

A dense ReLU network followed by softplus.  The output layer starts at zero
weights with a shared bias of ``softplus^-1(1/K)``, so an untrained scorer
emits the uniform mixture ``1/K`` for every input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DataError, TrainingError


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for ``y > 0``; ``y == 0`` maps to ``-inf``."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class ScorerParams:
    net: nn.ModelParams

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @property
    def out_dim(self) -> int:
        return self.net.out_dim

    @property
    def flat(self) -> np.ndarray:
        return self.net.flat

    def with_flat(self, flat) -> "ScorerParams":
        return ScorerParams(self.net.with_flat(flat))

    def output_bias_mask(self) -> np.ndarray:
        """Boolean mask selecting only the output-layer bias entries."""
        mask = np.zeros(self.net.size, dtype=bool)
        mask[-self.out_dim:] = True
        return mask


def scorer_init(input_dim: int, output_dim: int, hidden_sizes: Sequence[int] = (32, 32),
                seed: int = 0, scale: float = 1.0) -> ScorerParams:
    if input_dim < 1 or output_dim < 1:
        raise ConfigError("scorer dimensions must be positive")
    sizes = [int(input_dim), *[int(h) for h in hidden_sizes], int(output_dim)]
    base = nn.mlp_init(sizes, seed, scale)
    flat = np.array(base.flat)
    W_out = sizes[-2] * sizes[-1]
    flat[-(W_out + output_dim):-output_dim] = 0.0
    flat[-output_dim:] = softplus_inv(1.0 / output_dim)
    return ScorerParams(base.with_flat(flat))


def _pre(phi: ScorerParams, X):
    X = nn._check_input(phi.net, X)
    inputs, pres, out = nn._forward_cache(phi.net, X)
    return inputs, pres, out


def scorer_forward(phi: ScorerParams, features) -> np.ndarray:
    """Strictly positive outputs ``[n x K]``."""
    out = _pre(phi, features)[2]
    if not np.all(np.isfinite(out)):
        raise TrainingError("non-finite scorer output")
    return softplus(out)


def scorer_vjp(phi: ScorerParams, features, out_grad) -> np.ndarray:
    """Gradient of ``sum_n <g(x_n), out_grad_n>`` with respect to the scorer parameters.

    ``features`` may be a single vector with ``out_grad`` a K-vector, or a
    batch ``[n x d]`` with ``out_grad`` of shape ``[n x K]``.
    """
    X = np.asarray(features, dtype=np.float64)
    u = np.asarray(out_grad, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if u.ndim == 1:
        u = u[None, :]
    if u.shape != (X.shape[0], phi.out_dim):
        raise DataError(f"out_grad shape {u.shape} does not match ({X.shape[0]}, {phi.out_dim})")
    inputs, pres, out = _pre(phi, X)
    dpre = u * sigmoid(out)
    deltas = nn._backprop(phi.net, inputs, pres, dpre)
    return nn._grad_from_deltas(inputs, deltas)
