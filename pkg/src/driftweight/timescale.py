"""Temporal importance weights and the weighted empirical risk.

Weights are functions of instance age (time before the end of the training
window) and, for the scorer-based variants, of the instance itself.  The
exponential variants share a fixed basis of decay rates ``a_k = a0**k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigError, DataError, TrainingError
from .scorer import ScorerParams, scorer_forward, scorer_vjp, sigmoid, softplus, softplus_inv

WEIGHT_FLOOR = 1e-6


class Variant(str, Enum):
    UNIFORM = "uniform"
    LINEAR = "linear"
    SINGLE_EXP = "exp"
    MIX_EXP = "mixexp"
    INST = "inst"
    INST_TIME = "inst_time"
    INST_MIX_EXP = "instmixexp"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"erm": "uniform", "single_exp": "exp", "mix_exp": "mixexp",
                   "inst_mix_exp": "instmixexp", "insttime": "inst_time"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown importance variant {name!r}") from None


SCORED = (Variant.INST, Variant.INST_TIME, Variant.INST_MIX_EXP)
LEARNED = (Variant.MIX_EXP, *SCORED)


@dataclass(frozen=True)
class TimescaleBasis:
    a0: float = 2.0
    K: int = 16

    def __post_init__(self):
        if not (np.isfinite(self.a0) and self.a0 > 1):
            raise ConfigError(f"basis a0 must be > 1, got {self.a0}")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"basis K must be a positive integer, got {self.K}")

    @property
    def rates(self) -> np.ndarray:
        return float(self.a0) ** np.arange(1, int(self.K) + 1, dtype=np.float64)


def make_basis(a0: float, K: int) -> TimescaleBasis:
    return TimescaleBasis(float(a0), int(K))


def basis_eval(basis: TimescaleBasis, age) -> np.ndarray:
    """``exp(-a_k * age)``; scalar age gives a K-vector, ``[n]`` ages give ``[n x K]``.

    Very old instances underflow to exactly 0 for the fast rates.
    """
    ages = np.asarray(age, dtype=np.float64)
    if np.any(ages < 0) or not np.all(np.isfinite(ages) | (ages == np.inf)):
        raise DataError("basis ages must be non-negative")
    with np.errstate(under="ignore"):
        return np.exp(-np.multiply.outer(ages, basis.rates))


@dataclass(frozen=True)
class AgeNormalizer:
    """Maps timestamps to ``(t_end - t) / window`` (or ``t_end - t`` when not normalizing)."""

    t_end: float
    window: float
    normalize: bool = True

    def __post_init__(self):
        if not self.window > 0:
            raise ConfigError("age window must be positive")

    @classmethod
    def fit(cls, timestamps, normalize: bool = True) -> "AgeNormalizer":
        ts = np.asarray(timestamps, dtype=np.float64)
        t_end, t_start = float(ts.max()), float(ts.min())
        # a single-timestamp window has every age at 0; any positive window works
        window = t_end - t_start if t_end > t_start else 1.0
        return cls(t_end, window, normalize)

    def ages(self, timestamps) -> np.ndarray:
        raw = self.t_end - np.asarray(timestamps, dtype=np.float64)
        return raw / self.window if self.normalize else raw


@dataclass(frozen=True, eq=False)
class ImportanceModel:
    """One of the seven weighting schemes.

    Learned variants expose a flat parameter vector ``phi``: the scorer
    weights, or ``softplus^-1(z)`` for MIX_EXP.
    """

    variant: Variant
    basis: Optional[TimescaleBasis] = None
    slope: float = 0.0
    lam: float = 0.0
    z: Optional[np.ndarray] = None
    scorer: Optional[ScorerParams] = None
    floor: float = WEIGHT_FLOOR
    _phi: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        v = Variant.parse(self.variant) if not isinstance(self.variant, Variant) else self.variant
        object.__setattr__(self, "variant", v)
        if not self.floor > 0:
            raise ConfigError("weight floor must be positive")
        if v in (Variant.MIX_EXP, Variant.INST_MIX_EXP) and self.basis is None:
            raise ConfigError(f"{v.value} needs a timescale basis")
        if v == Variant.LINEAR and self.slope < 0:
            raise ConfigError("linear slope must be non-negative")
        if v == Variant.SINGLE_EXP and self.lam < 0:
            raise ConfigError("exponential rate must be non-negative")
        if v == Variant.MIX_EXP:
            z = np.asarray(self.z, dtype=np.float64)
            if z.shape != (self.basis.K,):
                raise ConfigError(f"mixing weights need shape ({self.basis.K},)")
            if np.any(z < 0) or not np.any(z > 0) or not np.all(np.isfinite(z)):
                raise ConfigError("mixing weights must be finite, >= 0, with one > 0")
            object.__setattr__(self, "z", z)
        if v in SCORED:
            if self.scorer is None:
                raise ConfigError(f"{v.value} needs a scorer")
            want = self.basis.K if v == Variant.INST_MIX_EXP else 1
            if self.scorer.out_dim != want:
                raise ConfigError(f"{v.value} scorer must output {want} values")

    # constructors
    @classmethod
    def uniform(cls):
        return cls(Variant.UNIFORM)

    @classmethod
    def linear(cls, slope: float):
        return cls(Variant.LINEAR, slope=float(slope))

    @classmethod
    def single_exp(cls, lam: float):
        return cls(Variant.SINGLE_EXP, lam=float(lam))

    @classmethod
    def mix_exp(cls, z, basis: TimescaleBasis):
        return cls(Variant.MIX_EXP, basis=basis, z=z)

    @classmethod
    def inst(cls, scorer: ScorerParams, time_input: bool = False):
        return cls(Variant.INST_TIME if time_input else Variant.INST, scorer=scorer)

    @classmethod
    def inst_mix_exp(cls, scorer: ScorerParams, basis: TimescaleBasis):
        return cls(Variant.INST_MIX_EXP, basis=basis, scorer=scorer)

    @property
    def learnable(self) -> bool:
        return self.variant in LEARNED

    @property
    def phi(self) -> np.ndarray:
        if self.variant == Variant.MIX_EXP:
            return self._phi if self._phi is not None else softplus_inv(self.z)
        if self.variant in SCORED:
            return self.scorer.flat
        return np.zeros(0)

    def with_phi(self, phi) -> "ImportanceModel":
        phi = np.asarray(phi, dtype=np.float64)
        if self.variant == Variant.MIX_EXP:
            return replace(self, z=softplus(phi), _phi=phi.copy())
        if self.variant in SCORED:
            return replace(self, scorer=self.scorer.with_flat(phi))
        if phi.size:
            raise ConfigError(f"{self.variant.value} has no learnable parameters")
        return self

    def _scorer_input(self, X, ages):
        if self.variant == Variant.INST_TIME:
            return np.column_stack([X, ages])
        return X

    def raw_weights(self, features, ages) -> np.ndarray:
        ages = np.asarray(ages, dtype=np.float64).ravel()
        n = ages.shape[0]
        v = self.variant
        if v == Variant.UNIFORM:
            return np.ones(n)
        if v == Variant.LINEAR:
            return 1.0 - self.slope * ages
        if v == Variant.SINGLE_EXP:
            return np.exp(-self.lam * ages)
        if v == Variant.MIX_EXP:
            return (np.broadcast_to(self.z, (n, self.basis.K)) * basis_eval(self.basis, ages)).sum(axis=1)
        X = np.asarray(features, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[0] != n:
            raise DataError("features and ages disagree on batch size")
        g = scorer_forward(self.scorer, self._scorer_input(X, ages))
        if v == Variant.INST_MIX_EXP:
            return (g * basis_eval(self.basis, ages)).sum(axis=1)
        return g[:, 0]

    def weights(self, features, ages) -> np.ndarray:
        w = self.raw_weights(features, ages)
        if not np.all(np.isfinite(w)):
            raise TrainingError("non-finite importance weights")
        return np.maximum(w, self.floor)

    def weight_vjp(self, features, ages, coeff) -> np.ndarray:
        """Gradient of ``sum_i coeff_i * w_i`` with respect to ``phi``.

        Instances clamped at the weight floor contribute nothing.
        """
        if not self.learnable:
            return np.zeros(0)
        ages = np.asarray(ages, dtype=np.float64).ravel()
        c = np.asarray(coeff, dtype=np.float64) * (self.raw_weights(features, ages) > self.floor)
        if self.variant == Variant.MIX_EXP:
            u = c[:, None] * basis_eval(self.basis, ages)
            return (u * sigmoid(self.phi)).sum(axis=0)
        X = np.asarray(features, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if self.variant == Variant.INST_MIX_EXP:
            u = c[:, None] * basis_eval(self.basis, ages)
        else:
            u = c[:, None]
        return scorer_vjp(self.scorer, self._scorer_input(X, ages), u)


def importance_weight(model: ImportanceModel, features, age) -> np.ndarray:
    """Floored importance weights for a batch (or a single instance)."""
    scalar = np.ndim(age) == 0
    w = model.weights(features, np.atleast_1d(age))
    return float(w[0]) if scalar else w


def batch_weights(model: ImportanceModel, batch: nn.Batch, renormalize: bool = False) -> np.ndarray:
    if batch.ages is None:
        raise DataError("training batch has no ages")
    w = model.weights(batch.features, batch.ages)
    return w / w.mean() if renormalize else w


def weighted_risk(params: nn.ModelParams, model: ImportanceModel, batch: nn.Batch, task: str,
                  renormalize: bool = False) -> float:
    """``(1/N) sum_i w_i l_i``; equals the plain mean loss under UNIFORM."""
    if len(batch) == 0:
        raise DataError("empty dataset")
    if model.variant == Variant.UNIFORM:
        return nn.loss_eval(params, batch, task)
    w = batch_weights(model, batch, renormalize)
    return float((w * nn.per_example_losses(params, batch, task)).sum() / len(batch))


def weighted_risk_grad(params: nn.ModelParams, model: ImportanceModel, batch: nn.Batch,
                       task: str, renormalize: bool = False):
    """Value and theta-gradient of :func:`weighted_risk`."""
    if model.variant == Variant.UNIFORM:
        return nn.weighted_loss_and_grad(params, batch, task)
    return nn.weighted_loss_and_grad(params, batch, task, batch_weights(model, batch, renormalize))
