"""Bilevel training of the primary model (theta) and importance parameters (phi).

The inner problem is weighted-risk SGD on theta.  Every ``L`` theta-steps the
importance parameters take one step on the validation loss, using either

* the alternating (one-step unroll) hypergradient: a virtual SGD step
  ``theta_hat = theta - beta * grad L_tr`` followed by the exact derivative
  of ``L_val(theta_hat)`` with respect to phi, or
* the implicit hypergradient ``-g_val^T H^-1 d2L_tr/dtheta dphi`` with the
  inverse Hessian replaced by ``beta * sum_j (I - beta H)^j``.

Both reduce to per-instance coefficients ``s_i = <p, grad l_i>`` pushed
through the weight function, so per-example gradients are never stored.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import nn
from .data import TemporalDataset
from .errors import ConfigError, NumericalError, TrainingError
from .seeding import derive_seed, rng_for
from .timescale import AgeNormalizer, ImportanceModel, Variant, batch_weights

logger = logging.getLogger(__name__)

VARIANTS = ("alternating", "implicit")


@dataclass
class BilevelConfig:
    variant: str = "alternating"
    L: int = 5
    alpha: float = 1e-3
    beta: float = 1e-2
    neumann_terms: int = 50
    epochs: int = 30
    batch_size: int = 64
    meta_batch_size: int = 64
    seed: int = 0
    early_stop_patience: Optional[int] = 10
    hvp_step: float = 1e-4
    meta_clip: Optional[float] = None
    renormalize: bool = False
    freeze_scorer_body: bool = False
    normalize_ages: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"bilevel variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.L) < 1:
            raise ConfigError("L must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if int(self.neumann_terms) < 1:
            raise ConfigError("neumann_terms must be >= 1")
        if int(self.epochs) < 1 or int(self.batch_size) < 1 or int(self.meta_batch_size) < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if self.meta_clip is not None and not self.meta_clip > 0:
            raise ConfigError("meta_clip must be positive (or null to disable)")
        if self.early_stop_patience is not None and int(self.early_stop_patience) < 1:
            self.early_stop_patience = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_weighted_risk: float
    train_loss: float
    val_loss: float
    weight_mean: float
    weight_std: float
    weight_min: float
    weight_max: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    meta_val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    meta_steps: int = 0
    theta_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(r) for r in self.epochs],
            "meta_val_losses": list(self.meta_val_losses),
            "best_epoch": self.best_epoch,
            "meta_steps": self.meta_steps,
            "theta_steps": self.theta_steps,
        }


class TrainResult(NamedTuple):
    theta: nn.ModelParams
    importance: ImportanceModel
    history: TrainHistory


def _coefficients(s: np.ndarray, w: np.ndarray, renormalize: bool) -> np.ndarray:
    """Map ``s_i`` through the optional mean-1 weight renormalization."""
    if not renormalize:
        return s
    wbar = w.mean()
    return (s - (w * s).sum() / w.sum()) / wbar


def meta_grad_alternating(theta: nn.ModelParams, importance: ImportanceModel, train_batch: nn.Batch,
                          val_batch: nn.Batch, cfg: BilevelConfig, task: str) -> np.ndarray:
    """d/dphi of the validation loss after one virtual theta-step on ``train_batch``."""
    if len(val_batch) == 0:
        raise ConfigError("empty meta-set")
    w = batch_weights(importance, train_batch, cfg.renormalize)
    _, g_tr = nn.weighted_loss_and_grad(theta, train_batch, task, w)
    theta_hat = theta.with_flat(theta.flat - cfg.beta * g_tr)
    _, v = nn.weighted_loss_and_grad(theta_hat, val_batch, task)
    s = nn.per_example_dot(theta, train_batch, task, v)
    w_raw = batch_weights(importance, train_batch, False)
    coeff = _coefficients(s, w_raw, cfg.renormalize)
    n = len(train_batch)
    return -(cfg.beta / n) * importance.weight_vjp(train_batch.features, train_batch.ages, coeff)


def _apply_meta(importance: ImportanceModel, grad: np.ndarray, cfg: BilevelConfig) -> ImportanceModel:
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite meta-gradient")
    if cfg.freeze_scorer_body and importance.scorer is not None:
        grad = grad * importance.scorer.output_bias_mask()
    if cfg.meta_clip is not None:
        norm = np.linalg.norm(grad)
        if norm > cfg.meta_clip:
            grad = grad * (cfg.meta_clip / norm)
    if cfg.alpha == 0:
        return importance
    return importance.with_phi(importance.phi - cfg.alpha * grad)


def meta_step_alternating(theta: nn.ModelParams, importance: ImportanceModel, train_batch: nn.Batch,
                          val_batch: nn.Batch, cfg: BilevelConfig, task: str) -> ImportanceModel:
    if not importance.learnable:
        return importance
    grad = meta_grad_alternating(theta, importance, train_batch, val_batch, cfg, task)
    return _apply_meta(importance, grad, cfg)


def neumann_series(hvp: Callable[[np.ndarray], np.ndarray], v, beta: float, terms: int) -> np.ndarray:
    """``sum_{j<terms} (I - beta H)^j v`` given a Hessian-vector product.

    Raises :class:`NumericalError` when the term norm grows for 5 consecutive
    iterations.
    """
    v = np.asarray(v, dtype=np.float64)
    term = v.copy()
    p = v.copy()
    prev = np.linalg.norm(term)
    growing = 0
    for j in range(1, int(terms)):
        if prev == 0.0:
            break
        term = term - beta * hvp(term)
        norm = np.linalg.norm(term)
        if not np.isfinite(norm):
            raise NumericalError(f"Neumann series overflowed at term {j}; try a smaller beta")
        growing = growing + 1 if norm > prev else 0
        if growing >= 5:
            raise NumericalError(
                f"Neumann series diverging (term {j} norm {norm:.3g}); "
                "beta times the largest Hessian eigenvalue must stay below 2, try a smaller beta")
        p += term
        prev = norm
    return p


def neumann_ihvp(theta: nn.ModelParams, importance: ImportanceModel, train_batch: nn.Batch, v,
                 cfg: BilevelConfig, task: str) -> np.ndarray:
    """Neumann approximation of ``H^-1 v / beta`` for the weighted training loss."""
    w = batch_weights(importance, train_batch, cfg.renormalize)

    def hvp(u):
        return nn.hvp_fd(theta, train_batch, u, cfg.hvp_step, task, w)

    return neumann_series(hvp, v, cfg.beta, cfg.neumann_terms)


def meta_grad_implicit(theta_star: nn.ModelParams, importance: ImportanceModel, train_batch: nn.Batch,
                       val_batch: nn.Batch, cfg: BilevelConfig, task: str) -> np.ndarray:
    """Implicit-function hypergradient of the validation loss at ``theta_star``."""
    if len(val_batch) == 0:
        raise ConfigError("empty meta-set")
    _, g_val = nn.weighted_loss_and_grad(theta_star, val_batch, task)
    if not np.any(g_val):
        return np.zeros_like(importance.phi)
    p = neumann_ihvp(theta_star, importance, train_batch, g_val, cfg, task)
    s = nn.per_example_dot(theta_star, train_batch, task, p)
    w_raw = batch_weights(importance, train_batch, False)
    coeff = _coefficients(s, w_raw, cfg.renormalize)
    n = len(train_batch)
    return -(cfg.beta / n) * importance.weight_vjp(train_batch.features, train_batch.ages, coeff)


def meta_step_implicit(theta_star, importance, train_batch, val_batch, cfg, task) -> ImportanceModel:
    if not importance.learnable:
        return importance
    grad = meta_grad_implicit(theta_star, importance, train_batch, val_batch, cfg, task)
    return _apply_meta(importance, grad, cfg)


def default_architecture(dim: int, n_out: int, hidden: Sequence[int]) -> list:
    return [int(dim), *[int(h) for h in hidden], int(n_out)]


def _epoch_stats(theta, importance, train_all, val_all, cfg, task, epoch) -> EpochRecord:
    losses = nn.per_example_losses(theta, train_all, task)
    w = batch_weights(importance, train_all, cfg.renormalize)
    val = nn.loss_eval(theta, val_all, task)
    rec = EpochRecord(epoch, float((w * losses).mean()), float(losses.mean()), val,
                      float(w.mean()), float(w.std()), float(w.min()), float(w.max()))
    if not all(np.isfinite(x) for x in (rec.train_weighted_risk, rec.val_loss)):
        raise TrainingError(f"non-finite loss at epoch {epoch}")
    return rec


def train_bilevel(train_set: TemporalDataset, val_set: TemporalDataset, importance: ImportanceModel,
                  cfg: BilevelConfig, theta0: Optional[nn.ModelParams] = None,
                  hidden: Sequence[int] = (32, 32), normalizer: Optional[AgeNormalizer] = None,
                  record_meta: bool = False, check_order: bool = True) -> TrainResult:
    """Fit theta on ``train_set`` while meta-learning the importance parameters on ``val_set``.

    Non-learnable variants (uniform, linear, exp) skip meta steps and reduce
    to weighted SGD.  Returns the parameters from the epoch with the lowest
    validation loss when early stopping is enabled, else the final ones.
    ``check_order=False`` allows a validation set that overlaps the training
    span (used by the stream baseline, which trains on the whole bucket).
    """
    if len(val_set) == 0:
        raise ConfigError("empty meta-set")
    if check_order and val_set.timestamps[0] < train_set.timestamps[-1]:
        raise ConfigError("validation data must not be older than training data")
    task = train_set.task
    normalizer = normalizer or AgeNormalizer.fit(train_set.timestamps, cfg.normalize_ages)
    train_all = train_set.to_batch(normalizer)
    val_all = val_set.to_batch()
    if theta0 is None:
        n_out = max(train_set.n_classes, val_set.n_classes, 2) if task == "classification" else 1
        theta0 = nn.mlp_init(default_architecture(train_set.dim, n_out, hidden),
                             derive_seed(cfg.seed, "init"))
    theta = theta0
    if importance.learnable:
        importance = importance.with_phi(importance.phi)
    batch_rng = rng_for(cfg.seed, "batches")
    meta_rng = rng_for(cfg.seed, "meta")
    meta = meta_step_alternating if cfg.variant == "alternating" else meta_step_implicit
    n, n_val = len(train_set), len(val_set)
    history = TrainHistory()
    best = (np.inf, theta, importance, -1)
    since_best = 0
    step = 0
    for epoch in range(int(cfg.epochs)):
        perm = batch_rng.permutation(n)
        for start in range(0, n, int(cfg.batch_size)):
            batch = train_all.take(perm[start:start + int(cfg.batch_size)])
            if importance.learnable and step > 0 and step % int(cfg.L) == 0:
                mb = min(int(cfg.meta_batch_size), n_val)
                val_batch = val_all.take(np.sort(meta_rng.choice(n_val, size=mb, replace=False)))
                if record_meta:
                    history.meta_val_losses.append(nn.loss_eval(theta, val_all, task))
                importance = meta(theta, importance, batch, val_batch, cfg, task)
                history.meta_steps += 1
            _, g = (nn.weighted_loss_and_grad(theta, batch, task)
                    if importance.variant == Variant.UNIFORM
                    else nn.weighted_loss_and_grad(theta, batch, task,
                                                   batch_weights(importance, batch, cfg.renormalize)))
            try:
                theta = nn.sgd_step(theta, g, cfg.beta)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {start // int(cfg.batch_size)}: {exc}") from None
            step += 1
        rec = _epoch_stats(theta, importance, train_all, val_all, cfg, task, epoch)
        history.epochs.append(rec)
        logger.debug("epoch %d val %.4f train %.4f", epoch, rec.val_loss, rec.train_loss)
        if cfg.early_stop_patience is not None:
            if rec.val_loss < best[0]:
                best = (rec.val_loss, theta, importance, epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= int(cfg.early_stop_patience):
                    break
    history.theta_steps = step
    if cfg.early_stop_patience is not None:
        history.best_epoch = best[3]
        return TrainResult(best[1], best[2], history)
    history.best_epoch = len(history.epochs) - 1
    return TrainResult(theta, importance, history)
