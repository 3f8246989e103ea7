"""Continual training over a sequence of time buckets.

Each bucket is scored with the current parameters before it is trained on,
so the ``pre_metric`` of bucket b measures forward transfer from buckets
``0..b-1`` only.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .bilevel import BilevelConfig, default_architecture, train_bilevel
from .data import TemporalDataset, bucketize
from .errors import ConfigError
from .harness import evaluate_metric, weight_profile
from .seeding import derive_seed
from .timescale import AgeNormalizer, ImportanceModel, Variant

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamConfig:
    n_buckets: int = 12
    passes_per_bucket: int = 5
    val_fraction: float = 0.10
    carry_params: bool = True
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)

    def __post_init__(self):
        if int(self.n_buckets) < 2:
            raise ConfigError("stream needs at least 2 buckets")
        if int(self.passes_per_bucket) < 1:
            raise ConfigError("passes_per_bucket must be >= 1")
        if not 0.0 < float(self.val_fraction) < 0.5:
            raise ConfigError("val_fraction must lie in (0, 0.5)")


@dataclass
class BucketRecord:
    bucket: int
    start_ts: float
    end_ts: float
    n_train: int
    n_val: int
    pre_metric: float
    post_train_metric: float
    post_val_metric: float
    epochs_run: int
    weight_profile: list

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StreamResult:
    records: list
    theta: nn.ModelParams
    importance: ImportanceModel

    def next_bucket_metrics(self) -> np.ndarray:
        """Pre-training metric of buckets 1..B-1 (bucket 0 is scored by the random init)."""
        return np.array([r.pre_metric for r in self.records[1:]])

    def mean_next_bucket_metric(self) -> float:
        return float(self.next_bucket_metrics().mean())


def split_bucket(bucket: TemporalDataset, val_fraction: float) -> tuple:
    """Oldest ``1 - val_fraction`` for training, newest ``val_fraction`` for validation."""
    n = len(bucket)
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n - n_val < 1:
        raise ConfigError(f"bucket of {n} instances is too small to split at {val_fraction}")
    return bucket.slice(0, n - n_val), bucket.slice(n - n_val, n)


def stream_train(dataset: TemporalDataset, cfg: StreamConfig, importance: ImportanceModel,
                 hidden: Sequence[int] = (32, 32), profile_buckets: int = 5,
                 evaluate=None) -> StreamResult:
    """Train sequentially over ``cfg.n_buckets`` buckets of ``dataset``.

    The uniform variant trains on the whole bucket (its newest slice doubles
    as the monitoring set); reweighting variants train on the older part and
    meta-learn on the newest slice.  Ages are normalized within the training
    span of each bucket, so they stay in [0, 1].  Each bucket runs exactly
    ``passes_per_bucket`` epochs without early stopping.
    """
    evaluate = evaluate or evaluate_metric
    buckets = bucketize(dataset, int(cfg.n_buckets))
    bcfg = dataclasses.replace(cfg.bilevel, epochs=int(cfg.passes_per_bucket), early_stop_patience=None)
    task = dataset.task
    n_out = max(dataset.n_classes, 2) if task == "classification" else 1
    arch = default_architecture(dataset.dim, n_out, hidden)
    init_seed = derive_seed(bcfg.seed, "init")
    theta = nn.mlp_init(arch, init_seed)
    fresh_importance = importance
    records = []
    for b, bucket in enumerate(buckets):
        pre = evaluate(theta, bucket)
        train_part, val_part = split_bucket(bucket, float(cfg.val_fraction))
        uniform = importance.variant == Variant.UNIFORM
        fit_part = bucket if uniform else train_part
        normalizer = AgeNormalizer.fit(fit_part.timestamps, bcfg.normalize_ages)
        if not cfg.carry_params:
            theta = nn.mlp_init(arch, init_seed)
            importance = fresh_importance
        res = train_bilevel(fit_part, val_part, importance, bcfg, theta0=theta, hidden=hidden,
                            normalizer=normalizer, check_order=not uniform)
        theta, importance = res.theta, res.importance
        records.append(BucketRecord(
            bucket=b, start_ts=float(bucket.timestamps[0]), end_ts=float(bucket.timestamps[-1]),
            n_train=len(fit_part), n_val=len(val_part), pre_metric=float(pre),
            post_train_metric=float(evaluate(theta, fit_part)),
            post_val_metric=float(evaluate(theta, val_part)), epochs_run=len(res.history.epochs),
            weight_profile=weight_profile(importance, fit_part, min(profile_buckets, len(fit_part)),
                                          normalizer)))
        logger.debug("bucket %d pre %.4f post-val %.4f", b, pre, records[-1].post_val_metric)
    return StreamResult(records, theta, importance)


def stream_config_from(run_cfg, bilevel: Optional[BilevelConfig] = None) -> StreamConfig:
    """Build a :class:`StreamConfig` from the ``stream`` section of a run config."""
    s = run_cfg.get("stream")
    return StreamConfig(n_buckets=int(s["n_buckets"]), passes_per_bucket=int(s["passes_per_bucket"]),
                        val_fraction=float(s["val_fraction"]), carry_params=bool(s["carry_params"]),
                        bilevel=bilevel or run_cfg.bilevel_config())
