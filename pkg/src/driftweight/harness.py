"""Evaluation: metrics, decay curves, weight profiles, method comparison, reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .bilevel import TrainResult, train_bilevel
from .config import RunConfig
from .data import TemporalDataset, TemporalSplit, bucketize
from .errors import ConfigError, DataError, DriftWeightError
from .scorer import ScorerParams
from .timescale import AgeNormalizer, ImportanceModel, TimescaleBasis, Variant, importance_weight

logger = logging.getLogger(__name__)


def evaluate_metric(params: nn.ModelParams, dataset: TemporalDataset, task: Optional[str] = None) -> float:
    """Accuracy for classification, RMSE for regression."""
    task = task or dataset.task
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    out = nn.forward(params, dataset.features)
    if task == "classification":
        return float(np.mean(out.argmax(axis=1) == dataset.labels))
    return float(np.sqrt(np.mean((out[:, 0] - dataset.labels) ** 2)))


def metric_name(task: str) -> str:
    return "accuracy" if task == "classification" else "rmse"


@dataclass
class Window:
    window_index: int
    start_ts: float
    end_ts: float
    metric: float
    n: int


@dataclass
class DecayCurve:
    windows: list
    metric: str

    def values(self) -> np.ndarray:
        return np.array([w.metric for w in self.windows])

    def slope(self) -> float:
        """Least-squares slope of the metric against window index."""
        y = self.values()
        if len(y) < 2:
            return 0.0
        return float(np.polyfit(np.arange(len(y)), y, 1)[0])

    def to_dict(self) -> dict:
        return {"metric": self.metric, "windows": [asdict(w) for w in self.windows]}

    @classmethod
    def from_dict(cls, d: dict) -> "DecayCurve":
        return cls([Window(**w) for w in d["windows"]], d["metric"])


def decay_curve(params: nn.ModelParams, test_set: TemporalDataset, n_windows: int) -> DecayCurve:
    """Frozen-parameter metric on successive equal-count windows of ``test_set``."""
    if n_windows < 1:
        raise ConfigError("n_windows must be >= 1")
    windows = []
    for i, part in enumerate(bucketize(test_set, n_windows)):
        windows.append(Window(i, float(part.timestamps[0]), float(part.timestamps[-1]),
                              evaluate_metric(params, part), len(part)))
    return DecayCurve(windows, metric_name(test_set.task))


def weight_profile(importance: ImportanceModel, train_set: TemporalDataset, n_buckets: int,
                   normalizer: Optional[AgeNormalizer] = None) -> list:
    """Mean and std of importance weights per age bucket, newest bucket first."""
    normalizer = normalizer or AgeNormalizer.fit(train_set.timestamps)
    rows = []
    for part in reversed(bucketize(train_set, n_buckets)):
        ages = normalizer.ages(part.timestamps)
        w = importance_weight(importance, part.features, ages)
        rows.append({"bucket": len(rows), "mean_age": float(ages.mean()), "mean": float(w.mean()),
                     "std": float(w.std()), "n": len(part)})
    return rows


# serialization of trained artifacts

def importance_to_dict(m: ImportanceModel) -> dict:
    d = {"variant": m.variant.value, "floor": m.floor}
    if m.basis is not None:
        d["basis"] = {"a0": m.basis.a0, "K": m.basis.K}
    if m.variant == Variant.LINEAR:
        d["slope"] = m.slope
    if m.variant == Variant.SINGLE_EXP:
        d["lambda"] = m.lam
    if m.variant == Variant.MIX_EXP:
        d["z"] = [float(x) for x in m.z]
    if m.scorer is not None:
        d["scorer"] = params_to_dict(m.scorer.net)
    return d


def importance_from_dict(d: dict) -> ImportanceModel:
    basis = TimescaleBasis(**d["basis"]) if "basis" in d else None
    scorer = ScorerParams(params_from_dict(d["scorer"])) if "scorer" in d else None
    z = np.array(d["z"]) if "z" in d else None
    return ImportanceModel(Variant(d["variant"]), basis=basis, slope=d.get("slope", 0.0),
                           lam=d.get("lambda", 0.0), z=z, scorer=scorer, floor=d.get("floor", 1e-6))


def params_to_dict(p: nn.ModelParams) -> dict:
    return {"layer_sizes": list(p.layer_sizes), "activation": p.activation,
            "flat": [float(x) for x in p.flat]}


def params_from_dict(d: dict) -> nn.ModelParams:
    return nn.ModelParams(tuple(d["layer_sizes"]), np.array(d["flat"], dtype=np.float64),
                          d.get("activation", "relu"))


def dump_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def save_checkpoint(path, theta: nn.ModelParams, importance: ImportanceModel,
                    normalizer: AgeNormalizer, task: str, config: Optional[dict] = None) -> None:
    dump_json({
        "format": "driftweight-checkpoint/1",
        "task": task,
        "theta": params_to_dict(theta),
        "importance": importance_to_dict(importance),
        "normalizer": {"t_end": normalizer.t_end, "window": normalizer.window,
                       "normalize": normalizer.normalize},
        "config": config or {},
    }, path)


def load_checkpoint(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return {
        "task": d["task"],
        "theta": params_from_dict(d["theta"]),
        "importance": importance_from_dict(d["importance"]),
        "normalizer": AgeNormalizer(**d["normalizer"]),
        "config": d.get("config", {}),
    }


# comparison

@dataclass
class MethodResult:
    name: str
    variant: str
    status: str = "ok"
    error: Optional[str] = None
    test_metric: Optional[float] = None
    val_loss: Optional[float] = None
    tuned: dict = field(default_factory=dict)
    curve: Optional[DecayCurve] = None
    weight_profile: list = field(default_factory=list)
    relative_gain: Optional[float] = None
    error_rate: Optional[float] = None
    relative_error_reduction: Optional[float] = None
    epochs_run: int = 0
    best_epoch: int = -1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = self.curve.to_dict() if self.curve else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodResult":
        d = dict(d)
        d["curve"] = DecayCurve.from_dict(d["curve"]) if d.get("curve") else None
        return cls(**d)


@dataclass
class ComparisonReport:
    methods: list
    baseline: str
    metric: str
    split_fingerprint: str
    config_fingerprint: str
    seeds: dict
    config: dict = field(default_factory=dict)
    gain_definition: str = ("relative_gain = (method - baseline) / baseline on the test metric; "
                            "relative_error_reduction = (baseline_error - method_error) / baseline_error "
                            "(classification only)")

    def by_name(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "methods": [m.to_dict() for m in self.methods],
            "baseline": self.baseline,
            "metric": self.metric,
            "split_fingerprint": self.split_fingerprint,
            "config_fingerprint": self.config_fingerprint,
            "seeds": dict(self.seeds),
            "config": self.config,
            "gain_definition": self.gain_definition,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        d = dict(d)
        d["methods"] = [MethodResult.from_dict(m) for m in d["methods"]]
        return cls(**d)


def _best_val(result: TrainResult) -> float:
    return result.history.epochs[result.history.best_epoch].val_loss


def fit_method(split: TemporalSplit, method: str, cfg: RunConfig) -> tuple:
    """Train one method, grid-searching its scalar when not fixed in the config.

    Returns ``(TrainResult, tuned_scalars)``.
    """
    variant = Variant.parse(method)
    bcfg = cfg.bilevel_config()
    hidden = cfg.get("model.hidden")
    dim = split.train.dim
    grid_key, cfg_key, kw = {
        Variant.SINGLE_EXP: ("importance.lambda_grid", "importance.lambda", "lam"),
        Variant.LINEAR: ("importance.slope_grid", "importance.slope", "slope"),
    }.get(variant, (None, None, None))
    if grid_key is None or cfg.get(cfg_key) is not None:
        imp = cfg.build_importance(variant, dim)
        tuned = {kw: float(cfg.get(cfg_key))} if kw else {}
        return train_bilevel(split.train, split.val, imp, bcfg, hidden=hidden), tuned
    best = None
    for value in cfg.get(grid_key):
        imp = cfg.build_importance(variant, dim, **{kw: value})
        res = train_bilevel(split.train, split.val, imp, bcfg, hidden=hidden)
        if best is None or _best_val(res) < _best_val(best[0]):
            best = (res, {kw: float(value)})
    return best


def _run_one(args):
    split, method, tree = args
    cfg = RunConfig(tree)
    name = method
    try:
        variant = Variant.parse(method)
        res, tuned = fit_method(split, method, cfg)
    except DriftWeightError as exc:
        logger.warning("method %s failed: %s", method, exc)
        return MethodResult(name, method, status="failed", error=str(exc))
    curve = decay_curve(res.theta, split.test, int(cfg.get("harness.n_windows")))
    profile = weight_profile(res.importance, split.train, int(cfg.get("harness.weight_buckets")),
                             AgeNormalizer.fit(split.train.timestamps, cfg.get("importance.normalize_ages")))
    return MethodResult(
        name, variant.value, test_metric=evaluate_metric(res.theta, split.test),
        val_loss=_best_val(res), tuned=tuned, curve=curve, weight_profile=profile,
        epochs_run=len(res.history.epochs), best_epoch=res.history.best_epoch)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DRIFTWEIGHT_THREADS", "1")))
    except ValueError:
        return 1


def compare_methods(split: TemporalSplit, methods: Sequence[str], cfg: RunConfig) -> ComparisonReport:
    """Train every method on the same split with the same seeds and compare test metrics.

    A method that fails is reported with ``status="failed"``; the others still run.
    """
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    for m in methods:
        Variant.parse(m)
    jobs = [(split, m, cfg.to_dict()) for m in methods]
    width = min(_threads(), len(jobs))
    if width > 1:
        with ProcessPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    baseline = cfg.get("harness.baseline")
    base = next((r for r in results if r.name == baseline and r.status == "ok"), None)
    classification = split.train.task == "classification"
    for r in results:
        if r.status != "ok":
            continue
        if classification:
            r.error_rate = 1.0 - r.test_metric
        if base is None:
            continue
        if base.test_metric:
            r.relative_gain = (r.test_metric - base.test_metric) / base.test_metric
        if classification and base.error_rate:
            r.relative_error_reduction = (base.error_rate - r.error_rate) / base.error_rate
    bcfg = cfg.bilevel_config()
    return ComparisonReport(
        methods=results, baseline=baseline, metric=metric_name(split.train.task),
        split_fingerprint=split.fingerprint(), config_fingerprint=cfg.fingerprint(),
        seeds={"root": cfg.seed, "bilevel": bcfg.seed}, config=cfg.to_dict())


def emit_report(report, path, fmt: str = "json") -> list:
    """Write a report as JSON (one file) or CSV (one file per decay curve).

    For CSV, ``path`` is a directory.  Returns the written paths.
    """
    if fmt not in ("json", "csv"):
        raise ConfigError(f"report format must be json or csv, got {fmt!r}")
    if isinstance(report, ComparisonReport):
        payload = report.to_dict()
        curves = [(m.name, m.curve) for m in report.methods if m.curve is not None]
    else:
        payload = report
        curves = [(name, DecayCurve.from_dict(c)) for name, c in report.get("curves", {}).items()]
    if fmt == "json":
        dump_json(payload, path)
        return [str(path)]
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    written = []
    for name, curve in curves:
        written.append(str(write_curve_csv(curve, out / f"{name}_curve.csv")))
    return written


def write_curve_csv(curve: DecayCurve, path) -> Path:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window_index", "start_ts", "end_ts", "metric", "n"])
            for win in curve.windows:
                w.writerow([win.window_index, repr(win.start_ts), repr(win.end_ts), repr(win.metric), win.n])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return Path(path)
