"""Timestamped datasets: synthetic drift generators, CSV ingestion, temporal splits."""

from __future__ import annotations

import csv
import fnmatch
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .nn import Batch
from .timescale import AgeNormalizer

logger = logging.getLogger(__name__)

KINDS = ("rotating_boundary", "label_drift", "two_timescale")


@dataclass(frozen=True, eq=False)
class TemporalDataset:
    """Instances sorted (stably) by timestamp. Arrays are read-only."""

    features: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    task: str = "classification"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        ts = np.asarray(self.timestamps, dtype=np.float64).ravel()
        y = np.asarray(self.labels)
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        y = y.astype(np.int64) if self.task == "classification" else y.astype(np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataError("dataset needs at least one instance")
        if not (X.shape[0] == y.shape[0] == ts.shape[0]):
            raise DataError("features, labels and timestamps differ in length")
        if not np.all(np.isfinite(ts)):
            raise DataError("non-finite timestamps")
        if np.any(ts[1:] < ts[:-1]):
            order = np.argsort(ts, kind="stable")
            X, y, ts = X[order], y[order], ts[order]
        for name, a in (("features", X), ("labels", y), ("timestamps", ts)):
            a = np.ascontiguousarray(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.task == "classification" else 1

    def slice(self, start: int, stop: int) -> "TemporalDataset":
        return TemporalDataset(self.features[start:stop], self.labels[start:stop],
                               self.timestamps[start:stop], self.task)

    def to_batch(self, normalizer: Optional[AgeNormalizer] = None) -> Batch:
        ages = None if normalizer is None else normalizer.ages(self.timestamps)
        return Batch(self.features, self.labels, ages)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.timestamps):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(self.task.encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TemporalSplit:
    train: TemporalDataset
    val: TemporalDataset
    test: TemporalDataset

    @property
    def boundaries(self) -> dict:
        return {
            "train_start": float(self.train.timestamps[0]),
            "train_end": float(self.train.timestamps[-1]),
            "val_end": float(self.val.timestamps[-1]),
            "test_end": float(self.test.timestamps[-1]),
        }

    def fingerprint(self) -> str:
        return "-".join(p.fingerprint()[:8] for p in (self.train, self.val, self.test))


# synthetic generators

SYNTHETIC_DEFAULTS = {
    "rotating_boundary": {"n": 12000, "steps": 1.0, "omega": 1.5, "sigma": 0.3,
                          "spread": 1.0, "theta0": 0.0},
    "label_drift": {"n": 12000, "steps": 1.0, "p_start": 0.2, "p_end": 0.8,
                    "separation": 2.0, "sigma": 1.0},
    "two_timescale": {"n": 32000, "steps": 1.0, "omega_fast": 4.0, "omega_slow": 0.0,
                      "sigma": 0.1, "offset": 3.0, "spread": 1.0, "frequency": 2.0,
                      "amplitude": 0.0, "flip": 0.0, "theta0": 0.0},
}


def _rotating_labels(X, center, angle, amplitude=0.0, frequency=1.0):
    """Label 1 on the positive side of a line through ``center`` at ``angle``.

    With ``amplitude > 0`` the line is replaced by a sine-shaped curve in the
    rotated frame.
    """
    d = X - center
    c, s = np.cos(angle), np.sin(angle)
    along = d[:, 0] * c + d[:, 1] * s
    across = -d[:, 0] * s + d[:, 1] * c
    return (across > amplitude * np.sin(frequency * along)).astype(np.int64)


def generate_synthetic(kind: str, params: Optional[dict] = None, seed: int = 0) -> TemporalDataset:
    """Deterministic drifting classification stream.

    ``rotating_boundary``: one Gaussian blob whose linear boundary rotates at
    ``omega`` rad per unit time.  ``label_drift``: two fixed class-conditional
    Gaussians with the class-1 prior moving linearly from ``p_start`` to
    ``p_end``.  ``two_timescale``: subpopulation A (x0 offset by ``-offset``)
    has a boundary rotating at ``omega_fast``; subpopulation B (offset
    ``+offset``) rotates at ``omega_slow`` (0 = static).  Gaussian noise of
    scale ``sigma`` is added to features after labelling.  Timestamps are the
    instance index scaled to ``[0, steps]``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    p = dict(SYNTHETIC_DEFAULTS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ConfigError(f"unknown {kind} parameters: {sorted(unknown)}")
    p.update(params or {})
    n = int(p["n"])
    if n < 1 or not p["steps"] > 0 or p.get("sigma", 0) < 0:
        raise ConfigError(f"invalid generator parameters {p}")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, float(p["steps"]), n)

    if kind == "rotating_boundary":
        X = rng.normal(0.0, p["spread"], size=(n, 2))
        y = _rotating_labels(X, np.zeros(2), p["theta0"] + p["omega"] * t)
    elif kind == "label_drift":
        if not (0 <= p["p_start"] <= 1 and 0 <= p["p_end"] <= 1):
            raise ConfigError("class priors must lie in [0, 1]")
        prior = p["p_start"] + (p["p_end"] - p["p_start"]) * t / p["steps"]
        y = (rng.random(n) < prior).astype(np.int64)
        mu = np.where(y[:, None] == 1, p["separation"] / 2, -p["separation"] / 2) * np.array([1.0, 0.0])
        X = mu + rng.normal(0.0, 1.0, size=(n, 2))
    else:
        if not 0 <= p["flip"] < 0.5:
            raise ConfigError("flip probability must lie in [0, 0.5)")
        sub_a = rng.random(n) < 0.5
        centers = np.where(sub_a[:, None], [-p["offset"], 0.0], [p["offset"], 0.0])
        X = centers + rng.normal(0.0, p["spread"], size=(n, 2))
        angle = p["theta0"] + np.where(sub_a, p["omega_fast"], p["omega_slow"]) * t
        y = np.empty(n, dtype=np.int64)
        for mask in (sub_a, ~sub_a):
            y[mask] = _rotating_labels(X[mask], centers[mask], angle[mask],
                                       p["amplitude"], p["frequency"])
        flip = rng.random(n) < p["flip"]
        y = np.where(flip & ~sub_a, 1 - y, y)
    if p.get("sigma", 0) > 0:
        X = X + rng.normal(0.0, p["sigma"], size=X.shape)
    return TemporalDataset(X, y, t, "classification")


# CSV

def _resolve_columns(header: Sequence[str], columns) -> list:
    if isinstance(columns, str):
        columns = [columns]
    cols = []
    for pattern in columns:
        hits = [h for h in header if fnmatch.fnmatchcase(h, pattern)] if any(
            ch in pattern for ch in "*?[") else ([pattern] if pattern in header else [])
        if not hits:
            raise DataError(f"feature column {pattern!r} not found in header")
        cols.extend(h for h in hits if h not in cols)
    return cols


def load_timestamped_csv(path, schema: dict) -> TemporalDataset:
    """Read a UTF-8 CSV with a header row using an explicit column schema.

    ``schema`` keys: ``timestamp_col``, ``label_col``, ``feature_cols`` (list
    of names or glob patterns) and optional ``task``.  Rows are reported by
    their 1-based line number in the file (the header is line 1).
    """
    task = schema.get("task", "classification")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or not rows[0]:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for key in ("timestamp_col", "label_col"):
        if schema.get(key) not in header:
            raise DataError(f"{path}: column {schema.get(key)!r} ({key}) missing from header")
    feats = _resolve_columns(header, schema.get("feature_cols") or [])
    idx_t = header.index(schema["timestamp_col"])
    idx_y = header.index(schema["label_col"])
    idx_x = [header.index(c) for c in feats]
    body = [(i + 1, r) for i, r in enumerate(rows) if i > 0 and any(c.strip() for c in r)]
    if not body:
        raise DataError(f"{path}: no data rows")
    X = np.empty((len(body), len(idx_x)))
    y = np.empty(len(body))
    ts = np.empty(len(body))
    for k, (line, row) in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} cells, expected {len(header)}")
        try:
            ts[k] = float(row[idx_t])
            y[k] = float(row[idx_y])
            X[k] = [float(row[j]) for j in idx_x]
        except ValueError:
            raise DataError(f"{path}: non-numeric cell in row {line}") from None
        if not (np.isfinite(ts[k]) and np.isfinite(y[k]) and np.all(np.isfinite(X[k]))):
            raise DataError(f"{path}: non-finite value in row {line}")
    if task == "classification" and np.any(y != np.round(y)):
        raise DataError(f"{path}: classification labels must be integers")
    ds = TemporalDataset(X, y, ts, task)
    logger.info("parsed %d rows from %s", len(ds), path)
    return ds


def write_csv(dataset: TemporalDataset, path) -> None:
    cols = [f"x{j}" for j in range(dataset.dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "label", *cols])
        for t, y, x in zip(dataset.timestamps, dataset.labels, dataset.features):
            label = str(int(y)) if dataset.task == "classification" else repr(float(y))
            w.writerow([repr(float(t)), label, *(repr(float(v)) for v in x)])


DEFAULT_SCHEMA = {"timestamp_col": "timestamp", "label_col": "label", "feature_cols": ["x*"]}


# splitting

def split_by_counts(dataset: TemporalDataset, n_train: int, n_val: int) -> TemporalSplit:
    n = len(dataset)
    if n_train < 1 or n_val < 1 or n_train + n_val >= n:
        raise ConfigError(f"split {n_train}/{n_val}/{n - n_train - n_val} leaves an empty part")
    return TemporalSplit(dataset.slice(0, n_train), dataset.slice(n_train, n_train + n_val),
                         dataset.slice(n_train + n_val, n))


def temporal_split(dataset: TemporalDataset, train_frac: float = 0.45,
                   val_frac: float = 0.05) -> TemporalSplit:
    """Contiguous train/val/test partition by instance count; test takes the remainder."""
    if not (train_frac > 0 and val_frac > 0 and train_frac + val_frac < 1):
        raise ConfigError("fractions must be positive and sum to less than 1")
    n = len(dataset)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    return split_by_counts(dataset, n_train, n_val)


def bucketize(dataset: TemporalDataset, n_buckets: int) -> list:
    """Contiguous equal-count buckets; the last one absorbs the remainder."""
    n = len(dataset)
    if n_buckets < 1 or n_buckets > n:
        raise ConfigError(f"cannot cut {n} instances into {n_buckets} buckets")
    size = n // n_buckets
    edges = [i * size for i in range(n_buckets)] + [n]
    return [dataset.slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
