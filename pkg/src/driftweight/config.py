"""Run configuration: nested JSON with documented defaults.

Resolution order is flag > file > default.  Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Optional

import numpy as np

from .bilevel import BilevelConfig
from .errors import ConfigError
from .scorer import scorer_init
from .seeding import derive_seed
from .timescale import ImportanceModel, Variant, make_basis

DEFAULTS: dict = {
    "run_name": "run",
    "output_dir": ".",
    "seed": 0,
    "data": {
        "source": "synthetic",          # "synthetic" or "csv"
        "path": None,
        "task": "classification",
        "timestamp_col": "timestamp",
        "label_col": "label",
        "feature_cols": ["x*"],
        "synthetic": {"kind": "two_timescale"},
    },
    "split": {"train_frac": 0.45, "val_frac": 0.05, "n_train": None, "n_val": None},
    "model": {"hidden": [32, 32]},
    "importance": {
        "variant": "instmixexp",
        "a0": 2.0,
        "K": 16,
        "lambda": None,                 # None: grid-searched on validation
        "slope": None,
        "lambda_grid": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
        "slope_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
        "normalize_ages": True,
        "renormalize": False,
        "floor": 1e-6,
    },
    "scorer": {"hidden": [32, 32], "seed": None},
    "bilevel": {
        "variant": "alternating",
        "L": 5,
        "alpha": 1e-3,
        "beta": 1e-2,
        "neumann_terms": 50,
        "epochs": 30,
        "batch_size": 64,
        "meta_batch_size": 64,
        "seed": None,                   # None: the root seed
        "early_stop_patience": 10,
        "hvp_step": 1e-4,
        "meta_clip": None,
        "freeze_scorer_body": False,
    },
    "stream": {"n_buckets": 12, "passes_per_bucket": 5, "val_fraction": 0.10, "carry_params": True},
    "harness": {
        "n_windows": 10,
        "weight_buckets": 10,
        "baseline": "uniform",
        "methods": ["uniform", "exp", "mixexp", "instmixexp"],
    },
}

# sections whose contents are free-form (validated downstream)
_OPEN = {("data", "synthetic")}


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = (*path, k)
        if k not in base and path not in _OPEN:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base.get(k), dict) and here not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be an object")
            out[k] = _merge(base[k], v, here)
        elif here in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be an object")
            merged = dict(base.get(k) or {})
            merged.update(v)
            out[k] = merged
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    """Resolved configuration tree with dotted-path access."""

    def __init__(self, tree: Optional[dict] = None):
        self.tree = _merge(DEFAULTS, tree or {})

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
        tree = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    tree = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(tree, dict):
                raise ConfigError("config root must be a JSON object")
        cfg = cls(tree)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        return cfg

    def get(self, dotted: str, default=None):
        node = self.tree
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        nested: Any = value
        for part in reversed(parts):
            nested = {part: nested}
        self.tree = _merge(self.tree, nested)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def fingerprint(self) -> str:
        blob = json.dumps(self.tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.get("seed"))

    def bilevel_config(self, **changes) -> BilevelConfig:
        b = dict(self.get("bilevel"))
        if b.get("seed") is None:
            b["seed"] = self.seed
        b["renormalize"] = bool(self.get("importance.renormalize"))
        b["normalize_ages"] = bool(self.get("importance.normalize_ages"))
        b.update(changes)
        try:
            return BilevelConfig(**b)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def basis(self):
        return make_basis(self.get("importance.a0"), self.get("importance.K"))

    def build_importance(self, variant, dim: int, **scalars) -> ImportanceModel:
        """Fresh, untrained importance model for ``variant`` on ``dim`` features."""
        v = Variant.parse(variant) if not isinstance(variant, Variant) else variant
        floor = float(self.get("importance.floor"))
        basis = self.basis()
        hidden = self.get("scorer.hidden")
        sseed = self.get("scorer.seed")
        sseed = derive_seed(self.seed, "scorer") if sseed is None else int(sseed)
        if v == Variant.UNIFORM:
            return ImportanceModel(v, floor=floor)
        if v == Variant.LINEAR:
            return ImportanceModel(v, slope=float(scalars.get("slope", self.get("importance.slope") or 0.0)),
                                   floor=floor)
        if v == Variant.SINGLE_EXP:
            return ImportanceModel(v, lam=float(scalars.get("lam", self.get("importance.lambda") or 0.0)),
                                   floor=floor)
        if v == Variant.MIX_EXP:
            return ImportanceModel(v, basis=basis, z=np.full(basis.K, 1.0 / basis.K), floor=floor)
        if v == Variant.INST_MIX_EXP:
            return ImportanceModel(v, basis=basis, scorer=scorer_init(dim, basis.K, hidden, sseed), floor=floor)
        in_dim = dim + 1 if v == Variant.INST_TIME else dim
        return ImportanceModel(v, scorer=scorer_init(in_dim, 1, hidden, sseed), floor=floor)
