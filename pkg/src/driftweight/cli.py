"""Command-line entry point.

Subcommands: gen-data, train, eval, compare, stream, weights.  Every JSON
artifact embeds the resolved configuration so a run can be repeated from
the artifact alone.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training or numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import RunConfig, parse_value
from .data import (TemporalDataset, TemporalSplit, generate_synthetic,
                   load_timestamped_csv, split_by_counts, temporal_split, write_csv)
from .errors import ConfigError, DataError, TrainingError
from .harness import (compare_methods, decay_curve, dump_json, emit_report, fit_method,
                      load_checkpoint, save_checkpoint, weight_profile, write_curve_csv)
from .seeding import derive_seed
from .stream import stream_config_from, stream_train
from .timescale import AgeNormalizer, Variant

logger = logging.getLogger("driftweight")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# shared plumbing

def resolve_overrides(args) -> dict:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = int(args.seed)
    return overrides


def resolve_config(args) -> RunConfig:
    """flag > file > default."""
    return RunConfig.load(getattr(args, "config", None), resolve_overrides(args))


def build_dataset(cfg: RunConfig, data_path: Optional[str] = None) -> TemporalDataset:
    """Dataset named by the config (or by ``data_path``, which forces CSV)."""
    if data_path is not None or cfg.get("data.source") == "csv":
        path = data_path or cfg.get("data.path")
        if not path:
            raise ConfigError("data.source is csv but no data.path given")
        schema = {k: cfg.get(f"data.{k}") for k in ("timestamp_col", "label_col", "feature_cols", "task")}
        return load_timestamped_csv(path, schema)
    if cfg.get("data.source") != "synthetic":
        raise ConfigError(f"data.source must be synthetic or csv, got {cfg.get('data.source')!r}")
    params = dict(cfg.get("data.synthetic"))
    kind = params.pop("kind", "two_timescale")
    return generate_synthetic(kind, params, derive_seed(cfg.seed, "data"))


def build_split(cfg: RunConfig, dataset: TemporalDataset) -> TemporalSplit:
    n_train, n_val = cfg.get("split.n_train"), cfg.get("split.n_val")
    if n_train is not None or n_val is not None:
        if n_train is None or n_val is None:
            raise ConfigError("split.n_train and split.n_val must be set together")
        return split_by_counts(dataset, int(n_train), int(n_val))
    return temporal_split(dataset, float(cfg.get("split.train_frac")), float(cfg.get("split.val_frac")))


def _out(args, cfg: RunConfig, suffix: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.get("output_dir")) / f"{cfg.get('run_name')}{suffix}"


def _sibling(path: Path, suffix: str) -> Path:
    """``run.ckpt.json`` -> ``run<suffix>`` next to it."""
    name = path.name
    for ext in (".ckpt.json", ".json"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return path.with_name(name + suffix)


def _methods(args, cfg: RunConfig) -> list:
    if args.methods:
        return [m.strip() for m in args.methods.split(",") if m.strip()]
    return list(cfg.get("harness.methods"))


# subcommands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if args.kind:
        cfg.set("data.synthetic.kind", args.kind)
    cfg.set("data.source", "synthetic")
    ds = build_dataset(cfg)
    out = _out(args, cfg, ".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        write_csv(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    dump_json({"config": cfg.to_dict(), "seed": cfg.seed, "n": len(ds),
               "fingerprint": ds.fingerprint()}, out.with_name(out.name + ".config.json"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    split = build_split(cfg, build_dataset(cfg, args.data))
    method = cfg.get("importance.variant")
    result, tuned = fit_method(split, method, cfg)
    normalizer = AgeNormalizer.fit(split.train.timestamps, cfg.get("importance.normalize_ages"))
    out = _out(args, cfg, ".ckpt.json")
    save_checkpoint(out, result.theta, result.importance, normalizer, split.train.task, cfg.to_dict())
    dump_json({"config": cfg.to_dict(), "seed": cfg.seed, "method": method, "tuned": tuned,
               "split": split.boundaries, "split_fingerprint": split.fingerprint(),
               "history": result.history.to_dict()},
              _sibling(out, ".history.json"))
    return EXIT_OK


def _checkpoint_and_data(args):
    """Checkpoint plus the config to use with it: the embedded one unless --config is given."""
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        return ckpt, resolve_config(args)
    cfg = RunConfig(ckpt["config"])
    for key, value in resolve_overrides(args).items():
        cfg.set(key, value)
    return ckpt, cfg


def cmd_eval(args) -> int:
    ckpt, cfg = _checkpoint_and_data(args)
    if args.data:
        test = build_dataset(cfg, args.data)
    else:
        test = build_split(cfg, build_dataset(cfg)).test
    windows = int(args.windows or cfg.get("harness.n_windows"))
    curve = decay_curve(ckpt["theta"], test, windows)
    out = _out(args, cfg, ".curve.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(curve, out)
    dump_json({"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": str(args.checkpoint),
               "curve": curve.to_dict(), "slope": curve.slope()},
              out.with_name(out.name + ".json"))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    methods = _methods(args, cfg)
    cfg.set("harness.methods", methods)
    split = build_split(cfg, build_dataset(cfg, args.data))
    report = compare_methods(split, methods, cfg)
    emit_report(report, _out(args, cfg, ".report.json" if args.format == "json" else "_curves"), args.format)
    if all(m.status == "failed" for m in report.methods):
        raise TrainingError("every method failed")
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = resolve_config(args)
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else [cfg.get("importance.variant")]
    ds = build_dataset(cfg, args.data)
    scfg = stream_config_from(cfg)
    runs = {}
    for m in methods:
        res = stream_train(ds, scfg, cfg.build_importance(Variant.parse(m), ds.dim),
                           hidden=cfg.get("model.hidden"))
        runs[m] = {"records": [r.to_dict() for r in res.records],
                   "mean_next_bucket_metric": res.mean_next_bucket_metric()}
    dump_json({"config": cfg.to_dict(), "seed": cfg.seed, "dataset_fingerprint": ds.fingerprint(),
               "methods": runs}, _out(args, cfg, ".stream.json"))
    return EXIT_OK


def cmd_weights(args) -> int:
    ckpt, cfg = _checkpoint_and_data(args)
    if args.data:
        train = build_dataset(cfg, args.data)
    else:
        train = build_split(cfg, build_dataset(cfg)).train
    n_buckets = int(args.windows or cfg.get("harness.weight_buckets"))
    profile = weight_profile(ckpt["importance"], train, n_buckets, ckpt["normalizer"])
    dump_json({"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": str(args.checkpoint),
               "variant": ckpt["importance"].variant.value, "profile": profile},
              _out(args, cfg, ".weights.json"))
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic drifting dataset as CSV"),
    "train": (cmd_train, "fit the configured variant and write a checkpoint"),
    "eval": (cmd_eval, "decay curve of a checkpoint over time windows"),
    "compare": (cmd_compare, "train several variants on one split and report"),
    "stream": (cmd_stream, "sequential bucket training with next-bucket evaluation"),
    "weights": (cmd_weights, "per-age-bucket weight statistics of a checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="driftweight", description="Learned temporal importance weighting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable; value parsed as JSON)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help="output path")
        if name == "gen-data":
            p.add_argument("--kind", choices=["rotating_boundary", "label_drift", "two_timescale"])
        else:
            p.add_argument("--data", help="CSV dataset (overrides data.* in the config)")
        if name in ("eval", "weights"):
            p.add_argument("--checkpoint", help="checkpoint written by train")
            p.add_argument("--windows", type=int, help="number of time windows / age buckets")
        if name in ("compare", "stream"):
            p.add_argument("--methods", help="comma-separated variants, e.g. uniform,exp,mixexp")
        if name == "compare":
            p.add_argument("--format", choices=["json", "csv"], default="json")
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command][0](args)
    except (UsageError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
