"""Command-line entry point: pretrain / adapt / sweep / landscape / verify.

One JSON config file carries every knob (see DEFAULT_CONFIG for the schema
and defaults); `--set key.path=value` overrides single keys, and the
dedicated flags win over both the file and the TINYTTA_OUTPUT_DIR
environment variable. All randomness flows from the root seed through named
substreams, so changing one axis of an experiment does not perturb the
others. Every command writes a config.json snapshot next to its outputs;
rerunning with that snapshot reproduces the run bit-for-bit at --threads 1
(wall-clock fields aside).

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .adapt import (DEFAULT_TEMPLATES, AdaptationError, MtwaConfig,
                    run_mtwa, template_feature_cache)
from .data import (Corruption, Dataset, apply_corruption, batch_iter,
                   generate_dataset, load_cifar10)
from .evaluate import (EvalConfig, adapt_and_evaluate, atomic_write_text,
                       evaluate, run_sweep, seed_int, seed_stream)
from .landscape import LandscapeError, run_landscape, save_grid
from .model import (CheckpointError, ClipModel, ln_parameters, load_checkpoint,
                    save_checkpoint, snapshot_checkpoint)
from .pretrain import PretrainConfig, PretrainError, pretrain
from . import verify as verify_mod

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "threads": 1,
    "output_dir": None,          # None -> runs/<command>; flag and env override
    "checkpoint": None,          # input checkpoint for adapt/sweep/landscape
    "data": {
        "source": "synthetic",   # "synthetic" | "cifar10"
        "cifar_dir": None,
        "dataset_seed": 0,
        "train_per_class": 512,
        "test_per_class": 128,
        "corruption": "gaussian_noise",   # "none" for clean evaluation
        "severity": 3,
    },
    "pretrain": {
        "epochs": 30,
        "batch_size": 128,
        "lr": 3e-4,
        "temperature": 0.07,
        "caption_template": "a photo of a {}",
        "min_zero_shot": 0.90,
    },
    "mtwa": {
        "mode": "sequential",
        "L": 2,
        "M": 5,
        "lr": 1e-3,
        "loss": "transductive_ce",
        "shuffle_templates": True,
        "refresh_pseudo_labels": True,
        "seed": 0,
    },
    "eval": {
        "head": "text_avg",
        "templates": list(DEFAULT_TEMPLATES),
        "batch_size": 128,
    },
    "sweep": {
        "axis": "batch_size",
        "grid": [1, 2, 4, 8, 16, 32, 64, 128],
        "seeds": [0, 1, 2],
        "corruptions": ["gaussian_noise"],
        "severity": 3,
        "subset_size": None,
    },
    "landscape": {
        "templates": list(DEFAULT_TEMPLATES[:3]),
        "steps": 10,
        "lr": 1e-3,
        "batch_size": 128,
        "margin": 0.3,
        "nx": 41,
        "ny": 41,
    },
}


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Defaults overlaid by `override`; unknown keys named by dotted path."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' must be a section")
            merged[key] = merge_config(base[key], value, path=f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one --set key.path=value (value parsed as JSON, else string)."""
    key_path, sep, raw = assignment.partition("=")
    if not sep or not key_path:
        raise ConfigError(f"--set needs key.path=value, got '{assignment}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key_path.split(".")
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[:i + 1])}'")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key '{key_path}'")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key '{key_path}' is a section, not a value")
    node[leaf] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = merge_config(cfg, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    return cfg


def _resolve_globals(cfg: dict, args: argparse.Namespace, command: str) -> dict:
    """Fold flag/env overrides back into the config (flag > env > file)."""
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    out = args.output_dir or os.environ.get("TINYTTA_OUTPUT_DIR") \
        or cfg["output_dir"] or f"runs/{command}"
    cfg["output_dir"] = str(out)
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    if cfg["seed"] < 0:
        raise ConfigError(f"seed must be non-negative, got {cfg['seed']}")
    if cfg["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg['threads']}")
    return cfg


def _materialize(cfg: dict, dataset: Dataset) -> tuple[MtwaConfig, EvalConfig]:
    try:
        mtwa = MtwaConfig.from_dict(cfg["mtwa"])
        ev = EvalConfig.from_dict({**cfg["eval"],
                                   "class_names": list(dataset.class_names)})
    except ValueError as exc:
        raise ConfigError(str(exc))
    return mtwa, ev


def build_dataset(cfg: dict) -> Dataset:
    data = cfg["data"]
    if data["source"] == "synthetic":
        return generate_dataset(seed=int(data["dataset_seed"]),
                                train_per_class=int(data["train_per_class"]),
                                test_per_class=int(data["test_per_class"]))
    if data["source"] == "cifar10":
        if not data["cifar_dir"]:
            raise ConfigError("data.cifar_dir is required when source is cifar10")
        return load_cifar10(data["cifar_dir"])
    raise ConfigError(f"unknown data.source '{data['source']}'")


def corrupted_test_split(dataset: Dataset, cfg: dict) -> tuple[np.ndarray, np.ndarray, str, int]:
    data = cfg["data"]
    kind, severity = data["corruption"], int(data["severity"])
    images, labels = dataset.test.images, dataset.test.labels
    if kind == "none":
        return images, labels, "none", 0
    try:
        corruption = Corruption(kind, severity)
    except ValueError as exc:
        raise ConfigError(str(exc))
    return (apply_corruption(images, corruption, int(cfg["seed"])), labels,
            kind, severity)


def _require_checkpoint(cfg: dict):
    path = cfg["checkpoint"]
    if not path:
        raise ConfigError("no checkpoint given: pass --checkpoint or set "
                          "'checkpoint' in the config")
    return load_checkpoint(path)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(cfg: dict, out: Path) -> None:
    snapshot = {"config": cfg, "version": __version__}
    atomic_write_text(out / "config.json", json.dumps(snapshot, indent=2,
                                                      sort_keys=True))


def _save_checkpoint_atomic(path: Path, ckpt) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, ckpt)
    os.replace(tmp, path)


def cmd_pretrain(cfg: dict) -> int:
    out = _out_dir(cfg)
    dataset = build_dataset(cfg)
    try:
        pre_cfg = PretrainConfig(**cfg["pretrain"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pretrain section: {exc}")
    model = ClipModel(seed=int(cfg["seed"]))
    ckpt = pretrain(model, dataset, pre_cfg, seed=int(cfg["seed"]),
                    metrics_path=out / "pretrain_metrics.json")
    ckpt.provenance["version"] = __version__
    path = out / "checkpoint.ckpt"
    _save_checkpoint_atomic(path, ckpt)
    _write_snapshot(cfg, out)
    print(f"pretrain: zero-shot accuracy "
          f"{ckpt.provenance['zero_shot_accuracy']:.4f}, checkpoint -> {path}")
    return EXIT_OK


def cmd_adapt(cfg: dict) -> int:
    out = _out_dir(cfg)
    ckpt = _require_checkpoint(cfg)
    dataset = build_dataset(cfg)
    mtwa_cfg, eval_cfg = _materialize(cfg, dataset)
    images, labels, kind, severity = corrupted_test_split(dataset, cfg)
    seed = int(cfg["seed"])

    model = ckpt.build_model()
    baseline = evaluate(model, images, labels, eval_cfg,
                        dataset_name=dataset.name, corruption=kind,
                        severity=severity, seed=seed)
    adapted = adapt_and_evaluate(model, images, labels, mtwa_cfg, eval_cfg,
                                 seed, dataset_name=dataset.name,
                                 corruption=kind, severity=severity)

    # the adapted checkpoint reproduces the very first episodic batch's state
    model.adaptation_mode()
    order_seed = seed_int(seed, "batch_order")
    first = next(iter(batch_iter(images, labels, eval_cfg.batch_size,
                                 seed=order_seed)))
    cache = template_feature_cache(model, list(eval_cfg.templates),
                                   eval_cfg.class_names)
    run_mtwa(model, first.images, eval_cfg.templates, eval_cfg.class_names,
             mtwa_cfg, rng=seed_stream(seed, "adapt", 0), text_features=cache)
    adapted_ckpt = snapshot_checkpoint(model, {
        "adapted_from": str(cfg["checkpoint"]), "corruption": kind,
        "severity": severity, "seed": seed, "scope": "first test batch",
        "version": __version__})
    _save_checkpoint_atomic(out / "adapted.ckpt", adapted_ckpt)

    lines = []
    for r in (baseline, adapted):
        row = r.to_dict()
        row["config"]["version"] = __version__
        lines.append(json.dumps(row, sort_keys=True))
    atomic_write_text(out / "results.jsonl", "\n".join(lines) + "\n")
    _write_snapshot(cfg, out)
    print(f"adapt: {kind}@{severity} accuracy {baseline.accuracy:.4f} -> "
          f"{adapted.accuracy:.4f} ({adapted.method}), results -> {out}")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    ckpt = _require_checkpoint(cfg)
    dataset = build_dataset(cfg)
    mtwa_cfg, eval_cfg = _materialize(cfg, dataset)
    sw = cfg["sweep"]
    if sw["axis"] == "schedule":
        grid = [tuple(p) if isinstance(p, list) else p for p in sw["grid"]]
    else:
        grid = list(sw["grid"])
    try:
        rows = run_sweep(ckpt, dataset, sw["axis"], grid,
                         seeds=[int(s) for s in sw["seeds"]], out_dir=out,
                         mtwa_cfg=mtwa_cfg, eval_cfg=eval_cfg,
                         corruptions=tuple(sw["corruptions"]),
                         severity=int(sw["severity"]),
                         threads=int(cfg["threads"]),
                         subset_size=sw["subset_size"])
    except ValueError as exc:
        raise ConfigError(str(exc))
    _write_snapshot(cfg, out)
    print(f"sweep: axis {sw['axis']}, {len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_landscape(cfg: dict) -> int:
    out = _out_dir(cfg)
    ckpt = _require_checkpoint(cfg)
    dataset = build_dataset(cfg)
    images, labels, kind, severity = corrupted_test_split(dataset, cfg)
    ls = cfg["landscape"]
    batch = int(ls["batch_size"])
    images, labels = images[:batch], labels[:batch]   # one fixed batch
    plane, grid = run_landscape(
        ckpt, images, labels, dataset.class_names,
        templates=tuple(ls["templates"]), steps=int(ls["steps"]),
        lr=float(ls["lr"]), margin=float(ls["margin"]),
        nx=int(ls["nx"]), ny=int(ls["ny"]), threads=int(cfg["threads"]))
    csv_path, json_path = save_grid(grid, out, extra={
        "corruption": kind, "severity": severity, "seed": int(cfg["seed"]),
        "w1_coords": list(plane.w1_coords), "w2_coords": list(plane.w2_coords)})
    _write_snapshot(cfg, out)
    print(f"landscape: {grid.loss.shape[1]}x{grid.loss.shape[0]} grid on "
          f"{kind}@{severity} -> {csv_path} and {json_path}")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    results = verify_mod.run_all()
    for name, ok, detail in results:
        suffix = f": {detail}" if detail else ""
        print(f"{'PASS' if ok else 'FAIL'} {name}{suffix}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"verify: {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems with exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(message, self)


class _UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


def build_parser() -> _Parser:
    parser = _Parser(prog="tinytta",
                     description="Test-time adaptation workbench for a "
                                 "small dual-encoder classifier.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    for name, help_text in (
            ("pretrain", "train the dual encoder and write a checkpoint"),
            ("adapt", "adapt on a corrupted test split and report accuracy"),
            ("sweep", "grid experiments over one axis, resumable"),
            ("landscape", "loss/error surface through three adapted models"),
            ("verify", "fast oracle and invariant checks")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE",
                       help="override one config value (JSON-parsed)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None,
                       help="output directory (also: TINYTTA_OUTPUT_DIR)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads; 1 also pins BLAS for bit-determinism")
        if name in ("adapt", "sweep", "landscape"):
            p.add_argument("--checkpoint", default=None,
                           help="pretrained checkpoint to start from")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "sweep": cmd_sweep,
            "landscape": cmd_landscape, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"tinytta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = load_config(args.config, args.overrides)
        cfg = _resolve_globals(cfg, args, args.command)
    except ConfigError as exc:
        print(f"tinytta: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    guard = threadpool_limits(limits=1) if cfg["threads"] == 1 \
        else contextlib.nullcontext()
    try:
        with guard:
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"tinytta: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, PretrainError, AdaptationError,
            LandscapeError, OSError, ValueError) as exc:
        print(f"tinytta: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
