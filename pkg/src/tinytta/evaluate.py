"""Evaluation heads, episodic adapt-then-classify runs, and ablation sweeps.

Two classification heads share the cosine classifier: `single_temp` uses the
first template's class embeddings, `text_avg` the per-class mean of every
template's unit embeddings (not re-normalized — the cosine head is
scale-invariant, so re-normalizing could not change a single argmax).

Adaptation is episodic: the visual normalization parameters are reset to the
incoming checkpoint before every test batch, which keeps batch-size
comparisons well-defined. A `continual` flag disables the reset for
exploration. Sweeps persist one JSON line per result row as soon as it is
computed, can resume from a partial file, and pivot into a CSV summary.
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .adapt import (DEFAULT_TEMPLATES, MtwaConfig, adapt_single_template,
                    average_outputs, run_mtwa, template_feature_cache)
from .data import CLASS_NAMES, CORRUPTION_KINDS, Corruption, Dataset, \
    apply_corruption, batch_iter
from .model import Checkpoint, ClipModel, ln_parameters

HEADS = ("single_temp", "text_avg")
SWEEP_AXES = ("batch_size", "template_count", "schedule", "strategy", "corruption")
STRATEGIES = ("text_avg", "output_avg",
              "weight_avg_10x1", "weight_avg_1x10", "weight_avg_2x5")


def seed_stream(root_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent, reproducible substream named by label and indices."""
    return np.random.default_rng(_seed_seq(root_seed, label, *indices))


def seed_int(root_seed: int, label: str, *indices: int) -> int:
    """A 32-bit seed drawn from the named substream, for int-seeded APIs."""
    return int(_seed_seq(root_seed, label, *indices).generate_state(1)[0])


def _seed_seq(root_seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    if root_seed < 0:
        raise ValueError(f"seed must be non-negative, got {root_seed}")
    entries = [int(root_seed), zlib.crc32(label.encode("utf-8"))]
    entries += [int(i) for i in indices]
    return np.random.SeedSequence(entries)


@dataclass(frozen=True)
class EvalConfig:
    """How to turn a model plus test images into predictions."""

    head: str = "text_avg"
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    class_names: tuple[str, ...] = CLASS_NAMES
    batch_size: int = 128

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got '{self.head}'")
        if len(self.templates) < 1:
            raise ValueError("need at least one template")
        if len(self.class_names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(self.class_names)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {"head": self.head, "templates": list(self.templates),
                "class_names": list(self.class_names),
                "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        known = {"head", "templates", "class_names", "batch_size"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        out = dict(d)
        for key in ("templates", "class_names"):
            if key in out:
                out[key] = tuple(out[key])
        return cls(**out)


@dataclass
class ExperimentResult:
    """One evaluated (dataset, corruption, method, seed) cell."""

    dataset: str
    corruption: str              # corruption kind, or "none" for clean data
    severity: int                # 0 for clean data
    method: str
    seed: int
    accuracy: float
    per_class_accuracy: tuple[float, ...]
    n_samples: int
    wall_seconds: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "corruption": self.corruption,
                "severity": self.severity, "method": self.method,
                "seed": self.seed, "accuracy": self.accuracy,
                "per_class_accuracy": list(self.per_class_accuracy),
                "n_samples": self.n_samples, "wall_seconds": self.wall_seconds,
                "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        out = dict(d)
        out["per_class_accuracy"] = tuple(out["per_class_accuracy"])
        return cls(**out)

    def key(self) -> tuple:
        """Identity of the cell, for resume/deduplication."""
        return (self.dataset, self.corruption, self.severity, self.method,
                self.seed, self.config.get("axis"), str(self.config.get("point")))


def ensemble_text_embedding(model: ClipModel, templates: Sequence[str],
                            class_names: Sequence[str]) -> np.ndarray:
    """Per-class mean of each template's unit-norm class embeddings, (K, D)."""
    if len(templates) < 1:
        raise ValueError("need at least one template")
    cache = template_feature_cache(model, list(templates), class_names)
    return _mean_features([cache[t] for t in templates])


def _mean_features(feature_list: list[np.ndarray]) -> np.ndarray:
    stack = feature_list[0].copy()
    for f in feature_list[1:]:
        stack += f
    return stack / len(feature_list)


def _head_features(cfg: EvalConfig, cache: dict[str, np.ndarray]) -> np.ndarray:
    if cfg.head == "single_temp":
        return cache[cfg.templates[0]]
    return _mean_features([cache[t] for t in cfg.templates])


def _tally(preds: np.ndarray, labels: np.ndarray, correct: np.ndarray,
           total: np.ndarray) -> None:
    np.add.at(total, labels, 1)
    np.add.at(correct, labels[preds == labels], 1)


def _finish_counts(correct: np.ndarray, total: np.ndarray) -> tuple[float, tuple]:
    """Accuracy as the class-count-weighted mean of per-class accuracies."""
    per_class = np.divide(correct, total, out=np.zeros_like(correct, dtype=np.float64),
                          where=total > 0)
    accuracy = float(correct.sum() / max(1, total.sum()))
    return accuracy, tuple(float(a) for a in per_class)


def _predict(model: ClipModel, images: np.ndarray,
             text_features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(text_features, axis=-1, keepdims=True)
    z = model.encode_image(images).data
    return np.argmax(z @ (text_features / norms).T, axis=-1)


def evaluate_split(model: ClipModel, images: np.ndarray, labels: np.ndarray,
                   text_features: np.ndarray, n_classes: int,
                   batch_size: int = 256) -> tuple[float, tuple]:
    """Accuracy and per-class accuracy without adaptation, fixed batch order."""
    correct = np.zeros(n_classes, dtype=np.int64)
    total = np.zeros(n_classes, dtype=np.int64)
    for start in range(0, len(images), batch_size):
        preds = _predict(model, images[start:start + batch_size], text_features)
        _tally(preds, labels[start:start + batch_size], correct, total)
    return _finish_counts(correct, total)


def evaluate(model: ClipModel, images: np.ndarray, labels: np.ndarray,
             cfg: EvalConfig, *, dataset_name: str = "synthetic",
             corruption: str = "none", severity: int = 0, seed: int = 0,
             method: str = "no_adapt") -> ExperimentResult:
    """Classify a labeled split with the configured head; no adaptation."""
    t0 = time.perf_counter()
    cache = template_feature_cache(model, list(cfg.templates), cfg.class_names)
    accuracy, per_class = evaluate_split(model, images, labels,
                                         _head_features(cfg, cache),
                                         len(cfg.class_names), cfg.batch_size)
    return ExperimentResult(
        dataset=dataset_name, corruption=corruption, severity=severity,
        method=method, seed=seed, accuracy=accuracy,
        per_class_accuracy=per_class, n_samples=len(images),
        wall_seconds=time.perf_counter() - t0,
        config={"eval": cfg.to_dict()})


def _episodic_run(model: ClipModel, images: np.ndarray, labels: np.ndarray,
                  eval_cfg: EvalConfig, seed: int,
                  batch_fn: Callable[[ClipModel, np.ndarray, np.random.Generator,
                                      dict, np.ndarray], np.ndarray],
                  continual: bool = False) -> tuple[float, tuple, int]:
    """Shared episodic driver: reset, adapt via `batch_fn`, predict, tally."""
    model.adaptation_mode()
    ln = ln_parameters(model)
    pristine = ln.snapshot()
    cache = template_feature_cache(model, list(eval_cfg.templates),
                                   eval_cfg.class_names)
    head = _head_features(eval_cfg, cache)
    k = len(eval_cfg.class_names)
    correct = np.zeros(k, dtype=np.int64)
    total = np.zeros(k, dtype=np.int64)
    order_seed = seed_int(seed, "batch_order")
    for index, batch in enumerate(batch_iter(images, labels, eval_cfg.batch_size,
                                             seed=order_seed)):
        if not continual:
            ln.load(pristine)
        rng = seed_stream(seed, "adapt", index)
        preds = batch_fn(model, batch.images, rng, cache, head)
        _tally(preds, batch.labels, correct, total)
    ln.load(pristine)
    accuracy, per_class = _finish_counts(correct, total)
    return accuracy, per_class, len(images)


def adapt_and_evaluate(model: ClipModel, images: np.ndarray, labels: np.ndarray,
                       mtwa_cfg: MtwaConfig, eval_cfg: EvalConfig, seed: int = 0,
                       *, dataset_name: str = "synthetic",
                       corruption: str = "none", severity: int = 0,
                       method: str | None = None,
                       continual: bool = False) -> ExperimentResult:
    """Adapt on each unlabeled test batch, then classify it; labels are only
    ever read by the accuracy tally."""
    t0 = time.perf_counter()

    def batch_fn(m, batch_images, rng, cache, head):
        run_mtwa(m, batch_images, eval_cfg.templates, eval_cfg.class_names,
                 mtwa_cfg, rng=rng, text_features=cache)
        return _predict(m, batch_images, head)

    accuracy, per_class, n = _episodic_run(model, images, labels, eval_cfg, seed,
                                           batch_fn, continual)
    if method is None:
        method = "watt_parallel" if mtwa_cfg.mode == "parallel" else "watt_sequential"
        if mtwa_cfg.loss == "entropy_min":
            method = f"entropy_min_{mtwa_cfg.mode}"
    return ExperimentResult(
        dataset=dataset_name, corruption=corruption, severity=severity,
        method=method, seed=seed, accuracy=accuracy, per_class_accuracy=per_class,
        n_samples=n, wall_seconds=time.perf_counter() - t0,
        config={"mtwa": mtwa_cfg.to_dict(), "eval": eval_cfg.to_dict(),
                "continual": continual})


# ---------------------------------------------------------------- sweeps

def _parse_schedule(point) -> tuple[int, int]:
    """Accept (L, M) pairs or 'LxM' strings."""
    if isinstance(point, str):
        left, _, right = point.partition("x")
        if not right:
            raise ValueError(f"schedule '{point}' is not of the form LxM")
        return int(left), int(right)
    left, right = point
    return int(left), int(right)


def _strategy_batch_fn(strategy: str, eval_cfg: EvalConfig, mtwa_cfg: MtwaConfig,
                       lr: float):
    """Per-batch adaptation for one ensemble strategy, 10-step budgets."""
    templates = eval_cfg.templates
    names = eval_cfg.class_names
    if strategy == "text_avg":
        # one trajectory under the first template; ensembling happens in the head
        def fn(m, batch_images, rng, cache, head):
            adapt_single_template(m, batch_images, templates[0], names,
                                  inner_steps=10, lr=lr,
                                  text_features=cache[templates[0]])
            return _predict(m, batch_images, head)
        return fn
    if strategy == "output_avg":
        def fn(m, batch_images, rng, cache, head):
            ln = ln_parameters(m)
            pristine = ln.snapshot()
            branches = []
            for t in templates:
                ln.load(pristine)
                branches.append(adapt_single_template(
                    m, batch_images, t, names, inner_steps=10, lr=lr,
                    text_features=cache[t]))
            probs = average_outputs(m, branches, batch_images, head)
            return np.argmax(probs, axis=-1)
        return fn
    if strategy.startswith("weight_avg_"):
        inner, rounds = _parse_schedule(strategy[len("weight_avg_"):])
        cfg = replace(mtwa_cfg, inner_steps=inner, rounds=rounds)

        def fn(m, batch_images, rng, cache, head):
            run_mtwa(m, batch_images, templates, names, cfg, rng=rng,
                     text_features=cache)
            return _predict(m, batch_images, head)
        return fn
    raise ValueError(f"unknown strategy '{strategy}'; expected one of {STRATEGIES}")


def _sweep_cell(axis: str, point, checkpoint: Checkpoint, images: np.ndarray,
                labels: np.ndarray, mtwa_cfg: MtwaConfig, eval_cfg: EvalConfig,
                seed: int, dataset_name: str, corruption: str,
                severity: int) -> ExperimentResult:
    """Evaluate one (grid point, corruption, seed) cell on a fresh model."""
    model = checkpoint.build_model()
    t0 = time.perf_counter()
    method = None

    if axis == "batch_size":
        eval_cfg = replace(eval_cfg, batch_size=int(point))
    elif axis == "template_count":
        n = int(point)
        pool = eval_cfg.templates
        if not 1 <= n <= len(pool):
            raise ValueError(f"template_count {n} outside 1..{len(pool)}")
        chosen = seed_stream(seed, "template_subset", n).choice(
            len(pool), size=n, replace=False)
        eval_cfg = replace(eval_cfg, templates=tuple(pool[i] for i in chosen))
    elif axis == "schedule":
        inner, rounds = _parse_schedule(point)
        mtwa_cfg = replace(mtwa_cfg, inner_steps=inner, rounds=rounds)
    elif axis == "strategy":
        batch_fn = _strategy_batch_fn(str(point), eval_cfg, mtwa_cfg, mtwa_cfg.lr)
        accuracy, per_class, n = _episodic_run(model, images, labels, eval_cfg,
                                               seed, batch_fn)
        return ExperimentResult(
            dataset=dataset_name, corruption=corruption, severity=severity,
            method=str(point), seed=seed, accuracy=accuracy,
            per_class_accuracy=per_class, n_samples=n,
            wall_seconds=time.perf_counter() - t0,
            config={"axis": axis, "point": point, "mtwa": mtwa_cfg.to_dict(),
                    "eval": eval_cfg.to_dict()})
    elif axis != "corruption":
        raise ValueError(f"unknown sweep axis '{axis}'; expected one of {SWEEP_AXES}")

    result = adapt_and_evaluate(model, images, labels, mtwa_cfg, eval_cfg, seed,
                                dataset_name=dataset_name, corruption=corruption,
                                severity=severity, method=method)
    result.config["axis"] = axis
    result.config["point"] = point
    result.wall_seconds = time.perf_counter() - t0
    return result


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_existing_rows(jsonl_path: Path) -> list[ExperimentResult]:
    rows = []
    if jsonl_path.exists():
        for line in jsonl_path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(ExperimentResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue  # torn final line from an aborted run
    return rows


def summary_pivot(rows: Sequence[ExperimentResult]) -> list[list]:
    """Point-by-corruption table of mean accuracy over seeds."""
    cells: dict[tuple, list[float]] = {}
    points, kinds = [], []
    for r in rows:
        label = f"{r.config.get('point', r.method)}"
        kind = f"{r.corruption}@{r.severity}"
        if label not in points:
            points.append(label)
        if kind not in kinds:
            kinds.append(kind)
        cells.setdefault((label, kind), []).append(r.accuracy)
    header = ["point", *kinds]
    table = [header]
    for label in points:
        row: list = [label]
        for kind in kinds:
            vals = cells.get((label, kind))
            row.append(round(float(np.mean(vals)), 6) if vals else "")
        table.append(row)
    return table


def run_sweep(checkpoint: Checkpoint, dataset: Dataset, axis: str, grid: Sequence,
              seeds: Sequence[int], out_dir, *,
              mtwa_cfg: MtwaConfig | None = None,
              eval_cfg: EvalConfig | None = None,
              corruptions: Sequence[str] = ("gaussian_noise",),
              severity: int = 3, threads: int = 1,
              subset_size: int | None = None) -> list[ExperimentResult]:
    """One result row per (grid point, corruption, seed); resumable.

    Rows are appended to sweep_<axis>.jsonl as they finish; a manifest JSON
    and a CSV pivot (point rows, corruption columns, seed-mean accuracy) are
    rewritten atomically at the end. Existing rows with matching keys are
    kept and not recomputed.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis '{axis}'; expected one of {SWEEP_AXES}")
    if not grid:
        raise ValueError("empty sweep grid")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    mtwa_cfg = mtwa_cfg or MtwaConfig()
    eval_cfg = eval_cfg or EvalConfig(class_names=dataset.class_names)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / f"sweep_{axis}.jsonl"
    manifest_path = out_dir / f"sweep_{axis}_manifest.json"
    csv_path = out_dir / f"sweep_{axis}_summary.csv"

    # task list: (point, corruption kind or "none", seed)
    if axis == "corruption":
        tasks = [(kind, str(kind), seed) for kind in grid for seed in seeds]
    else:
        tasks = [(point, kind, seed)
                 for point in grid for kind in corruptions for seed in seeds]

    rows = _load_existing_rows(jsonl_path)
    if jsonl_path.exists():
        raw = jsonl_path.read_bytes()
        if raw and not raw.endswith(b"\n"):
            with open(jsonl_path, "a") as f:
                f.write("\n")  # seal a torn final line so appends stay parseable

    manifest = {"axis": axis, "grid": [str(p) for p in grid],
                "seeds": list(map(int, seeds)),
                "corruptions": [k for k in
                                (grid if axis == "corruption" else corruptions)],
                "severity": severity, "dataset": dataset.name,
                "total_rows": len(tasks), "completed_rows": len(rows),
                "version": __version__, "done": False,
                "mtwa": mtwa_cfg.to_dict(), "eval": eval_cfg.to_dict()}
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))

    # corrupted inputs, shared across grid points: key (kind, seed)
    split_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def split_for(kind: str, seed: int):
        key = (kind, seed)
        if key not in split_cache:
            images, labels = dataset.test.images, dataset.test.labels
            if subset_size is not None and subset_size < len(images):
                keep = seed_stream(seed, "sweep_subset").choice(
                    len(images), size=subset_size, replace=False)
                images, labels = images[keep], labels[keep]
            if kind != "none":
                images = apply_corruption(images, Corruption(kind, severity), seed)
            split_cache[key] = (images, labels)
        return split_cache[key]

    for kind, seed in {(k, s) for _, k, s in tasks}:
        split_for(kind, seed)

    lock = threading.Lock()

    def task_key(task) -> tuple:
        point, kind, seed = task
        sev = severity if kind != "none" else 0
        return (dataset.name, kind, sev, seed, axis, str(point))

    done_tasks = {(r.dataset, r.corruption, r.severity, r.seed,
                   r.config.get("axis"), str(r.config.get("point")))
                  for r in rows}
    pending = [t for t in tasks if task_key(t) not in done_tasks]

    def run_task(task) -> None:
        point, kind, seed = task
        images, labels = split_for(kind, seed)
        sev = severity if kind != "none" else 0
        result = _sweep_cell(axis, point, checkpoint, images, labels, mtwa_cfg,
                             eval_cfg, seed, dataset.name, kind, sev)
        with lock:
            rows.append(result)
            with open(jsonl_path, "a") as f:
                f.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
                f.flush()

    if threads == 1:
        for task in pending:
            run_task(task)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_task, pending))

    ordered = sorted(rows, key=lambda r: (str(r.config.get("point")), r.corruption,
                                          r.severity, r.seed, r.method))
    sink = io.StringIO()
    csv.writer(sink).writerows(summary_pivot(ordered))
    atomic_write_text(csv_path, sink.getvalue())

    manifest["completed_rows"] = len(rows)
    manifest["done"] = len(rows) >= len(tasks)
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))
    return ordered
