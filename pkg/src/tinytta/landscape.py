"""Loss and error surfaces on the plane through three adapted weight vectors.

Three copies of the model are adapted, one per template, giving weight
vectors w0, w1, w2 over the visual normalization parameters. Gram-Schmidt on
(w1 - w0, w2 - w0) yields an orthonormal basis (u_hat, v_hat) of the plane
through them; P(x, y) = w0 + x*u_hat + y*v_hat maps plane coordinates back to
parameter space. The adaptation loss and classification error are evaluated
on a Cartesian grid covering the triangle, always against the same fixed
batch and the mean of the three templates' class text embeddings.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .adapt import (DEFAULT_TEMPLATES, adapt_single_template, average_parameters,
                    build_pseudo_labels, template_feature_cache, tta_loss)
from .evaluate import atomic_write_text
from .model import Checkpoint, ClipModel, ParameterSet, ln_parameters

DEGENERATE_TOL = 1e-12


class LandscapeError(ValueError):
    """Degenerate geometry or incompatible parameter sets."""


def _flatten(ps: ParameterSet) -> np.ndarray:
    return ps.flatten()


def _check_congruent(sets: Sequence[ParameterSet]) -> None:
    names = sets[0].names
    for ps in sets[1:]:
        if ps.names != names:
            raise LandscapeError(f"parameter sets differ: {names[:2]} vs {ps.names[:2]}")
        for name in names:
            if ps[name].data.shape != sets[0][name].data.shape:
                raise LandscapeError(f"parameter '{name}': shape mismatch")


@dataclass
class LandscapePlane:
    """Orthonormal 2-D frame anchored at w0, holding w1 and w2 coordinates."""

    anchor: ParameterSet              # snapshot of w0
    anchor_flat: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    w1_coords: tuple[float, float]    # (|w1 - w0|, 0)
    w2_coords: tuple[float, float]
    layout: tuple[tuple[str, tuple], ...]   # (name, shape) per buffer

    def point_parameters(self, x: float, y: float) -> ParameterSet:
        """Parameters at plane coordinates (x, y); (0, 0) is w0 bit-exactly."""
        if x == 0.0 and y == 0.0:
            return self.anchor.snapshot()
        return self.unflatten(self.anchor_flat + x * self.u_hat + y * self.v_hat)

    def unflatten(self, vec: np.ndarray) -> ParameterSet:
        ps = ParameterSet()
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            ps.add(name, T.Tensor(vec[offset:offset + size].reshape(shape).copy()))
            offset += size
        if offset != vec.size:
            raise LandscapeError(f"vector of {vec.size} scalars does not fit "
                                 f"layout of {offset}")
        return ps

    def coordinates_of(self, ps: ParameterSet) -> tuple[float, float, float]:
        """(x, y, out-of-plane distance) of an arbitrary congruent set."""
        _check_congruent([self.anchor, ps])
        d = _flatten(ps) - self.anchor_flat
        x = float(d @ self.u_hat)
        y = float(d @ self.v_hat)
        residual = d - x * self.u_hat - y * self.v_hat
        return x, y, float(np.linalg.norm(residual))


def build_plane(w0: ParameterSet, w1: ParameterSet,
                w2: ParameterSet) -> LandscapePlane:
    """Orthonormalize (w1-w0, w2-w0); rejects degenerate geometry."""
    _check_congruent([w0, w1, w2])
    f0, f1, f2 = _flatten(w0), _flatten(w1), _flatten(w2)
    u = f1 - f0
    u_norm = float(np.linalg.norm(u))
    if u_norm < DEGENERATE_TOL:
        raise LandscapeError(f"w1 coincides with w0 (|u| = {u_norm:.3e})")
    u_hat = u / u_norm
    d2 = f2 - f0
    x2 = float(d2 @ u_hat)
    residual = d2 - x2 * u_hat
    v_norm = float(np.linalg.norm(residual))
    if v_norm < DEGENERATE_TOL:
        raise LandscapeError(
            f"w2 is collinear with w0 and w1 (residual norm {v_norm:.3e})")
    v_hat = residual / v_norm
    layout = tuple((name, t.data.shape) for name, t in w0)
    return LandscapePlane(anchor=w0.snapshot(), anchor_flat=f0, u_hat=u_hat,
                          v_hat=v_hat, w1_coords=(u_norm, 0.0),
                          w2_coords=(x2, v_norm), layout=layout)


@dataclass(frozen=True)
class GridSpec:
    """Cartesian grid bounds and resolution in plane coordinates."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int = 41
    ny: int = 41

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must satisfy min < max on both axes")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 points, got {self.nx}x{self.ny}")

    @classmethod
    def covering_triangle(cls, plane: LandscapePlane, margin: float = 0.3,
                          nx: int = 41, ny: int = 41) -> "GridSpec":
        """Bounding box of the three vertices, padded by `margin` per side."""
        xs = [0.0, plane.w1_coords[0], plane.w2_coords[0]]
        ys = [0.0, 0.0, plane.w2_coords[1]]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        x_pad = margin * max(x_hi - x_lo, DEGENERATE_TOL)
        y_pad = margin * max(y_hi - y_lo, DEGENERATE_TOL)
        return cls(x_lo - x_pad, x_hi + x_pad, y_lo - y_pad, y_hi + y_pad, nx, ny)

    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)


@dataclass
class LandscapeGrid:
    """Loss/error over the grid plus the exactly-evaluated marked points."""

    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray      # (ny, nx)
    error: np.ndarray     # (ny, nx)
    marked: dict          # name -> {"x", "y", "loss", "error"}

    def min_loss(self) -> float:
        """Minimum over grid cells and marked points (vertices included)."""
        values = [float(self.loss.min())]
        values += [m["loss"] for m in self.marked.values()]
        return min(values)


def _unit_rows(features: np.ndarray) -> np.ndarray:
    return features / np.linalg.norm(features, axis=-1, keepdims=True)


def point_metrics(model: ClipModel, plane: LandscapePlane, x: float, y: float,
                  images: np.ndarray, labels: np.ndarray,
                  text_features: np.ndarray,
                  class_names: Sequence[str]) -> tuple[float, float]:
    """(adaptation loss, classification error) with P(x, y) installed.

    `text_features` rows are normalized here, so the pre-averaged ensemble can
    be passed directly. The model's normalization parameters are left at
    P(x, y) — callers snapshot and restore.
    """
    ln_parameters(model).load(plane.point_parameters(x, y))
    feats = _unit_rows(text_features)
    bundle = build_pseudo_labels(model, images, None, class_names,
                                 text_features=feats)
    loss = float(tta_loss(bundle).item())
    error = 1.0 - float(np.mean(bundle.pseudo_classes == labels))
    return loss, error


def evaluate_grid(model: ClipModel, plane: LandscapePlane, spec: GridSpec,
                  images: np.ndarray, labels: np.ndarray,
                  text_features: np.ndarray, class_names: Sequence[str],
                  threads: int = 1) -> LandscapeGrid:
    """Evaluate every grid cell and the marked points w0/w1/w2/mean.

    Cells are independent; with threads > 1 they are split across model
    clones. The model is restored to its incoming parameters afterwards.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    model.freeze_all()   # values only; no graphs needed anywhere on the grid
    ln = ln_parameters(model)
    incoming = ln.snapshot()
    xs, ys = spec.xs(), spec.ys()
    loss = np.zeros((spec.ny, spec.nx))
    error = np.zeros((spec.ny, spec.nx))
    cells = [(iy, ix) for iy in range(spec.ny) for ix in range(spec.nx)]

    def sweep_cells(worker_model: ClipModel, chunk) -> None:
        for iy, ix in chunk:
            loss[iy, ix], error[iy, ix] = point_metrics(
                worker_model, plane, float(xs[ix]), float(ys[iy]),
                images, labels, text_features, class_names)

    if threads == 1:
        sweep_cells(model, cells)
    else:
        from concurrent.futures import ThreadPoolExecutor
        clones = [model.clone() for _ in range(threads)]
        for clone in clones:
            clone.freeze_all()
        chunks = [cells[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(sweep_cells, clones, chunks))

    x1 = plane.w1_coords[0]
    x2, y2 = plane.w2_coords
    marked_coords = {
        "w0": (0.0, 0.0),
        "w1": (x1, 0.0),
        "w2": (x2, y2),
        "mean": ((0.0 + x1 + x2) / 3.0, (0.0 + 0.0 + y2) / 3.0),
    }
    marked = {}
    for name, (mx, my) in marked_coords.items():
        m_loss, m_error = point_metrics(model, plane, mx, my, images, labels,
                                        text_features, class_names)
        marked[name] = {"x": mx, "y": my, "loss": m_loss, "error": m_error}
    ln.load(incoming)
    return LandscapeGrid(xs=xs, ys=ys, loss=loss, error=error, marked=marked)


def save_grid(grid: LandscapeGrid, out_dir, prefix: str = "landscape",
              extra: dict | None = None) -> tuple[Path, Path]:
    """CSV of x,y,loss,error cells plus a sidecar JSON of the marked points."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sink = io.StringIO()
    writer = csv.writer(sink)
    writer.writerow(["x", "y", "loss", "error"])
    for iy, y in enumerate(grid.ys):
        for ix, x in enumerate(grid.xs):
            writer.writerow([repr(float(x)), repr(float(y)),
                             repr(float(grid.loss[iy, ix])),
                             repr(float(grid.error[iy, ix]))])
    csv_path = out_dir / f"{prefix}.csv"
    atomic_write_text(csv_path, sink.getvalue())

    sidecar = {"marked_points": grid.marked,
               "x_range": [float(grid.xs[0]), float(grid.xs[-1])],
               "y_range": [float(grid.ys[0]), float(grid.ys[-1])],
               "nx": len(grid.xs), "ny": len(grid.ys),
               "version": __version__}
    if extra:
        sidecar.update(extra)
    json_path = out_dir / f"{prefix}.json"
    atomic_write_text(json_path, json.dumps(sidecar, indent=2, sort_keys=True))
    return csv_path, json_path


def adapt_vertices(model: ClipModel, images: np.ndarray,
                   templates: Sequence[str], class_names: Sequence[str],
                   steps: int = 10, lr: float = 1e-3) -> list[ParameterSet]:
    """One adapted weight vector per template, each from the same start."""
    model.adaptation_mode()
    ln = ln_parameters(model)
    pristine = ln.snapshot()
    cache = template_feature_cache(model, list(templates), class_names)
    vertices = []
    for template in templates:
        ln.load(pristine)
        vertices.append(adapt_single_template(
            model, images, template, class_names, inner_steps=steps, lr=lr,
            text_features=cache[template]))
    ln.load(pristine)
    return vertices


def run_landscape(checkpoint: Checkpoint, images: np.ndarray, labels: np.ndarray,
                  class_names: Sequence[str],
                  templates: Sequence[str] = DEFAULT_TEMPLATES[:3],
                  steps: int = 10, lr: float = 1e-3,
                  spec: GridSpec | None = None, margin: float = 0.3,
                  nx: int = 41, ny: int = 41,
                  threads: int = 1) -> tuple[LandscapePlane, LandscapeGrid]:
    """Adapt three vertices, build their plane, and chart loss/error on it.

    With no explicit `spec`, the grid covers the vertex triangle with the
    given margin and resolution.
    """
    if len(templates) != 3:
        raise LandscapeError(f"need exactly 3 templates, got {len(templates)}")
    model = checkpoint.build_model()
    w0, w1, w2 = adapt_vertices(model, images, templates, class_names,
                                steps=steps, lr=lr)
    plane = build_plane(w0, w1, w2)
    cache = template_feature_cache(model, list(templates), class_names)
    stack = [cache[t] for t in templates]
    ensemble = (stack[0] + stack[1] + stack[2]) / 3.0
    grid_spec = spec or GridSpec.covering_triangle(plane, margin=margin,
                                                   nx=nx, ny=ny)
    grid = evaluate_grid(model, plane, grid_spec, images, labels, ensemble,
                         class_names, threads=threads)
    return plane, grid
