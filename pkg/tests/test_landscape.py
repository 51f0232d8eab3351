"""Plane geometry, grid evaluation, and persistence for the loss landscape."""

import csv
import json

import numpy as np
import pytest

from tinytta.adapt import (DEFAULT_TEMPLATES, average_parameters,
                           build_pseudo_labels, template_feature_cache, tta_loss)
from tinytta.data import CLASS_NAMES, generate_dataset
from tinytta.landscape import (GridSpec, LandscapeError, adapt_vertices,
                               build_plane, evaluate_grid, point_metrics,
                               run_landscape, save_grid)
from tinytta.model import ClipModel, ln_parameters, snapshot_checkpoint

TEMPLATES3 = DEFAULT_TEMPLATES[:3]


def _random_ln_sets(seed, n):
    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(n):
        ps = ln_parameters(ClipModel(seed=0)).snapshot()
        for _, t in ps:
            t.data[...] = rng.normal(size=t.data.shape)
        sets.append(ps)
    return sets


@pytest.fixture(scope="module")
def small_batch():
    ds = generate_dataset(seed=5, train_per_class=2, test_per_class=2)
    return ds.test.images, ds.test.labels


@pytest.fixture(scope="module")
def tiny_setup(small_batch):
    """Three adapted vertices + plane + ensemble features on a tiny batch."""
    images, labels = small_batch
    model = ClipModel(seed=0)
    vertices = adapt_vertices(model, images, TEMPLATES3, CLASS_NAMES, steps=2)
    plane = build_plane(*vertices)
    cache = template_feature_cache(model, list(TEMPLATES3), CLASS_NAMES)
    ensemble = sum(cache[t] for t in TEMPLATES3) / 3.0
    return model, vertices, plane, ensemble


class TestBuildPlane:
    def test_orthonormal_basis(self):
        w0, w1, w2 = _random_ln_sets(1, 3)
        plane = build_plane(w0, w1, w2)
        assert abs(np.linalg.norm(plane.u_hat) - 1.0) < 1e-10
        assert abs(np.linalg.norm(plane.v_hat) - 1.0) < 1e-10
        assert abs(plane.u_hat @ plane.v_hat) < 1e-10

    def test_anchor_is_bit_exact(self):
        w0, w1, w2 = _random_ln_sets(2, 3)
        plane = build_plane(w0, w1, w2)
        assert plane.point_parameters(0.0, 0.0).same_bits(w0)

    def test_w1_reconstructed_at_its_coords(self):
        w0, w1, w2 = _random_ln_sets(3, 3)
        plane = build_plane(w0, w1, w2)
        x1, y1 = plane.w1_coords
        assert y1 == 0.0
        rebuilt = plane.point_parameters(x1, y1)
        np.testing.assert_allclose(rebuilt.flatten(), w1.flatten(), atol=1e-10)

    def test_w2_reconstructed_at_its_coords(self):
        w0, w1, w2 = _random_ln_sets(4, 3)
        plane = build_plane(w0, w1, w2)
        x2, y2 = plane.w2_coords
        rebuilt = plane.point_parameters(x2, y2)
        np.testing.assert_allclose(rebuilt.flatten(), w2.flatten(), atol=1e-8)

    def test_affine_consistency(self):
        w0, w1, w2 = _random_ln_sets(5, 3)
        plane = build_plane(w0, w1, w2)
        for x, y in ((0.3, -0.7), (-1.2, 2.5)):
            direct = plane.anchor_flat + x * plane.u_hat + y * plane.v_hat
            assert plane.point_parameters(x, y).flatten().tobytes() == direct.tobytes()

    def test_coordinates_of_round_trip(self):
        w0, w1, w2 = _random_ln_sets(6, 3)
        plane = build_plane(w0, w1, w2)
        x, y, off = plane.coordinates_of(w1)
        np.testing.assert_allclose((x, y), plane.w1_coords, atol=1e-10)
        assert off < 1e-10
        x, y, off = plane.coordinates_of(w2)
        np.testing.assert_allclose((x, y), plane.w2_coords, atol=1e-8)
        assert off < 1e-8

    def test_mean_lies_at_centroid(self):
        w0, w1, w2 = _random_ln_sets(7, 3)
        plane = build_plane(w0, w1, w2)
        x, y, off = plane.coordinates_of(average_parameters([w0, w1, w2]))
        cx = (0.0 + plane.w1_coords[0] + plane.w2_coords[0]) / 3.0
        cy = (0.0 + 0.0 + plane.w2_coords[1]) / 3.0
        np.testing.assert_allclose((x, y), (cx, cy), atol=1e-8)
        assert off < 1e-8

    def test_identical_w1_rejected(self):
        w0, _, w2 = _random_ln_sets(8, 3)
        with pytest.raises(LandscapeError, match="coincides"):
            build_plane(w0, w0.snapshot(), w2)

    def test_collinear_w2_rejected(self):
        w0, w1, _ = _random_ln_sets(9, 3)
        between = average_parameters([w0, w1])  # midpoint of the segment
        with pytest.raises(LandscapeError, match="collinear"):
            build_plane(w0, w1, between)

    def test_incongruent_sets_rejected(self):
        w0, w1, w2 = _random_ln_sets(10, 3)
        broken = w2.subset(lambda n: "out_norm" not in n).snapshot()
        with pytest.raises(LandscapeError, match="differ"):
            build_plane(w0, w1, broken)


class TestGridSpec:
    def test_covering_triangle_contains_vertices(self):
        w0, w1, w2 = _random_ln_sets(11, 3)
        plane = build_plane(w0, w1, w2)
        spec = GridSpec.covering_triangle(plane, margin=0.3)
        assert spec.nx == spec.ny == 41
        for x, y in ((0.0, 0.0), plane.w1_coords, plane.w2_coords):
            assert spec.x_min < x < spec.x_max or x in (spec.x_min, spec.x_max)
            assert spec.y_min <= y <= spec.y_max

    def test_margin_widens_box(self):
        w0, w1, w2 = _random_ln_sets(12, 3)
        plane = build_plane(w0, w1, w2)
        tight = GridSpec.covering_triangle(plane, margin=0.0)
        wide = GridSpec.covering_triangle(plane, margin=0.5)
        assert wide.x_min < tight.x_min and wide.x_max > tight.x_max
        assert wide.y_min < tight.y_min and wide.y_max > tight.y_max

    def test_validation(self):
        with pytest.raises(ValueError, match="bounds"):
            GridSpec(1.0, 0.0, 0.0, 1.0)
        with pytest.raises(ValueError, match="2x2"):
            GridSpec(0.0, 1.0, 0.0, 1.0, nx=1)


class TestEvaluateGrid:
    def test_shapes_ranges_and_restore(self, tiny_setup, small_batch):
        model, _, plane, ensemble = tiny_setup
        images, labels = small_batch
        before = model.params.snapshot()
        spec = GridSpec.covering_triangle(plane, nx=5, ny=4)
        grid = evaluate_grid(model, plane, spec, images, labels, ensemble,
                             CLASS_NAMES)
        assert grid.loss.shape == (4, 5) and grid.error.shape == (4, 5)
        assert np.all(np.isfinite(grid.loss))
        assert np.all((grid.error >= 0.0) & (grid.error <= 1.0))
        assert model.params.same_bits(before)
        assert set(grid.marked) == {"w0", "w1", "w2", "mean"}

    def test_marked_w0_matches_direct_evaluation_bitwise(self, tiny_setup,
                                                         small_batch):
        model, (w0, _, _), plane, ensemble = tiny_setup
        images, labels = small_batch
        spec = GridSpec.covering_triangle(plane, nx=3, ny=3)
        grid = evaluate_grid(model, plane, spec, images, labels, ensemble,
                             CLASS_NAMES)
        ln = ln_parameters(model)
        keep = ln.snapshot()
        ln.load(w0)
        feats = ensemble / np.linalg.norm(ensemble, axis=-1, keepdims=True)
        bundle = build_pseudo_labels(model, images, None, CLASS_NAMES,
                                     text_features=feats)
        direct = float(tta_loss(bundle).item())
        ln.load(keep)
        assert grid.marked["w0"]["loss"] == direct

    def test_min_loss_not_above_vertex_losses(self, tiny_setup, small_batch):
        model, _, plane, ensemble = tiny_setup
        images, labels = small_batch
        spec = GridSpec.covering_triangle(plane, nx=3, ny=3)
        grid = evaluate_grid(model, plane, spec, images, labels, ensemble,
                             CLASS_NAMES)
        vertex_losses = [grid.marked[k]["loss"] for k in ("w0", "w1", "w2")]
        assert grid.min_loss() <= min(vertex_losses)

    def test_threads_give_identical_grids(self, tiny_setup, small_batch):
        model, _, plane, ensemble = tiny_setup
        images, labels = small_batch
        spec = GridSpec.covering_triangle(plane, nx=4, ny=3)
        a = evaluate_grid(model, plane, spec, images, labels, ensemble,
                          CLASS_NAMES, threads=1)
        b = evaluate_grid(model, plane, spec, images, labels, ensemble,
                          CLASS_NAMES, threads=3)
        assert a.loss.tobytes() == b.loss.tobytes()
        assert a.error.tobytes() == b.error.tobytes()

    def test_point_metrics_leaves_point_installed(self, tiny_setup, small_batch):
        model, (w0, w1, _), plane, ensemble = tiny_setup
        images, labels = small_batch
        ln = ln_parameters(model)
        keep = ln.snapshot()
        point_metrics(model, plane, *plane.w1_coords, images, labels, ensemble,
                      CLASS_NAMES)
        np.testing.assert_allclose(ln.flatten(), w1.flatten(), atol=1e-10)
        ln.load(keep)


class TestPersistence:
    def test_csv_and_sidecar(self, tiny_setup, small_batch, tmp_path):
        model, _, plane, ensemble = tiny_setup
        images, labels = small_batch
        spec = GridSpec.covering_triangle(plane, nx=3, ny=4)
        grid = evaluate_grid(model, plane, spec, images, labels, ensemble,
                             CLASS_NAMES)
        csv_path, json_path = save_grid(grid, tmp_path, extra={"seed": 0})
        with open(csv_path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["x", "y", "loss", "error"]
        assert len(rows) == 1 + 3 * 4
        x, y, loss, error = map(float, rows[1])
        assert loss == grid.loss[0, 0] and error == grid.error[0, 0]
        sidecar = json.loads(json_path.read_text())
        assert set(sidecar["marked_points"]) == {"w0", "w1", "w2", "mean"}
        assert sidecar["seed"] == 0 and sidecar["nx"] == 3
        assert not list(tmp_path.glob("*.tmp"))


class TestRunLandscape:
    def test_end_to_end_and_determinism(self, small_batch):
        images, labels = small_batch
        ckpt = snapshot_checkpoint(ClipModel(seed=0), {"origin": "test"})
        spec = GridSpec(-0.5, 1.5, -0.5, 1.5, nx=4, ny=4)
        runs = []
        for _ in range(2):
            plane, grid = run_landscape(ckpt, images, labels, CLASS_NAMES,
                                        steps=2, spec=spec)
            runs.append((plane, grid))
        a, b = runs
        assert a[1].loss.tobytes() == b[1].loss.tobytes()
        assert a[0].w2_coords == b[0].w2_coords
        # three distinct vertices: both in-plane coordinates are nonzero
        assert a[0].w1_coords[0] > 0 and a[0].w2_coords[1] > 0

    def test_requires_three_templates(self, small_batch):
        images, labels = small_batch
        ckpt = snapshot_checkpoint(ClipModel(seed=0), {})
        with pytest.raises(LandscapeError, match="3 templates"):
            run_landscape(ckpt, images, labels, CLASS_NAMES,
                          templates=DEFAULT_TEMPLATES[:2])

    def test_adapt_vertices_restores_model(self, small_batch):
        images, _ = small_batch
        model = ClipModel(seed=3)
        before = model.params.snapshot()
        vertices = adapt_vertices(model, images, TEMPLATES3, CLASS_NAMES, steps=1)
        assert model.params.same_bits(before)
        assert len(vertices) == 3
        assert not vertices[0].same_bits(vertices[1])
