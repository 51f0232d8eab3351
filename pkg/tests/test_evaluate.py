"""Evaluation heads, episodic adaptation runs, and the sweep harness."""

import json

import numpy as np
import pytest

from tinytta.adapt import DEFAULT_TEMPLATES, MtwaConfig
from tinytta.data import CLASS_NAMES, generate_dataset
from tinytta.evaluate import (EvalConfig, ExperimentResult, adapt_and_evaluate,
                              ensemble_text_embedding, evaluate, evaluate_split,
                              run_sweep, seed_int, seed_stream, summary_pivot)
from tinytta.model import ClipModel, ln_parameters, snapshot_checkpoint

SMALL_EVAL = EvalConfig(templates=DEFAULT_TEMPLATES[:2], batch_size=16)
SMALL_MTWA = MtwaConfig(inner_steps=1, rounds=1)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(seed=3, train_per_class=2, test_per_class=8)


@pytest.fixture(scope="module")
def model():
    return ClipModel(seed=0)


class TestSeedStreams:
    def test_deterministic_and_label_separated(self):
        a = seed_stream(0, "adapt", 3).integers(1 << 30)
        b = seed_stream(0, "adapt", 3).integers(1 << 30)
        c = seed_stream(0, "batch_order", 3).integers(1 << 30)
        assert a == b
        assert a != c

    def test_seed_int_stable(self):
        assert seed_int(7, "x") == seed_int(7, "x")
        assert seed_int(7, "x") != seed_int(8, "x")

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            seed_stream(-1, "adapt")


class TestEvalConfig:
    def test_round_trip(self):
        cfg = EvalConfig(head="single_temp", templates=DEFAULT_TEMPLATES[:3],
                         batch_size=32)
        assert EvalConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ValueError, match="head"):
            EvalConfig(head="logit_avg")
        with pytest.raises(ValueError, match="batch_size"):
            EvalConfig(batch_size=0)
        with pytest.raises(ValueError, match="template"):
            EvalConfig(templates=())
        with pytest.raises(ValueError, match="unknown"):
            EvalConfig.from_dict({"head": "text_avg", "bogus": 1})


class TestExperimentResult:
    def test_round_trip(self):
        r = ExperimentResult(dataset="synthetic", corruption="gaussian_noise",
                             severity=3, method="watt_sequential", seed=1,
                             accuracy=0.5, per_class_accuracy=(0.5, 0.5),
                             n_samples=64, wall_seconds=1.0,
                             config={"axis": "batch_size", "point": 4})
        assert ExperimentResult.from_dict(r.to_dict()) == r


class TestEnsembleTextEmbedding:
    def test_single_template_is_bitwise_plain_encoding(self, model):
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES[:1], CLASS_NAMES)
        prompts = [DEFAULT_TEMPLATES[0].format(n) for n in CLASS_NAMES]
        plain = model.encode_text(prompts).data
        assert ens.tobytes() == plain.tobytes()

    def test_duplicate_pair_equals_single(self, model):
        pair = ensemble_text_embedding(model, [DEFAULT_TEMPLATES[0]] * 2, CLASS_NAMES)
        single = ensemble_text_embedding(model, DEFAULT_TEMPLATES[:1], CLASS_NAMES)
        assert pair.tobytes() == single.tobytes()

    def test_matches_brute_force_mean(self, model):
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES, CLASS_NAMES)
        stacks = [model.encode_text([t.format(n) for n in CLASS_NAMES]).data
                  for t in DEFAULT_TEMPLATES]
        np.testing.assert_allclose(ens, np.mean(stacks, axis=0), atol=1e-12)

    def test_not_renormalized(self, model):
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES, CLASS_NAMES)
        norms = np.linalg.norm(ens, axis=-1)
        assert np.any(np.abs(norms - 1.0) > 1e-6)

    def test_argmax_invariant_to_renormalization(self, model, dataset):
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES, CLASS_NAMES)
        renorm = ens / np.linalg.norm(ens, axis=-1, keepdims=True)
        z = model.encode_image(dataset.test.images).data
        np.testing.assert_array_equal(np.argmax(z @ ens.T, axis=-1),
                                      np.argmax(z @ renorm.T, axis=-1))


class TestEvaluateSplit:
    def test_perfect_prediction_fixture(self, model, dataset):
        images = dataset.test.images[:8]
        text = model.encode_image(images).data  # class k's "text" = image k
        acc, per_class = evaluate_split(model, images, np.arange(8), text, 8)
        assert acc == 1.0
        assert per_class == (1.0,) * 8

    def test_shuffled_labels_near_chance(self, model, dataset):
        images = dataset.test.images
        labels = np.random.default_rng(0).permutation(dataset.test.labels)
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES, CLASS_NAMES)
        acc, _ = evaluate_split(model, images, labels, ens, 8)
        assert acc <= 0.5

    def test_batch_size_invariance(self, model, dataset):
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES[:2], CLASS_NAMES)
        a = evaluate_split(model, dataset.test.images, dataset.test.labels, ens, 8,
                           batch_size=256)
        b = evaluate_split(model, dataset.test.images, dataset.test.labels, ens, 8,
                           batch_size=7)
        assert a == b

    def test_accuracy_is_count_weighted_mean(self, model, dataset):
        images, labels = dataset.test.images[:20], dataset.test.labels[:20]
        ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES[:1], CLASS_NAMES)
        acc, per_class = evaluate_split(model, images, labels, ens, 8)
        counts = np.bincount(labels, minlength=8)
        expected = np.sum(np.array(per_class) * counts) / counts.sum()
        np.testing.assert_allclose(acc, expected, atol=1e-12)

    def test_evaluate_wrapper_builds_result(self, model, dataset):
        res = evaluate(model, dataset.test.images, dataset.test.labels,
                       SMALL_EVAL, corruption="none", seed=4)
        assert res.method == "no_adapt"
        assert res.n_samples == len(dataset.test.images)
        assert 0.0 <= res.accuracy <= 1.0
        assert res.config["eval"]["batch_size"] == 16
        total = np.bincount(dataset.test.labels, minlength=8)
        expected = np.sum(np.array(res.per_class_accuracy) * total) / total.sum()
        np.testing.assert_allclose(res.accuracy, expected, atol=1e-12)


class TestAdaptAndEvaluate:
    def test_restores_parameters_and_labels_only_in_tally(self, dataset):
        model = ClipModel(seed=1)
        before = model.params.snapshot()
        res = adapt_and_evaluate(model, dataset.test.images[:32],
                                 dataset.test.labels[:32],
                                 SMALL_MTWA, SMALL_EVAL, seed=0)
        assert model.params.same_bits(before)
        assert res.n_samples == 32
        assert res.method == "watt_sequential"

    def test_same_seed_reproduces_result(self, dataset):
        outs = []
        for _ in range(2):
            model = ClipModel(seed=1)
            r = adapt_and_evaluate(model, dataset.test.images[:32],
                                   dataset.test.labels[:32],
                                   SMALL_MTWA, SMALL_EVAL, seed=5)
            d = r.to_dict()
            d.pop("wall_seconds")
            outs.append(d)
        assert outs[0] == outs[1]

    def test_entropy_method_name_and_parallel(self, dataset):
        model = ClipModel(seed=1)
        cfg = MtwaConfig(mode="parallel", inner_steps=1, rounds=1,
                         loss="entropy_min")
        r = adapt_and_evaluate(model, dataset.test.images[:16],
                               dataset.test.labels[:16], cfg, SMALL_EVAL, seed=0)
        assert r.method == "entropy_min_parallel"

    def test_continual_mode_also_restores(self, dataset):
        model = ClipModel(seed=1)
        before = model.params.snapshot()
        adapt_and_evaluate(model, dataset.test.images[:32],
                           dataset.test.labels[:32], SMALL_MTWA, SMALL_EVAL,
                           seed=0, continual=True)
        assert model.params.same_bits(before)

    def test_single_temp_head_accepted(self, dataset):
        model = ClipModel(seed=1)
        cfg = EvalConfig(head="single_temp", templates=DEFAULT_TEMPLATES[:2],
                         batch_size=16)
        r = adapt_and_evaluate(model, dataset.test.images[:16],
                               dataset.test.labels[:16], SMALL_MTWA, cfg, seed=0)
        assert 0.0 <= r.accuracy <= 1.0


class TestSummaryPivot:
    def test_means_over_seeds(self):
        def row(point, kind, seed, acc):
            return ExperimentResult(dataset="synthetic", corruption=kind,
                                    severity=3, method="watt_sequential",
                                    seed=seed, accuracy=acc,
                                    per_class_accuracy=(acc,), n_samples=1,
                                    wall_seconds=0.0,
                                    config={"axis": "batch_size", "point": point})
        rows = [row(4, "gaussian_noise", 0, 0.5), row(4, "gaussian_noise", 1, 0.7),
                row(8, "gaussian_noise", 0, 0.9)]
        table = summary_pivot(rows)
        assert table[0] == ["point", "gaussian_noise@3"]
        assert table[1] == ["4", 0.6]
        assert table[2] == ["8", 0.9]


class TestRunSweep:
    @pytest.fixture()
    def checkpoint(self):
        return snapshot_checkpoint(ClipModel(seed=1), {"origin": "test"})

    def _sweep(self, checkpoint, dataset, out, axis, grid, **kw):
        kw.setdefault("mtwa_cfg", SMALL_MTWA)
        kw.setdefault("eval_cfg", SMALL_EVAL)
        kw.setdefault("corruptions", ("none",))
        kw.setdefault("subset_size", 16)
        return run_sweep(checkpoint, dataset, axis, grid, seeds=(0,),
                         out_dir=out, **kw)

    def test_batch_size_axis_rows_and_files(self, checkpoint, dataset, tmp_path):
        rows = self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4, 8))
        assert len(rows) == 2
        assert {r.config["point"] for r in rows} == {4, 8}
        lines = (tmp_path / "sweep_batch_size.jsonl").read_text().splitlines()
        assert len(lines) == 2
        manifest = json.loads((tmp_path / "sweep_batch_size_manifest.json").read_text())
        assert manifest["done"] and manifest["total_rows"] == 2
        csv_text = (tmp_path / "sweep_batch_size_summary.csv").read_text()
        assert csv_text.startswith("point,none@0")

    def test_resume_skips_completed_rows(self, checkpoint, dataset, tmp_path):
        self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4, 8))
        first = (tmp_path / "sweep_batch_size.jsonl").read_text()
        rows = self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4, 8))
        assert (tmp_path / "sweep_batch_size.jsonl").read_text() == first
        assert len(rows) == 2
        rows = self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4, 8, 16))
        lines = (tmp_path / "sweep_batch_size.jsonl").read_text().splitlines()
        assert len(lines) == 3 and len(rows) == 3

    def test_resume_tolerates_torn_final_line(self, checkpoint, dataset, tmp_path):
        self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4,))
        path = tmp_path / "sweep_batch_size.jsonl"
        path.write_text(path.read_text() + '{"dataset": "syn')  # torn write
        rows = self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4, 8))
        assert len(rows) == 2

    def test_template_count_axis_subsets_pool(self, checkpoint, dataset, tmp_path):
        rows = self._sweep(checkpoint, dataset, tmp_path, "template_count", (1, 2),
                           eval_cfg=EvalConfig(templates=DEFAULT_TEMPLATES,
                                               batch_size=16))
        for r in rows:
            chosen = r.config["eval"]["templates"]
            assert len(chosen) == r.config["point"]
            assert set(chosen) <= set(DEFAULT_TEMPLATES)

    def test_schedule_axis_sets_steps_and_rounds(self, checkpoint, dataset, tmp_path):
        rows = self._sweep(checkpoint, dataset, tmp_path, "schedule",
                           ("1x2", (2, 1)))
        got = {(r.config["mtwa"]["L"], r.config["mtwa"]["M"]) for r in rows}
        assert got == {(1, 2), (2, 1)}

    def test_strategy_axis_methods(self, checkpoint, dataset, tmp_path):
        rows = self._sweep(checkpoint, dataset, tmp_path, "strategy",
                           ("text_avg", "output_avg", "weight_avg_2x5"))
        assert {r.method for r in rows} == {"text_avg", "output_avg",
                                            "weight_avg_2x5"}
        for r in rows:
            assert 0.0 <= r.accuracy <= 1.0

    def test_corruption_axis_uses_grid_kinds(self, checkpoint, dataset, tmp_path):
        rows = self._sweep(checkpoint, dataset, tmp_path, "corruption",
                           ("gaussian_noise", "none"))
        by_kind = {r.corruption: r for r in rows}
        assert by_kind["gaussian_noise"].severity == 3
        assert by_kind["none"].severity == 0

    def test_threads_match_single_thread_results(self, checkpoint, dataset, tmp_path):
        a = self._sweep(checkpoint, dataset, tmp_path / "a", "batch_size", (4, 8, 16),
                        threads=1)
        b = self._sweep(checkpoint, dataset, tmp_path / "b", "batch_size", (4, 8, 16),
                        threads=3)
        key = lambda r: (str(r.config["point"]), r.corruption, r.seed)
        accs_a = {key(r): r.accuracy for r in a}
        accs_b = {key(r): r.accuracy for r in b}
        assert accs_a == accs_b

    def test_rerun_rows_identical_modulo_wall_time(self, checkpoint, dataset, tmp_path):
        a = self._sweep(checkpoint, dataset, tmp_path / "a", "batch_size", (4,))
        b = self._sweep(checkpoint, dataset, tmp_path / "b", "batch_size", (4,))
        da, db = a[0].to_dict(), b[0].to_dict()
        da.pop("wall_seconds"), db.pop("wall_seconds")
        assert da == db

    def test_validation_errors(self, checkpoint, dataset, tmp_path):
        with pytest.raises(ValueError, match="axis"):
            self._sweep(checkpoint, dataset, tmp_path, "learning_rate", (1,))
        with pytest.raises(ValueError, match="grid"):
            self._sweep(checkpoint, dataset, tmp_path, "batch_size", ())
        with pytest.raises(ValueError, match="threads"):
            self._sweep(checkpoint, dataset, tmp_path, "batch_size", (4,), threads=0)
        with pytest.raises(ValueError, match="strategy"):
            self._sweep(checkpoint, dataset, tmp_path, "strategy", ("logit_soup",))
        with pytest.raises(ValueError, match="template_count"):
            self._sweep(checkpoint, dataset, tmp_path, "template_count", (9,))
