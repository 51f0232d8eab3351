"""Fast self-checks: oracle and invariant spot tests runnable in seconds.

Each check returns quietly or raises AssertionError; `run_all` converts that
into (name, passed, detail) tuples for the CLI to print, one line per check.
These are the quick companions to the full pytest suite, not a replacement.
"""

from __future__ import annotations

import io
import traceback
from typing import Callable

import numpy as np

from . import tensor as T
from .adapt import (DEFAULT_TEMPLATES, MtwaConfig, SimilarityBundle,
                    TemplateSet, adapt_single_template, average_parameters,
                    build_pseudo_labels, class_text_features, entropy_loss,
                    tta_loss, watt_parallel, watt_sequential)
from .data import CLASS_NAMES, Corruption, apply_corruption, generate_dataset
from .evaluate import ensemble_text_embedding
from .gradcheck import max_relative_error
from .landscape import build_plane
from .model import ClipModel, ln_parameters, load_checkpoint, save_checkpoint, \
    snapshot_checkpoint
from .pretrain import contrastive_loss

GRAD_TOL = 1e-4


def _tiny_images(n=8, seed=5):
    ds = generate_dataset(seed=seed, train_per_class=1, test_per_class=max(1, n // 8))
    return ds.test.images[:n]


def check_op_gradients() -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 4))
    gain = rng.normal(size=4) * 0.1 + 1.0
    bias = rng.normal(size=4) * 0.1

    def f(ts):
        x_, w_, g_, b_ = ts
        h = T.matmul(T.layer_norm(x_, g_, b_), w_)
        return T.sum(T.mul(T.softmax(h), T.gelu(h)))

    err = max_relative_error(f, [x, w, gain, bias])
    assert err < GRAD_TOL, f"composite op gradient error {err:.2e}"


def check_tta_loss_gradient() -> None:
    # targets frozen with distinct text rows: identical rows zero the
    # gradient exactly and the comparison stops testing anything
    model = ClipModel(seed=0)
    model.adaptation_mode()
    images = _tiny_images(2)
    tf = class_text_features(model, DEFAULT_TEMPLATES[0], CLASS_NAMES)
    rng = np.random.default_rng(19)
    frozen = (rng.dirichlet(np.ones(2), size=2), tf[[0, 1]])

    def loss_value() -> float:
        return tta_loss(build_pseudo_labels(
            model, images, None, CLASS_NAMES, frozen=frozen)).item()

    loss = tta_loss(build_pseudo_labels(model, images, None, CLASS_NAMES,
                                        frozen=frozen))
    T.backward(loss)
    ln = ln_parameters(model)
    peak = max(float(np.abs(t.grad).max()) for _, t in ln)
    assert peak > 1e-6, f"vacuous gradient check: max |grad| {peak:.1e}"
    h = 1e-5
    worst = 0.0
    for _, t in ln:
        flat, grad = t.data.reshape(-1), t.grad.reshape(-1)
        for j in (0, len(flat) - 1):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            down = loss_value()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            denom = max(1.0, abs(numeric), abs(grad[j]))
            worst = max(worst, abs(grad[j] - numeric) / denom)
        t.zero_grad()
    assert worst < GRAD_TOL, f"tta_loss gradient error {worst:.2e}"


def check_pseudo_label_algebra() -> None:
    model = ClipModel(seed=1)
    rng = np.random.default_rng(2)
    for b in (1, 2, 4, 8):
        images = _tiny_images(8)[rng.choice(8, size=b, replace=False)]
        bundle = build_pseudo_labels(model, images, DEFAULT_TEMPLATES[0], CLASS_NAMES)
        assert np.allclose(bundle.targets.sum(axis=-1), 1.0, atol=1e-10)
        assert np.allclose(bundle.image_sim, bundle.image_sim.T, atol=1e-10)
        assert np.allclose(np.diag(bundle.image_sim), 1.0, atol=1e-10)
        assert np.allclose(np.diag(bundle.text_sim), 1.0, atol=1e-10)
    one = build_pseudo_labels(model, _tiny_images(1), DEFAULT_TEMPLATES[0], CLASS_NAMES)
    assert np.allclose(one.targets, [[1.0]], atol=1e-12)
    same = np.repeat(_tiny_images(1), 4, axis=0)
    uniform = build_pseudo_labels(model, same, DEFAULT_TEMPLATES[0], CLASS_NAMES)
    assert np.allclose(uniform.targets, 0.25, atol=1e-10)


def check_loss_oracles() -> None:
    rng = np.random.default_rng(3)
    for _ in range(10):
        b = int(rng.integers(2, 6))
        q = rng.dirichlet(np.ones(b), size=b)
        p = rng.dirichlet(np.ones(b), size=b)
        bundle = SimilarityBundle(np.eye(b), np.eye(b), q, T.constant(p),
                                  np.zeros(b, dtype=np.int64))
        brute = -sum(q[i, j] * np.log(p[i, j])
                     for i in range(b) for j in range(b)) / b
        assert abs(tta_loss(bundle).item() - brute) < 1e-10
    assert entropy_loss(np.eye(3)).item() == 0.0
    assert abs(entropy_loss(np.full((2, 8), 0.125)).item() - np.log(8)) < 1e-12
    z = T.constant(np.repeat(np.full((1, 16), 0.25), 4, axis=0))
    assert abs(contrastive_loss(z, z, 0.07).item() - np.log(4)) < 1e-12


def check_reduction_identities() -> None:
    images = _tiny_images(8)
    cfg = MtwaConfig(inner_steps=1, rounds=2)
    mp, ms = ClipModel(seed=4), ClipModel(seed=4)
    one = TemplateSet((DEFAULT_TEMPLATES[0],))
    rp = watt_parallel(mp, images, one, CLASS_NAMES, cfg)
    rs = watt_sequential(ms, images, one, CLASS_NAMES, cfg, np.random.default_rng(0))
    assert rp.same_bits(rs), "H=1 parallel != sequential"

    frozen = ClipModel(seed=4)
    before = frozen.params.snapshot()
    watt_parallel(frozen, images, TemplateSet.default(), CLASS_NAMES,
                  MtwaConfig(inner_steps=1, rounds=1, lr=0.0))
    assert frozen.params.same_bits(before), "lr=0 is not the identity"


def check_averaging_oracle() -> None:
    rng = np.random.default_rng(5)
    sets = []
    for _ in range(3):
        ps = ln_parameters(ClipModel(seed=0)).snapshot()
        for _, t in ps:
            t.data[...] = rng.normal(size=t.data.shape)
        sets.append(ps)
    avg = average_parameters(sets)
    for name, t in avg:
        expected = np.mean([ps[name].data for ps in sets], axis=0)
        assert np.allclose(t.data, expected, atol=1e-12)
    mirrored = sets[0].snapshot()
    for _, t in mirrored:
        t.data[...] = -t.data
    zero = average_parameters([sets[0], mirrored])
    assert all(np.all(t.data == 0.0) for _, t in zero), "opposite pair average"


def check_plane_geometry() -> None:
    rng = np.random.default_rng(6)
    sets = []
    for _ in range(3):
        ps = ln_parameters(ClipModel(seed=0)).snapshot()
        for _, t in ps:
            t.data[...] = rng.normal(size=t.data.shape)
        sets.append(ps)
    plane = build_plane(*sets)
    assert abs(np.linalg.norm(plane.u_hat) - 1.0) < 1e-10
    assert abs(np.linalg.norm(plane.v_hat) - 1.0) < 1e-10
    assert abs(plane.u_hat @ plane.v_hat) < 1e-10
    assert plane.point_parameters(0.0, 0.0).same_bits(sets[0])
    rebuilt = plane.point_parameters(*plane.w2_coords).flatten()
    assert np.allclose(rebuilt, sets[2].flatten(), atol=1e-8)


def check_checkpoint_round_trip() -> None:
    import tempfile
    model = ClipModel(seed=7)
    ckpt = snapshot_checkpoint(model, {"origin": "verify"})
    with tempfile.TemporaryDirectory() as d:
        path_a, path_b = f"{d}/a.ckpt", f"{d}/b.ckpt"
        save_checkpoint(path_a, ckpt)
        loaded = load_checkpoint(path_a)
        save_checkpoint(path_b, loaded)
        with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
            assert fa.read() == fb.read(), "checkpoint round trip not byte-stable"
    rebuilt = loaded.build_model()
    assert rebuilt.params.same_bits(model.params)


def check_adaptation_determinism() -> None:
    images = _tiny_images(8)
    cfg = MtwaConfig(inner_steps=1, rounds=1)
    outs = []
    for _ in range(2):
        model = ClipModel(seed=8)
        outs.append(watt_sequential(model, images, TemplateSet.default(),
                                    CLASS_NAMES, cfg, np.random.default_rng(42)))
    assert outs[0].same_bits(outs[1]), "same-seed adaptation diverged"


def check_text_head_identities() -> None:
    model = ClipModel(seed=9)
    single = ensemble_text_embedding(model, DEFAULT_TEMPLATES[:1], CLASS_NAMES)
    prompts = [DEFAULT_TEMPLATES[0].format(n) for n in CLASS_NAMES]
    assert single.tobytes() == model.encode_text(prompts).data.tobytes()
    ens = ensemble_text_embedding(model, DEFAULT_TEMPLATES, CLASS_NAMES)
    renorm = ens / np.linalg.norm(ens, axis=-1, keepdims=True)
    z = model.encode_image(_tiny_images(8)).data
    assert np.array_equal(np.argmax(z @ ens.T, axis=-1),
                          np.argmax(z @ renorm.T, axis=-1))


def check_data_pipeline() -> None:
    a = generate_dataset(seed=11, train_per_class=2, test_per_class=2)
    b = generate_dataset(seed=11, train_per_class=2, test_per_class=2)
    assert a.test.images.tobytes() == b.test.images.tobytes()
    assert a.train.role == "train" and a.test.role == "test"
    corrupted = apply_corruption(a.test.images, Corruption("gaussian_noise", 3), 0)
    again = apply_corruption(a.test.images, Corruption("gaussian_noise", 3), 0)
    assert corrupted.tobytes() == again.tobytes()
    assert corrupted.min() >= 0.0 and corrupted.max() <= 1.0
    assert a.test.images.tobytes() == b.test.images.tobytes(), "input mutated"


def check_adapt_touches_only_norm_parameters() -> None:
    model = ClipModel(seed=10)
    before = model.params.snapshot()
    adapt_single_template(model, _tiny_images(8), DEFAULT_TEMPLATES[0],
                          CLASS_NAMES, inner_steps=1)
    ln_names = set(ln_parameters(model).names)
    for name, t in model.params:
        same = t.data.tobytes() == before[name].data.tobytes()
        assert same or name in ln_names, f"non-norm parameter '{name}' changed"


ALL_CHECKS: tuple[tuple[str, Callable[[], None]], ...] = (
    ("op_gradients_match_finite_differences", check_op_gradients),
    ("tta_loss_gradient_matches_finite_differences", check_tta_loss_gradient),
    ("pseudo_label_algebra_invariants", check_pseudo_label_algebra),
    ("loss_values_match_brute_force_oracles", check_loss_oracles),
    ("reduction_identities_bitwise", check_reduction_identities),
    ("parameter_averaging_matches_mean_oracle", check_averaging_oracle),
    ("landscape_plane_geometry", check_plane_geometry),
    ("checkpoint_round_trip_byte_stable", check_checkpoint_round_trip),
    ("same_seed_adaptation_bit_identical", check_adaptation_determinism),
    ("text_head_ensemble_identities", check_text_head_identities),
    ("data_generation_and_corruption_deterministic", check_data_pipeline),
    ("adaptation_only_touches_norm_parameters", check_adapt_touches_only_norm_parameters),
)


def run_all() -> list[tuple[str, bool, str]]:
    """Run every check; (name, passed, detail) per check, failures included."""
    results = []
    for name, fn in ALL_CHECKS:
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # report, never abort the suite
            buf = io.StringIO()
            traceback.print_exception(exc, file=buf)
            last = buf.getvalue().strip().splitlines()[-1]
            results.append((name, False, last))
    return results
