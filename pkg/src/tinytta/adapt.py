"""Test-time adaptation: transductive pseudo-labels and multi-template
weight averaging over the visual tower's normalization parameters.

The adaptation loss is a cross-entropy between two batch-level quantities:

  targets  Q = row_softmax((S_img + S_txt) / (2 tau)),  a constant,
  probs    P = row_softmax(cos(z_img_i, z_txt_j) / tau), differentiable,

where S_img / S_txt are the image-image and text-text cosine similarity
matrices of the batch and z_txt_j is the class embedding the current model
assigns to image j. Only the image embeddings carry gradient; the text tower
is frozen throughout, so per-(template, class) text features are computed
once per adaptation call and cached.

Weight averaging runs in two modes. Parallel: every template branch restarts
each round from the running average, adapts `inner_steps`, and the branch
results are averaged. Sequential: the model is set to the running average
once per round, templates are visited in a seeded random order with
parameters carried from one template to the next, a snapshot is taken after
each template's steps, and the snapshots are averaged. One Adam state lives
per branch-and-round (parallel) or per round (sequential). Nothing in this
module ever reads labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import ClipModel, ParameterSet, ln_parameters

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "itap of a {}",
    "a bad photo of the {}",
    "a origami {}",
    "a photo of the large {}",
    "a {} in a video game",
    "art of the {}",
    "a photo of the small {}",
)

LOSS_KINDS = ("transductive_ce", "entropy_min")
MODES = ("parallel", "sequential")


class AdaptationError(RuntimeError):
    """Adaptation produced a non-finite loss or was misconfigured."""


@dataclass(frozen=True)
class TemplateSet:
    """Prompt templates, each with exactly one class-name slot."""

    templates: tuple[str, ...]
    allow_duplicates: bool = False

    def __post_init__(self):
        if len(self.templates) < 1:
            raise ValueError("TemplateSet needs at least one template")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template '{t}' must have exactly one {{}} slot")
        if not self.allow_duplicates and len(set(self.templates)) != len(self.templates):
            raise ValueError("duplicate templates; pass allow_duplicates=True if meant")

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    def __getitem__(self, i: int) -> str:
        return self.templates[i]

    @classmethod
    def default(cls) -> "TemplateSet":
        return cls(DEFAULT_TEMPLATES)


@dataclass(frozen=True)
class MtwaConfig:
    """Multi-template weight averaging settings.

    Serialized under the compact keys mode/L/M/lr/loss/shuffle_templates/
    refresh_pseudo_labels/seed; L is `inner_steps` (optimizer steps per
    template visit) and M is `rounds` (outer averaging rounds).
    """

    mode: str = "sequential"
    inner_steps: int = 2
    rounds: int = 5
    lr: float = 1e-3
    loss: str = "transductive_ce"
    shuffle_templates: bool = True
    refresh_pseudo_labels: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got '{self.loss}'")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "L": self.inner_steps, "M": self.rounds,
                "lr": self.lr, "loss": self.loss,
                "shuffle_templates": self.shuffle_templates,
                "refresh_pseudo_labels": self.refresh_pseudo_labels,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MtwaConfig":
        known = {"mode", "L", "M", "lr", "loss", "shuffle_templates",
                 "refresh_pseudo_labels", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown adaptation config keys: {sorted(unknown)}")
        out = dict(d)
        kwargs = {"mode": out.get("mode", "sequential"),
                  "inner_steps": out.get("L", 2),
                  "rounds": out.get("M", 5),
                  "lr": out.get("lr", 1e-3),
                  "loss": out.get("loss", "transductive_ce"),
                  "shuffle_templates": out.get("shuffle_templates", True),
                  "refresh_pseudo_labels": out.get("refresh_pseudo_labels", True),
                  "seed": out.get("seed", 0)}
        return cls(**kwargs)


@dataclass
class SimilarityBundle:
    """Everything the transductive loss needs for one batch and template."""

    image_sim: np.ndarray        # (B, B) image-image cosine similarities
    text_sim: np.ndarray         # (B, B) cosines of assigned class embeddings
    targets: np.ndarray          # (B, B) constant pseudo-label distribution Q
    probs: T.Tensor              # (B, B) differentiable cross-modal rows P
    pseudo_classes: np.ndarray   # (B,) argmax class index per image


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def class_text_features(model: ClipModel, template: str,
                        class_names: Sequence[str]) -> np.ndarray:
    """Unit-norm embedding of `template` applied to every class name, (K, D)."""
    if len(class_names) < 2:
        raise ValueError(f"need at least 2 classes, got {len(class_names)}")
    prompts = [template.format(name) for name in class_names]
    return model.encode_text(prompts).data.copy()


def template_feature_cache(model: ClipModel, templates: Sequence[str],
                           class_names: Sequence[str]) -> dict[str, np.ndarray]:
    """Per-template class features; valid while the text tower stays frozen."""
    return {t: class_text_features(model, t, class_names) for t in templates}


def cosine_probs(image_emb: np.ndarray, text_features: np.ndarray,
                 temperature: float) -> np.ndarray:
    """Row-softmax over classes of cos(image, class) / temperature.

    Text rows are normalized here, so pre-averaged (non-unit) class embeddings
    are handled by the same cosine; rescaling any text row changes nothing.
    """
    norms = np.linalg.norm(text_features, axis=-1, keepdims=True)
    return _softmax_rows(image_emb @ (text_features / norms).T / temperature)


def classify(model: ClipModel, images: np.ndarray,
             class_prompts: Sequence[str]) -> np.ndarray:
    """Class probabilities (B, K) for explicit prompt strings, no adaptation."""
    if len(class_prompts) < 2:
        raise ValueError(f"need at least 2 class prompts, got {len(class_prompts)}")
    text = model.encode_text(list(class_prompts)).data
    image_emb = model.encode_image(images).data
    return cosine_probs(image_emb, text, model.config.temperature)


def build_pseudo_labels(model: ClipModel, images: np.ndarray, template: str | None,
                        class_names: Sequence[str],
                        text_features: np.ndarray | None = None,
                        frozen: tuple[np.ndarray, np.ndarray] | None = None,
                        ) -> SimilarityBundle:
    """Assemble the transductive targets and differentiable probabilities.

    Class text features come from `text_features` when given (template may
    then be None), otherwise they are encoded from `template`. `frozen`, if
    given, is (targets, instance_text_embeddings) from an earlier step of the
    same template visit: the stale-pseudo-label path reuses both and only
    recomputes the image embeddings.
    """
    tau = model.config.temperature
    z_img = model.encode_image(images)
    zi = z_img.data

    if frozen is None:
        if text_features is not None:
            tf = text_features
        elif template is not None:
            tf = class_text_features(model, template, class_names)
        else:
            raise ValueError("need either a template or text_features")
        pseudo = np.argmax(zi @ tf.T, axis=-1)          # ties: lowest class index
        z_txt = tf[pseudo]
        image_sim = zi @ zi.T
        text_sim = z_txt @ z_txt.T
        targets = _softmax_rows((image_sim + text_sim) / (2.0 * tau))
    else:
        targets, z_txt = frozen
        pseudo = np.full(zi.shape[0], -1, dtype=np.int64)
        image_sim = zi @ zi.T
        text_sim = z_txt @ z_txt.T

    probs = T.softmax(T.scale(T.matmul(z_img, T.constant(z_txt.T)), 1.0 / tau), axis=-1)
    return SimilarityBundle(image_sim=image_sim, text_sim=text_sim, targets=targets,
                            probs=probs, pseudo_classes=pseudo)


def tta_loss(bundle: SimilarityBundle) -> T.Tensor:
    """Batch-mean cross-entropy of the constant targets against the probs."""
    b = bundle.targets.shape[0]
    return T.scale(T.sum(T.mul(T.constant(bundle.targets), T.log(bundle.probs))),
                   -1.0 / b)


def entropy_loss(probs) -> T.Tensor:
    """Mean Shannon entropy of the rows of a (B, K) probability matrix."""
    p = probs if isinstance(probs, T.Tensor) else T.constant(np.asarray(probs))
    b = p.shape[0]
    return T.scale(T.sum(T.xlogx(p)), -1.0 / b)


def _classify_tensor(model: ClipModel, images: np.ndarray,
                     text_features: np.ndarray) -> T.Tensor:
    """Differentiable class probabilities against fixed text features."""
    norms = np.linalg.norm(text_features, axis=-1, keepdims=True)
    z = model.encode_image(images)
    return T.softmax(T.scale(T.matmul(z, T.constant((text_features / norms).T)),
                             1.0 / model.config.temperature), axis=-1)


def _loss_for_step(model, images, template, class_names, loss_kind, tf, frozen):
    """One step's loss tensor plus the (targets, z_txt) pair it used."""
    if loss_kind == "entropy_min":
        return entropy_loss(_classify_tensor(model, images, tf)), None
    bundle = build_pseudo_labels(model, images, template, class_names,
                                 text_features=tf, frozen=frozen)
    if frozen is None:
        frozen = (bundle.targets, tf[bundle.pseudo_classes])
    return tta_loss(bundle), frozen


def _adapt_steps(model: ClipModel, opt: T.Adam, images: np.ndarray, template: str,
                 class_names: Sequence[str], steps: int, loss_kind: str,
                 refresh: bool, tf: np.ndarray) -> None:
    """Run `steps` optimizer steps for one template visit, in place."""
    frozen = None
    for step in range(steps):
        loss, computed = _loss_for_step(model, images, template, class_names,
                                        loss_kind, tf, frozen)
        if not refresh and frozen is None:
            frozen = computed
        value = loss.item()
        if not np.isfinite(value):
            raise AdaptationError(
                f"non-finite loss {value} at step {step} of template '{template}'")
        T.backward(loss)
        opt.step()


def adapt_single_template(model: ClipModel, images: np.ndarray, template: str,
                          class_names: Sequence[str], inner_steps: int = 2,
                          lr: float = 1e-3, loss_kind: str = "transductive_ce",
                          refresh_pseudo_labels: bool = True,
                          text_features: np.ndarray | None = None) -> ParameterSet:
    """Adapt the visual normalization parameters with one template.

    Mutates the model in place and returns a snapshot of the adapted
    normalization parameters. Fresh optimizer state every call.
    """
    if inner_steps < 1:
        raise AdaptationError(f"inner_steps must be >= 1, got {inner_steps}")
    if loss_kind not in LOSS_KINDS:
        raise AdaptationError(f"unknown loss kind '{loss_kind}'")
    model.adaptation_mode()
    ln = ln_parameters(model)
    opt = T.Adam(list(ln), lr=lr)
    tf = text_features if text_features is not None \
        else class_text_features(model, template, class_names)
    _adapt_steps(model, opt, images, template, class_names, inner_steps,
                 loss_kind, refresh_pseudo_labels, tf)
    return ln.snapshot()


def average_parameters(sets: Sequence[ParameterSet]) -> ParameterSet:
    """Elementwise mean across congruent parameter sets.

    Summation is a balanced pairwise tree over the given order: deterministic,
    and exact for power-of-two counts of identical inputs.
    """
    if not sets:
        raise ValueError("average_parameters: empty list")
    names = sets[0].names
    for ps in sets[1:]:
        if ps.names != names:
            raise ValueError(f"parameter sets differ: {names[:2]} vs {ps.names[:2]}")
    out = ParameterSet()
    for name in names:
        stack = [ps[name].data for ps in sets]
        for a, b in zip(stack, stack[1:]):
            if a.shape != b.shape:
                raise ValueError(f"parameter '{name}': shapes {a.shape} vs {b.shape}")
        while len(stack) > 1:
            stack = [stack[i] + stack[i + 1] if i + 1 < len(stack) else stack[i]
                     for i in range(0, len(stack), 2)]
        out.add(name, T.Tensor(stack[0] / len(sets)))
    return out


def watt_parallel(model: ClipModel, images: np.ndarray,
                  templates: TemplateSet | Sequence[str],
                  class_names: Sequence[str], cfg: MtwaConfig,
                  text_features: dict[str, np.ndarray] | None = None) -> ParameterSet:
    """Parallel weight averaging; leaves the model at the final average."""
    template_list = list(templates)
    if not template_list:
        raise AdaptationError("no templates to adapt with")
    model.adaptation_mode()
    ln = ln_parameters(model)
    tf = text_features or template_feature_cache(model, template_list, class_names)

    averaged = ln.snapshot()
    for _ in range(cfg.rounds):
        branches = []
        for template in template_list:
            ln.load(averaged)
            branches.append(adapt_single_template(
                model, images, template, class_names, cfg.inner_steps, cfg.lr,
                cfg.loss, cfg.refresh_pseudo_labels, tf[template]))
        averaged = average_parameters(branches)
    ln.load(averaged)
    return averaged


def watt_sequential(model: ClipModel, images: np.ndarray,
                    templates: TemplateSet | Sequence[str],
                    class_names: Sequence[str], cfg: MtwaConfig,
                    rng: np.random.Generator | None = None,
                    text_features: dict[str, np.ndarray] | None = None) -> ParameterSet:
    """Sequential weight averaging; leaves the model at the final average.

    Parameters carry over from template to template within a round; the
    optimizer state is fresh at each round and shared across its visits.
    Visit order is drawn from `rng` when shuffling is on, but the snapshots
    are averaged in template-index order so the mean itself is order-stable.
    """
    template_list = list(templates)
    if not template_list:
        raise AdaptationError("no templates to adapt with")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    model.adaptation_mode()
    ln = ln_parameters(model)
    tf = text_features or template_feature_cache(model, template_list, class_names)

    averaged = ln.snapshot()
    h = len(template_list)
    for _ in range(cfg.rounds):
        ln.load(averaged)
        opt = T.Adam(list(ln), lr=cfg.lr)
        order = rng.permutation(h) if cfg.shuffle_templates else np.arange(h)
        snapshots: list[ParameterSet | None] = [None] * h
        for idx in order:
            template = template_list[idx]
            _adapt_steps(model, opt, images, template, class_names,
                         cfg.inner_steps, cfg.loss, cfg.refresh_pseudo_labels,
                         tf[template])
            snapshots[idx] = ln.snapshot()
        averaged = average_parameters([s for s in snapshots if s is not None])
    ln.load(averaged)
    return averaged


def run_mtwa(model: ClipModel, images: np.ndarray,
             templates: TemplateSet | Sequence[str], class_names: Sequence[str],
             cfg: MtwaConfig, rng: np.random.Generator | None = None,
             text_features: dict[str, np.ndarray] | None = None) -> ParameterSet:
    """Dispatch on cfg.mode."""
    if cfg.mode == "parallel":
        return watt_parallel(model, images, templates, class_names, cfg, text_features)
    return watt_sequential(model, images, templates, class_names, cfg, rng, text_features)


def average_outputs(model: ClipModel, branch_params: Sequence[ParameterSet],
                    images: np.ndarray, text_features: np.ndarray) -> np.ndarray:
    """Mean class-probability matrix across weight branches.

    Each branch's normalization parameters are installed in turn; the model is
    restored to its incoming parameters afterwards.
    """
    if not branch_params:
        raise ValueError("average_outputs: no branches")
    ln = ln_parameters(model)
    before = ln.snapshot()
    tau = model.config.temperature
    total = None
    for ps in branch_params:
        ln.load(ps)
        z = model.encode_image(images).data
        p = cosine_probs(z, text_features, tau)
        total = p if total is None else total + p
    ln.load(before)
    return total / len(branch_params)
