"""Contrastive pretraining of the dual encoder on the clean training split.

Symmetric InfoNCE against the in-batch diagonal, fixed temperature. Captions
are a single prompt template applied to each image's class name. Training is
deterministic given the seed; the returned checkpoint must clear a zero-shot
accuracy gate on the clean test split or pretraining fails loudly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iter
from .model import Checkpoint, ClipModel, snapshot_checkpoint

DEFAULT_CAPTION_TEMPLATE = "a photo of a {}"


class PretrainError(RuntimeError):
    """Pretraining failed to produce a usable checkpoint."""


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 3e-4
    temperature: float = 0.07
    caption_template: str = DEFAULT_CAPTION_TEMPLATE
    min_zero_shot: float = 0.90

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def contrastive_loss(image_emb: T.Tensor, text_emb: T.Tensor,
                     temperature: float) -> T.Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropies.

    Row i of each direction's softmax should put its mass on column i; batches
    of fewer than two pairs carry no contrastive signal and are rejected.
    """
    b = image_emb.shape[0]
    if b < 2:
        raise ValueError(f"contrastive_loss: batch of {b} has no negatives")
    if image_emb.shape != text_emb.shape:
        raise T.ShapeError(
            f"contrastive_loss: embedding shapes {image_emb.shape} vs {text_emb.shape}")
    eye = T.constant(np.eye(b))
    logits = T.scale(T.matmul(image_emb, T.transpose(text_emb, (1, 0))), 1.0 / temperature)
    i2t = T.scale(T.sum(T.mul(eye, T.log(T.softmax(logits, axis=-1)))), -1.0 / b)
    t2i = T.scale(T.sum(T.mul(eye, T.log(T.softmax(logits, axis=0)))), -1.0 / b)
    return T.scale(T.add(i2t, t2i), 0.5)


def zero_shot_accuracy(model: ClipModel, images: np.ndarray, labels: np.ndarray,
                       class_names: tuple[str, ...],
                       template: str = DEFAULT_CAPTION_TEMPLATE,
                       batch_size: int = 256) -> float:
    """Classification accuracy with the cosine head, no adaptation."""
    prompts = [template.format(name) for name in class_names]
    text = model.encode_text(prompts).data
    correct = 0
    for start in range(0, len(images), batch_size):
        z = model.encode_image(images[start:start + batch_size]).data
        preds = np.argmax(z @ text.T, axis=-1)
        correct += int((preds == labels[start:start + batch_size]).sum())
    return correct / len(images)


def pretrain(model: ClipModel, dataset: Dataset, cfg: PretrainConfig,
             seed: int = 0, metrics_path=None) -> Checkpoint:
    """Train both towers; returns a checkpoint that cleared the zero-shot gate."""
    split = dataset.train
    if split.role != "train":
        raise PretrainError(f"refusing to pretrain on split tagged '{split.role}'")

    model.train_all()
    opt = T.Adam(list(model.params), lr=cfg.lr)
    caption_of = [cfg.caption_template.format(name) for name in dataset.class_names]

    t_start = time.perf_counter()
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        batch_seed = np.random.SeedSequence([int(seed), 0xB47C4, epoch])
        epoch_seed = int(batch_seed.generate_state(1)[0])
        losses = []
        for batch in batch_iter(split.images, split.labels, cfg.batch_size,
                                seed=epoch_seed, drop_last=True):
            img_emb = model.encode_image(batch.images)
            txt_emb = model.encode_text([caption_of[y] for y in batch.labels])
            loss = contrastive_loss(img_emb, txt_emb, cfg.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise PretrainError(
                    f"non-finite loss {value} at epoch {epoch}; lower the lr")
            T.backward(loss)
            opt.step()
            losses.append(value)
        epoch_losses.append(float(np.mean(losses)))

    accuracy = zero_shot_accuracy(model, dataset.test.images, dataset.test.labels,
                                  dataset.class_names, cfg.caption_template)
    wall = time.perf_counter() - t_start

    if metrics_path is not None:
        from . import __version__
        metrics = {
            "epoch_losses": epoch_losses,
            "zero_shot_accuracy": accuracy,
            "wall_seconds": wall,
            "version": __version__,
            "config": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                       "lr": cfg.lr, "temperature": cfg.temperature,
                       "caption_template": cfg.caption_template,
                       "seed": int(seed)},
        }
        with open(metrics_path, "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)

    if accuracy < cfg.min_zero_shot:
        raise PretrainError(
            f"zero-shot accuracy {accuracy:.4f} is below the {cfg.min_zero_shot:.2f} "
            f"gate after {cfg.epochs} epochs; increase epochs or adjust the lr "
            f"before using this checkpoint")

    return snapshot_checkpoint(model, {
        "seed": int(seed),
        "epochs": cfg.epochs,
        "final_loss": epoch_losses[-1],
        "zero_shot_accuracy": accuracy,
        "dataset": dataset.name,
    })
