"""Tiny contrastive dual encoder: ViT over 16x16 grayscale, char-level text tower.

Both encoders project into a shared embedding space and L2-normalize, so
image/text similarity is a plain dot product of unit vectors. The visual
tower is pre-norm with a learned class token; the text tower mean-pools
characters. Everything is float64 and deterministic given the init seed.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"TINYTTA\x00"
CHECKPOINT_VERSION = 1

VOCABULARY = "abcdefghijklmnopqrstuvwxyz0123456789 {}.,-'"
_CHAR_TO_ID = {c: i for i, c in enumerate(VOCABULARY)}


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    d_model: int = 32
    heads: int = 2
    visual_blocks: int = 2
    mlp_ratio: int = 2
    embed_dim: int = 16
    text_blocks: int = 1
    max_text_len: int = 48
    temperature: float = 0.01

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide d_model {self.d_model}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ParameterSet:
    """Ordered name -> Tensor mapping; the unit that weight averaging works on."""

    def __init__(self, items: Iterable[tuple[str, T.Tensor]] = ()):
        self._names: list[str] = []
        self._tensors: dict[str, T.Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: T.Tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._names.append(name)
        self._tensors[name] = t

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, T.Tensor]]:
        for name in self._names:
            yield name, self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> T.Tensor:
        return self._tensors[name]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def num_scalars(self) -> int:
        return int(np.sum([self._tensors[n].data.size for n in self._names], dtype=np.int64))

    def subset(self, predicate: Callable[[str], bool]) -> "ParameterSet":
        """Same Tensor objects, filtered by name."""
        return ParameterSet((n, self._tensors[n]) for n in self._names if predicate(n))

    def snapshot(self) -> "ParameterSet":
        """Detached deep copy of the buffers."""
        return ParameterSet((n, T.Tensor(self._tensors[n].data.copy())) for n in self._names)

    def load(self, other: "ParameterSet") -> None:
        """Copy values from `other` into these buffers, in place."""
        if other.names != self.names:
            raise ValueError(
                f"parameter sets differ: {self.names[:3]}... vs {other.names[:3]}...")
        for name in self._names:
            src = other[name].data
            dst = self._tensors[name].data
            if src.shape != dst.shape:
                raise ValueError(f"parameter '{name}': shape {src.shape} vs {dst.shape}")
            np.copyto(dst, src)

    def same_bits(self, other: "ParameterSet") -> bool:
        if self.names != other.names:
            return False
        return all(self._tensors[n].data.tobytes() == other[n].data.tobytes()
                   for n in self._names)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self._tensors[n].data.reshape(-1) for n in self._names]) \
            if self._names else np.zeros(0)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out))


def _build_block_params(ps: ParameterSet, rng: np.random.Generator, prefix: str,
                        d_model: int, hidden: int) -> None:
    grad = lambda a: T.Tensor(a, requires_grad=True)
    ps.add(f"{prefix}.attn_norm.gain", grad(np.ones(d_model)))
    ps.add(f"{prefix}.attn_norm.bias", grad(np.zeros(d_model)))
    for proj in ("query", "key", "value", "out"):
        ps.add(f"{prefix}.attn.{proj}.weight", grad(_linear_init(rng, d_model, d_model)))
        ps.add(f"{prefix}.attn.{proj}.bias", grad(np.zeros(d_model)))
    ps.add(f"{prefix}.mlp_norm.gain", grad(np.ones(d_model)))
    ps.add(f"{prefix}.mlp_norm.bias", grad(np.zeros(d_model)))
    ps.add(f"{prefix}.mlp.fc1.weight", grad(_linear_init(rng, d_model, hidden)))
    ps.add(f"{prefix}.mlp.fc1.bias", grad(np.zeros(hidden)))
    ps.add(f"{prefix}.mlp.fc2.weight", grad(_linear_init(rng, hidden, d_model)))
    ps.add(f"{prefix}.mlp.fc2.bias", grad(np.zeros(d_model)))


class ClipModel:
    """Dual encoder with shared embedding space and cosine classification head."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = ParameterSet()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        ps = self.params
        grad = lambda a: T.Tensor(a, requires_grad=True)
        hidden = cfg.d_model * cfg.mlp_ratio

        ps.add("visual.patch_embed.weight", grad(_linear_init(rng, cfg.patch_dim, cfg.d_model)))
        ps.add("visual.patch_embed.bias", grad(np.zeros(cfg.d_model)))
        ps.add("visual.cls_token", grad(rng.normal(0.0, 0.02, size=(1, 1, cfg.d_model))))
        ps.add("visual.pos_embed",
               grad(rng.normal(0.0, 0.02, size=(cfg.patch_tokens + 1, cfg.d_model))))
        for i in range(cfg.visual_blocks):
            _build_block_params(ps, rng, f"visual.block{i}", cfg.d_model, hidden)
        ps.add("visual.out_norm.gain", grad(np.ones(cfg.d_model)))
        ps.add("visual.out_norm.bias", grad(np.zeros(cfg.d_model)))
        ps.add("visual.proj.weight", grad(_linear_init(rng, cfg.d_model, cfg.embed_dim)))

        ps.add("text.token_embed", grad(rng.normal(0.0, 0.02, size=(len(VOCABULARY), cfg.d_model))))
        ps.add("text.pos_embed", grad(rng.normal(0.0, 0.02, size=(cfg.max_text_len, cfg.d_model))))
        for i in range(cfg.text_blocks):
            _build_block_params(ps, rng, f"text.block{i}", cfg.d_model, hidden)
        ps.add("text.proj.weight", grad(_linear_init(rng, cfg.d_model, cfg.embed_dim)))

    # -- parameter bookkeeping --------------------------------------------

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, t in self.params:
            t.requires_grad = bool(predicate(name))

    def train_all(self) -> None:
        self.set_trainable(lambda name: True)

    def freeze_all(self) -> None:
        self.set_trainable(lambda name: False)

    def adaptation_mode(self) -> None:
        """Only the visual-tower normalization scales/shifts get gradients."""
        self.set_trainable(lambda name: name.startswith("visual.") and "_norm." in name)

    def clone(self) -> "ClipModel":
        other = ClipModel(self.config, seed=0)
        other.params.load(self.params)
        return other

    # -- forward passes -----------------------------------------------------

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise T.ShapeError(
                f"encode_image: expected (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(images.shape)}")
        b = images.shape[0]
        g, p = cfg.grid, cfg.patch_size
        x = images.reshape(b, g, p, g, p, cfg.channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(b, cfg.patch_tokens, cfg.patch_dim))

    def _block(self, x: T.Tensor, prefix: str) -> T.Tensor:
        cfg = self.config
        ps = self.params
        hd = cfg.d_model // cfg.heads
        b, t = x.shape[0], x.shape[1]

        h = T.layer_norm(x, ps[f"{prefix}.attn_norm.gain"], ps[f"{prefix}.attn_norm.bias"])

        def heads_of(name: str) -> T.Tensor:
            proj = T.add(T.matmul(h, ps[f"{prefix}.attn.{name}.weight"]),
                         ps[f"{prefix}.attn.{name}.bias"])
            return T.transpose(T.reshape(proj, (b, t, cfg.heads, hd)), (0, 2, 1, 3))

        q, k, v = heads_of("query"), heads_of("key"), heads_of("value")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
        attn = T.softmax(scores, axis=-1)
        mixed = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        mixed = T.add(T.matmul(mixed, ps[f"{prefix}.attn.out.weight"]),
                      ps[f"{prefix}.attn.out.bias"])
        x = T.add(x, mixed)

        h2 = T.layer_norm(x, ps[f"{prefix}.mlp_norm.gain"], ps[f"{prefix}.mlp_norm.bias"])
        h2 = T.gelu(T.add(T.matmul(h2, ps[f"{prefix}.mlp.fc1.weight"]),
                          ps[f"{prefix}.mlp.fc1.bias"]))
        h2 = T.add(T.matmul(h2, ps[f"{prefix}.mlp.fc2.weight"]),
                   ps[f"{prefix}.mlp.fc2.bias"])
        return T.add(x, h2)

    def encode_image(self, images: np.ndarray) -> T.Tensor:
        """Images (B, H, W, C) in [0, 1] -> unit-norm embeddings (B, D)."""
        cfg = self.config
        ps = self.params
        patches = self._patchify(np.asarray(images, dtype=np.float64))
        b = patches.shape[0]

        x = T.add(T.matmul(T.constant(patches), ps["visual.patch_embed.weight"]),
                  ps["visual.patch_embed.bias"])
        cls = T.add(ps["visual.cls_token"], T.constant(np.zeros((b, 1, cfg.d_model))))
        x = T.concat([cls, x], axis=1)
        x = T.add(x, ps["visual.pos_embed"])
        for i in range(cfg.visual_blocks):
            x = self._block(x, f"visual.block{i}")
        x = T.layer_norm(x, ps["visual.out_norm.gain"], ps["visual.out_norm.bias"])
        pooled = T.take(x, 0, axis=1)
        return T.l2_normalize(T.matmul(pooled, ps["visual.proj.weight"]))

    def tokenize(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise ValueError("empty prompt")
        if len(prompt) > self.config.max_text_len:
            raise ValueError(
                f"prompt of {len(prompt)} chars exceeds max_text_len "
                f"{self.config.max_text_len}: '{prompt}'")
        try:
            return np.array([_CHAR_TO_ID[c] for c in prompt], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary "
                             f"(prompt '{prompt}')") from None

    def _encode_one_prompt(self, prompt: str) -> T.Tensor:
        cfg = self.config
        ps = self.params
        ids = self.tokenize(prompt)
        n = len(ids)
        x = T.add(T.embedding(ps["text.token_embed"], ids),
                  T.narrow(ps["text.pos_embed"], 0, 0, n))
        x = T.reshape(x, (1, n, cfg.d_model))
        for i in range(cfg.text_blocks):
            x = self._block(x, f"text.block{i}")
        pooled = T.mean(x, axis=1)
        return T.l2_normalize(T.matmul(pooled, ps["text.proj.weight"]))

    def encode_text(self, prompts: list[str]) -> T.Tensor:
        """Prompt strings -> unit-norm embeddings (len(prompts), D).

        Duplicate prompts are encoded once and their rows replicated through a
        selection matmul, so gradients still flow to every occurrence.
        """
        if not prompts:
            raise ValueError("encode_text: empty prompt list")
        unique: list[str] = []
        index: dict[str, int] = {}
        for p in prompts:
            if p not in index:
                index[p] = len(unique)
                unique.append(p)
        rows = T.concat([self._encode_one_prompt(p) for p in unique], axis=0)
        if len(unique) == len(prompts):
            return rows
        selector = np.zeros((len(prompts), len(unique)))
        for i, p in enumerate(prompts):
            selector[i, index[p]] = 1.0
        return T.matmul(T.constant(selector), rows)


def ln_parameters(model: ClipModel) -> ParameterSet:
    """The visual tower's normalization scales/shifts, in stable name order."""
    return model.params.subset(lambda n: n.startswith("visual.") and "_norm." in n)


# -- checkpoint format --------------------------------------------------------
#
#   magic (8 bytes) | version uint32 LE | header length uint64 LE
#   | JSON header (utf-8) | float64 LE buffers, concatenated in header order
#
# The header lists parameter names and shapes, the model config, and free-form
# provenance. Round-trips are bit-exact.


@dataclass
class Checkpoint:
    model_config: ModelConfig
    parameters: ParameterSet
    provenance: dict = field(default_factory=dict)

    def build_model(self) -> ClipModel:
        model = ClipModel(self.model_config, seed=0)
        model.params.load(self.parameters)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "provenance": ckpt.provenance,
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in ckpt.parameters],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in ckpt.parameters:
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes; not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen

    config = ModelConfig.from_dict(header["model_config"])
    params = ParameterSet()
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated buffer for '{entry['name']}'")
        buf = np.frombuffer(raw[off:off + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        params.add(entry["name"], T.Tensor(buf.copy()))
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after buffers")
    return Checkpoint(model_config=config, parameters=params,
                      provenance=header.get("provenance", {}))


def load_parameters(model: ClipModel, ckpt: Checkpoint) -> None:
    """Install checkpoint weights into `model`; configs must match exactly."""
    if ckpt.model_config != model.config:
        raise CheckpointError(
            f"checkpoint config {ckpt.model_config.to_dict()} does not match "
            f"model config {model.config.to_dict()}")
    model.params.load(ckpt.parameters)


def snapshot_checkpoint(model: ClipModel, provenance: dict | None = None) -> Checkpoint:
    return Checkpoint(model_config=model.config,
                      parameters=model.params.snapshot(),
                      provenance=dict(provenance or {}))
