"""Synthetic shape/texture dataset, corruption bank, and batch iteration.

Eight parametric grayscale classes on a 16x16 grid, each with per-sample
jitter in position, frequency, phase, and contrast. Splits are balanced and
deterministic given the seed; train and test are drawn from independent
substreams and tagged so downstream code can refuse to train on test data.

Corruptions mirror the usual low-resolution benchmark recipe: each kind has a
five-entry severity table over a kind-specific distortion parameter, listed
in SEVERITY_TABLES below. Severity parameters are non-decreasing in severity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import uniform_filter

IMAGE_SIZE = 16

CLASS_NAMES = ("stripes", "pillars", "disk", "ring",
               "checkers", "gradient", "diagonal", "dots")

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise",
                    "box_blur", "contrast", "brightness", "pixelate")

# severity 1..5 parameter tables; index with [severity - 1]
SEVERITY_TABLES = {
    "gaussian_noise": {"sigma": (0.04, 0.08, 0.12, 0.18, 0.26)},
    "shot_noise": {"photons": (60.0, 25.0, 12.0, 5.0, 3.0)},
    "impulse_noise": {"fraction": (0.03, 0.06, 0.09, 0.17, 0.27)},
    "box_blur": {"passes": (1, 2, 3, 4, 5)},          # repeated 3x3 mean filter
    "contrast": {"factor": (0.75, 0.60, 0.45, 0.30, 0.20)},
    "brightness": {"delta": (0.10, 0.16, 0.22, 0.28, 0.34)},
    "pixelate": {"block": (2, 2, 2, 4, 4)},           # block edge in pixels
}


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind '{self.kind}'; "
                             f"choose from {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


@dataclass
class Split:
    images: np.ndarray           # (N, 16, 16, 1) float64 in [0, 1]
    labels: np.ndarray           # (N,) int64
    role: str                    # "train" or "test"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    name: str
    class_names: tuple[str, ...]
    train: Split
    test: Split
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


# -- synthetic generators ------------------------------------------------------

_COORDS = np.arange(IMAGE_SIZE, dtype=np.float64)
_XX, _YY = np.meshgrid(_COORDS, _COORDS, indexing="xy")  # _XX columns, _YY rows


def _wave(rng: np.random.Generator, axis_vals: np.ndarray) -> np.ndarray:
    period = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0.0, 1.0)
    amp = rng.uniform(0.17, 0.36)
    return 0.5 + amp * np.sin(2.0 * np.pi * (axis_vals / period + phase))

def _gen_stripes(rng):
    return _wave(rng, _YY)

def _gen_pillars(rng):
    return _wave(rng, _XX)

def _gen_disk(rng):
    cx = 7.5 + rng.uniform(-2.0, 2.0)
    cy = 7.5 + rng.uniform(-2.0, 2.0)
    radius = rng.uniform(3.5, 5.5)
    r = np.sqrt((_XX - cx) ** 2 + (_YY - cy) ** 2)
    hi = rng.uniform(0.62, 0.8)
    lo = rng.uniform(0.18, 0.3)
    return lo + (hi - lo) / (1.0 + np.exp((r - radius) / 0.7))

def _gen_ring(rng):
    cx = 7.5 + rng.uniform(-1.5, 1.5)
    cy = 7.5 + rng.uniform(-1.5, 1.5)
    r0 = rng.uniform(4.0, 5.5)
    width = rng.uniform(1.2, 2.0)
    r = np.sqrt((_XX - cx) ** 2 + (_YY - cy) ** 2)
    lo = rng.uniform(0.15, 0.25)
    amp = rng.uniform(0.42, 0.6)
    return lo + amp * np.exp(-((r - r0) / width) ** 2)

def _gen_checkers(rng):
    cell = rng.integers(2, 5)
    ox = rng.integers(0, cell)
    oy = rng.integers(0, cell)
    parity = ((_XX + ox) // cell + (_YY + oy) // cell) % 2
    lo = rng.uniform(0.18, 0.3)
    hi = rng.uniform(0.6, 0.78)
    return lo + (hi - lo) * parity

def _gen_gradient(rng):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    proj = np.cos(theta) * (_XX - 7.5) + np.sin(theta) * (_YY - 7.5)
    amp = rng.uniform(0.24, 0.4)
    return 0.5 + amp * proj / np.abs(proj).max()

def _gen_diagonal(rng):
    tilt = rng.uniform(-0.25, 0.25)
    direction = 1.0 if rng.uniform() < 0.5 else -1.0
    axis_vals = (_XX + direction * (1.0 + tilt) * _YY) / np.sqrt(2.0)
    return _wave(rng, axis_vals)

def _gen_dots(rng):
    period = rng.integers(4, 6)
    ox = rng.uniform(0.0, period)
    oy = rng.uniform(0.0, period)
    dx = np.abs(((_XX - ox + period / 2.0) % period) - period / 2.0)
    dy = np.abs(((_YY - oy + period / 2.0) % period) - period / 2.0)
    lo = rng.uniform(0.15, 0.25)
    amp = rng.uniform(0.42, 0.6)
    return lo + amp * np.exp(-(dx ** 2 + dy ** 2) / (2.0 * 1.3 ** 2))


_GENERATORS = (_gen_stripes, _gen_pillars, _gen_disk, _gen_ring,
               _gen_checkers, _gen_gradient, _gen_diagonal, _gen_dots)

_JITTER_NOISE = 0.02  # clean per-pixel jitter, part of the class definition


def _generate_split(rng: np.random.Generator, per_class: int, role: str) -> Split:
    n = per_class * len(CLASS_NAMES)
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 1))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for label, gen in enumerate(_GENERATORS):
        for _ in range(per_class):
            img = gen(rng) + rng.normal(0.0, _JITTER_NOISE, size=(IMAGE_SIZE, IMAGE_SIZE))
            images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = label
            i += 1
    order = rng.permutation(n)
    return Split(images=images[order], labels=labels[order], role=role)


def generate_dataset(seed: int = 0, train_per_class: int = 512,
                     test_per_class: int = 128) -> Dataset:
    """Balanced synthetic dataset; train/test come from independent substreams."""
    root = np.random.SeedSequence([int(seed), 0x5DA7A])
    train_seq, test_seq = root.spawn(2)
    train = _generate_split(np.random.default_rng(train_seq), train_per_class, "train")
    test = _generate_split(np.random.default_rng(test_seq), test_per_class, "test")
    return Dataset(
        name="synthetic",
        class_names=CLASS_NAMES,
        train=train,
        test=test,
        provenance={"seed": int(seed), "train_per_class": train_per_class,
                    "test_per_class": test_per_class},
    )


# -- corruption bank -----------------------------------------------------------

def _gaussian_noise(images, sigma, rng):
    return np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0)

def _shot_noise(images, photons, rng):
    return np.clip(rng.poisson(images * photons) / photons, 0.0, 1.0)

def _impulse_noise(images, fraction, rng):
    u = rng.uniform(size=images.shape)
    out = images.copy()
    out[u < fraction / 2.0] = 1.0
    out[u > 1.0 - fraction / 2.0] = 0.0
    return out

def _box_blur(images, passes, rng=None):
    out = images
    for _ in range(int(passes)):
        out = uniform_filter(out, size=(1, 3, 3, 1), mode="reflect")
    return np.clip(out, 0.0, 1.0)

def _contrast(images, factor, rng=None):
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip(mean + (images - mean) * factor, 0.0, 1.0)

def _brightness(images, delta, rng=None):
    return np.clip(images + delta, 0.0, 1.0)

def _pixelate(images, block, rng=None):
    block = int(block)
    if block <= 1:
        return images.copy()
    b, h, w, c = images.shape
    if h % block or w % block:
        raise ValueError(f"pixelate: block {block} does not divide image size {h}x{w}")
    coarse = images.reshape(b, h // block, block, w // block, block, c).mean(axis=(2, 4))
    return np.repeat(np.repeat(coarse, block, axis=1), block, axis=2)


_CORRUPTION_FUNCS = {
    "gaussian_noise": (_gaussian_noise, "sigma", True),
    "shot_noise": (_shot_noise, "photons", True),
    "impulse_noise": (_impulse_noise, "fraction", True),
    "box_blur": (_box_blur, "passes", False),
    "contrast": (_contrast, "factor", False),
    "brightness": (_brightness, "delta", False),
    "pixelate": (_pixelate, "block", False),
}


def apply_corruption(images: np.ndarray, corruption: Corruption, seed: int = 0) -> np.ndarray:
    """Corrupted copy of `images`; deterministic given (corruption, seed)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"apply_corruption: expected (B, H, W, C), got {images.shape}")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("apply_corruption: pixel values must lie in [0, 1]")
    func, param_name, stochastic = _CORRUPTION_FUNCS[corruption.kind]
    param = SEVERITY_TABLES[corruption.kind][param_name][corruption.severity - 1]
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(seed), CORRUPTION_KINDS.index(corruption.kind), corruption.severity]))
    out = func(images, param, rng) if stochastic else func(images, param)
    return np.clip(out, 0.0, 1.0)


# -- batching ------------------------------------------------------------------

def batch_iter(images: np.ndarray, labels: np.ndarray | None, batch_size: int,
               seed: int = 0, drop_last: bool = False) -> Iterator[Batch]:
    """Deterministic shuffled minibatches; short final batch kept by default."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = images.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield Batch(images=images[idx],
                    labels=None if labels is None else labels[idx])


# -- CIFAR-10 binary loader (optional path) ------------------------------------

CIFAR10_CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer",
                       "dog", "frog", "horse", "ship", "truck")

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
_CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR_TEST_FILE = "test_batch.bin"


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of "
                         f"{_CIFAR_RECORD}-byte records")
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte out of range 0..9")
    rgb = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    gray = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
    # 32 -> 16 by 2x2 mean pooling
    small = gray.reshape(-1, 16, 2, 16, 2).mean(axis=(2, 4))
    return small[..., None], labels


def load_cifar10(directory) -> Dataset:
    """Load CIFAR-10 binary batches, downsampled to 16x16 grayscale in [0, 1]."""
    directory = Path(directory)
    train_parts = []
    for fname in _CIFAR_TRAIN_FILES:
        path = directory / fname
        if not path.exists():
            raise FileNotFoundError(f"CIFAR-10 batch missing: {path}")
        train_parts.append(_parse_cifar_file(path))
    test_path = directory / _CIFAR_TEST_FILE
    if not test_path.exists():
        raise FileNotFoundError(f"CIFAR-10 batch missing: {test_path}")
    test_images, test_labels = _parse_cifar_file(test_path)
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    return Dataset(
        name="cifar10",
        class_names=CIFAR10_CLASS_NAMES,
        train=Split(train_images, train_labels, "train"),
        test=Split(test_images, test_labels, "test"),
        provenance={"directory": str(directory)},
    )
