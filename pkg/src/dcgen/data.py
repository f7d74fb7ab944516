"""Labeled toy datasets: procedural shape renders or base-model samples.

Every image is a pure function of (seed, index), so iteration order never
changes content, resume never skews batches, and two datasets with the same
spec produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, StateError
from .rng import Rng

# Well-separated fill colors in [-1, 1]; index = class % len.
_PALETTE = np.array([
    [0.9, -0.7, -0.7],   # red
    [-0.7, 0.9, -0.7],   # green
    [-0.6, -0.6, 0.95],  # blue
    [0.9, 0.9, -0.8],    # yellow
    [0.9, -0.6, 0.9],    # magenta
    [-0.7, 0.9, 0.9],    # cyan
    [0.95, 0.4, -0.6],   # orange
    [0.9, 0.9, 0.9],     # white
    [0.2, 0.6, -0.2],    # olive
    [-0.2, 0.2, 0.6],    # steel
    [0.6, -0.2, 0.2],    # brick
    [-0.5, 0.5, 0.0],    # teal-ish
], dtype=np.float32)

_BACKGROUND = -0.85
_SHAPES = ("square", "circle", "cross", "diamond")


@dataclass(frozen=True)
class DatasetSpec:
    classes: int
    per_class: int
    image_size: int
    seed: int
    kind: str = "shapes"

    def __post_init__(self):
        if self.kind not in ("shapes", "model"):
            raise ConfigError(f"unknown dataset kind '{self.kind}' (expected shapes|model)")
        if self.classes < 1 or self.per_class < 1 or self.image_size < 8:
            raise ConfigError("dataset spec needs classes >= 1, per_class >= 1, image_size >= 8")
        if self.classes > len(_PALETTE) * len(_SHAPES):
            raise ConfigError(f"at most {len(_PALETTE) * len(_SHAPES)} distinguishable classes")


def _render_shape(size: int, cls: int, rng: Rng) -> np.ndarray:
    color = _PALETTE[cls % len(_PALETTE)].copy()
    kind = _SHAPES[(cls // len(_PALETTE)) % len(_SHAPES)] if cls >= len(_PALETTE) else _SHAPES[cls % len(_SHAPES)]
    jit = rng.child("jitter")
    cx = size / 2 + float(jit.uniform([1], -size / 8, size / 8)[0])
    cy = size / 2 + float(jit.uniform([1], -size / 8, size / 8)[0])
    half = float(jit.uniform([1], size * 0.2, size * 0.33)[0])
    brightness = float(jit.uniform([1], 0.85, 1.0)[0])

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    if kind == "square":
        mask = np.maximum(dx, dy) <= half
    elif kind == "circle":
        mask = dx * dx + dy * dy <= half * half
    elif kind == "cross":
        mask = ((dx <= half / 2.6) | (dy <= half / 2.6)) & (np.maximum(dx, dy) <= half)
    else:  # diamond
        mask = dx + dy <= half * 1.2
    img = np.full((3, size, size), _BACKGROUND, dtype=np.float32)
    img += rng.child("noise").uniform([3, size, size], -0.04, 0.04)
    img[:, mask] = (color * brightness)[:, None]
    return np.clip(img, -1.0, 1.0)


class Dataset:
    """Index-addressable labeled images; class of index i is i % classes."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec

    def __len__(self) -> int:
        return self.spec.classes * self.spec.per_class

    def class_of(self, index: int) -> int:
        return int(index) % self.spec.classes

    def sample(self, index: int):
        raise NotImplementedError

    def batch(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        images = np.stack([self.sample(int(i))[0] for i in indices])
        labels = np.array([self.class_of(int(i)) for i in indices], dtype=np.int64)
        return images, labels


class ShapesDataset(Dataset):
    def sample(self, index: int):
        if not 0 <= index < len(self):
            raise ContractViolation(f"index {index} out of range for dataset of {len(self)}")
        cls = self.class_of(index)
        rng = Rng(self.spec.seed).child("sample", index)
        return _render_shape(self.spec.image_size, cls, rng), cls


class ModelSyntheticDataset(Dataset):
    """Labels are free: images are sampled from a trained model per index."""

    def __init__(self, spec: DatasetSpec, model=None, autoencoder=None,
                 guidance: float = 2.0, steps: int = 20):
        super().__init__(spec)
        if model is None or autoencoder is None:
            raise StateError("model-synthetic data needs a trained model and autoencoder checkpoint")
        if model.num_classes < spec.classes:
            raise ContractViolation(
                f"model has {model.num_classes} classes, dataset wants {spec.classes}"
            )
        self.model = model
        self.autoencoder = autoencoder
        self.guidance = guidance
        self.steps = steps

    def sample(self, index: int):
        from .pipeline import sample_euler  # local import to avoid a cycle

        if not 0 <= index < len(self):
            raise ContractViolation(f"index {index} out of range for dataset of {len(self)}")
        cls = self.class_of(index)
        rng = Rng(self.spec.seed).child("synthetic", index)
        img = sample_euler(self.model, self.autoencoder, [cls], rng,
                           guidance=self.guidance, steps=self.steps)
        return img[0], cls


def make_dataset(spec: DatasetSpec, model=None, autoencoder=None, **kw) -> Dataset:
    if spec.kind == "shapes":
        return ShapesDataset(spec)
    return ModelSyntheticDataset(spec, model=model, autoencoder=autoencoder, **kw)


def class_centroids(data: Dataset, per_class: int = 32) -> np.ndarray:
    """Mean image per class over the first `per_class` instances; [K, 3, s, s]."""
    k = data.spec.classes
    sums = np.zeros((k, 3, data.spec.image_size, data.spec.image_size), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for cls in range(k):
        for j in range(min(per_class, data.spec.per_class)):
            img, _ = data.sample(j * k + cls)
            sums[cls] += img
            counts[cls] += 1
    return (sums / counts[:, None, None, None]).astype(np.float32)


def nearest_centroid(images: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Classify each image by L2 distance to the class centroids."""
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    cents = centroids.reshape(centroids.shape[0], -1).astype(np.float64)
    d2 = ((flat[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)
