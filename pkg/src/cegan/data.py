"""Synthetic imbalanced multi-attribute images, splitting and subsets.

Images live in [0, 1] for the classifier. GAN training rescales them to
[-1, 1] (see :func:`to_gan_range`) to match the generator's tanh output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileformat
from .tensor import derive_rng, make_rng

DEFAULT_ATTRIBUTES = ("five_oclock_shadow", "arched_eyebrows", "attractive",
                      "bags_under_eyes", "bald")
DEFAULT_RATES = (0.11, 0.27, 0.51, 0.20, 0.02)

BACKGROUND = 0.3
MOTIF_AMPLITUDE = 0.35
MAX_LABEL_RETRIES = 100


@dataclass
class LabeledImageSet:
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    labels: np.ndarray  # N x K uint8 in {0, 1}
    attribute_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 2:
            raise ValueError("images must be N x C x H x W and labels N x K")
        if len(self.images) != len(self.labels) or len(self.images) < 1:
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} label rows")
        if len(self.attribute_names) != self.labels.shape[1]:
            raise ValueError("one attribute name per label column required")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def positive_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0).astype(np.int64)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.attribute_names))


@dataclass
class SynthConfig:
    image_h: int = 28
    image_w: int = 24
    channels: int = 3
    positive_rates: tuple[float, ...] = DEFAULT_RATES
    attribute_names: tuple[str, ...] = DEFAULT_ATTRIBUTES
    n_examples: int = 5000
    noise_level: float = 0.25
    seed: int = 0

    def validate(self):
        k = len(self.positive_rates)
        if k < 1 or len(self.attribute_names) != k:
            raise ValueError("positive_rates and attribute_names must have equal, non-zero length")
        for r in self.positive_rates:
            if not 0 < r < 1:
                raise ValueError(f"positive_rates entries must lie in (0, 1), got {r}")
        if self.n_examples < k:
            raise ValueError(f"n_examples must be >= number of attributes ({k})")
        if self.image_h < 8 or self.image_w < 8:
            raise ValueError("images must be at least 8 x 8")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


class GenerationError(RuntimeError):
    pass


def motifs(k: int, channels: int, h: int, w: int) -> np.ndarray:
    """One K x C x H x W additive pattern per attribute.

    Attribute ``a`` gets an oriented grating of its own spatial frequency,
    windowed by a Gaussian blob at its own location, on channel ``a % C``.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((k, channels, h, w))
    for a in range(k):
        # blob centres spread around an ellipse so the windows barely overlap
        ang = 2 * np.pi * a / k
        cy = h / 2 + 0.3 * h * np.sin(ang)
        cx = w / 2 + 0.3 * w * np.cos(ang)
        sigma = 0.12 * min(h, w)
        window = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        freq = 0.5 + 0.35 * a
        theta = np.pi * a / k
        grating = 0.5 + 0.5 * np.cos(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        out[a, a % channels] = MOTIF_AMPLITUDE * window * grating
    return out


def _draw_labels(config: SynthConfig) -> np.ndarray:
    rng = make_rng(config.seed)
    rates = np.asarray(config.positive_rates)
    labels = (rng.random((config.n_examples, len(rates))) < rates).astype(np.uint8)
    for a in range(len(rates)):
        retry = 0
        while labels[:, a].sum() == 0:
            retry += 1
            if retry > MAX_LABEL_RETRIES:
                raise GenerationError(
                    f"attribute {config.attribute_names[a]!r} has no positives after "
                    f"{MAX_LABEL_RETRIES} redraws")
            col_rng = derive_rng(config.seed, 1, a, retry)
            labels[:, a] = col_rng.random(config.n_examples) < rates[a]
    return labels


def synth_generate(config: SynthConfig) -> LabeledImageSet:
    config.validate()
    labels = _draw_labels(config)
    k = labels.shape[1]
    pat = motifs(k, config.channels, config.image_h, config.image_w).reshape(k, -1)
    images = BACKGROUND + labels.astype(np.float64) @ pat
    if config.noise_level > 0:
        noise_rng = derive_rng(config.seed, 2)
        images = images + noise_rng.normal(0.0, config.noise_level, images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    images = images.reshape(-1, config.channels, config.image_h, config.image_w)
    return LabeledImageSet(images, labels, list(config.attribute_names))


def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    val = int(np.floor(n * ratios[1] + 0.5))
    test = int(np.floor(n * ratios[2] + 0.5))
    return n - val - test, val, test


def split_indices(n: int, seed: int, ratios=(0.6, 0.2, 0.2)) -> tuple[np.ndarray, ...]:
    if n < 5:
        raise ValueError(f"need at least 5 examples to split, got {n}")
    if abs(sum(ratios) - 1) > 1e-9 or min(ratios) <= 0:
        raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")
    perm = make_rng(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n, ratios)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(dataset: LabeledImageSet, seed: int, ratios=(0.6, 0.2, 0.2)):
    """Seeded shuffle, then contiguous train/val/test blocks; train takes the remainder."""
    return tuple(dataset.take(idx) for idx in split_indices(len(dataset), seed, ratios))


def single_class_subset(dataset: LabeledImageSet, class_index: int) -> LabeledImageSet:
    k = dataset.labels.shape[1]
    if not 0 <= class_index < k:
        raise IndexError(f"class_index {class_index} out of range for {k} attributes")
    idx = np.flatnonzero(dataset.labels[:, class_index] == 1)
    if idx.size == 0:
        raise ValueError(f"attribute {dataset.attribute_names[class_index]!r} has no positive examples")
    return dataset.take(idx)


def to_gan_range(images: np.ndarray) -> np.ndarray:
    return images * 2.0 - 1.0


def from_gan_range(images: np.ndarray) -> np.ndarray:
    return np.clip((images + 1.0) * 0.5, 0.0, 1.0)


def save_dataset(dataset: LabeledImageSet, path: str | Path):
    fileformat.write_dataset_file(path, dataset.images, dataset.labels, dataset.attribute_names)


def load_dataset(path: str | Path) -> LabeledImageSet:
    images, labels, names = fileformat.read_dataset_file(path)
    if len(images) == 0:
        raise fileformat.FormatError(f"{path}: dataset is empty")
    return LabeledImageSet(images, labels, names)
