"""Training datasets and random patch sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data.shapes import gen_sample
from .perturb import perturb_mask

MIN_FG_FRACTION = 0.01
MAX_CROP_TRIES = 50
TAU_RANGE = (0.8, 1.0)


class InMemoryDataset:
    """A list of (image 3 x H x W, gt 1 x H x W) pairs held in memory."""

    def __init__(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]]):
        self.pairs = [(np.asarray(i, dtype=np.float32), (np.asarray(g) >= 0.5).astype(np.uint8)) for i, g in pairs]
        if not self.pairs:
            raise ValueError("empty dataset")
        # structuring scale of every full mask, reused when perturbing crops
        self.scales = [math.sqrt(max(1, int(g.sum()))) for _, g in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.pairs[k]


def synthetic_dataset(n: int, res: int, seed: int = 0) -> InMemoryDataset:
    """Samples with seeds ``seed .. seed + n - 1`` from the shape generator."""
    return InMemoryDataset([gen_sample(seed + k, res) for k in range(n)])


def corpus_dataset(items) -> InMemoryDataset:
    """Image/gt pairs from corpus items (coarse masks, if any, are ignored)."""
    pairs = []
    for it in items:
        img, gt, _ = it.load()
        pairs.append((img, gt))
    return InMemoryDataset(pairs)


@dataclass(frozen=True)
class TrainingExample:
    image: np.ndarray   # 3 x p x p
    gt: np.ndarray      # 1 x p x p, uint8
    coarse: np.ndarray  # 1 x p x p, uint8
    index: int
    offset: tuple[int, int]
    tau: float


def sample_training_example(dataset, patch: int, seed, tau_range=TAU_RANGE) -> TrainingExample:
    """Random crop of a random dataset item plus a perturbed coarse mask.

    Crops with under 1% foreground are redrawn, up to 50 times; after that
    the last crop is used as is.
    """
    rng = np.random.default_rng(seed)
    for _ in range(MAX_CROP_TRIES):
        k = int(rng.integers(len(dataset)))
        img, gt = dataset[k]
        h, w = gt.shape[-2:]
        if h < patch or w < patch:
            raise ValueError(f"item {k} is {h}x{w}, smaller than the patch {patch}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        g = gt[:, y : y + patch, x : x + patch]
        if g.mean() >= MIN_FG_FRACTION:
            break
    tau = float(rng.uniform(*tau_range))
    scale = dataset.scales[k] if hasattr(dataset, "scales") else None
    if g.any():
        coarse = perturb_mask(g, tau, int(rng.integers(2**31)), scale=scale)
    else:
        coarse = g.copy()
    return TrainingExample(img[:, y : y + patch, x : x + patch], g, coarse, k, (y, x), tau)


def sample_batch(dataset, patch: int, batch_size: int, rng: np.random.Generator, tau_range=TAU_RANGE):
    """Stacked (images N x 3 x p x p, gts N x 1 x p x p, coarse N x 1 x p x p)."""
    ex = [sample_training_example(dataset, patch, int(rng.integers(2**63)), tau_range) for _ in range(batch_size)]
    imgs = np.stack([e.image for e in ex]).astype(np.float32)
    gts = np.stack([e.gt for e in ex]).astype(np.float32)
    coarse = np.stack([e.coarse for e in ex]).astype(np.float32)
    return imgs, gts, coarse
