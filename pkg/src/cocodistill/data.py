"""Synthetic two-class "cancerous region" segmentation data.

Every sample is a pure function of its seed. Splits draw from disjoint seed
ranges, so train/val/test never overlap.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import DimensionError

SPLITS = {"train": 0, "val": 1, "test": 2}
NUM_CLASSES = 2

# base RGB per class; close enough that single pixels are ambiguous under the noise
_BASE = np.array([[0.78, 0.58, 0.74], [0.62, 0.44, 0.70]])


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (3, h, w) in [0, 1]
    mask: np.ndarray  # (h, w) int64 in {0, 1}
    seed: int
    flips: tuple = field(default=(False, False))


def _rng(*keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def generate_sample(seed, size=64, stride=4):
    if size < 8 or size % stride:
        raise DimensionError(f"sample size {size} must be >= 8 and divisible by the total stride {stride}")
    rng = _rng(seed, size)
    yy, xx = np.mgrid[0:size, 0:size] / size

    field_ = np.zeros((size, size))
    for _ in range(rng.integers(1, 5)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sy, sx = rng.uniform(0.07, 0.2, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        field_ += rng.uniform(0.6, 1.0) * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    # irregular borders
    field_ += 0.25 * gaussian_filter(rng.normal(size=(size, size)), size / 16) * (size / 16)
    frac = rng.uniform(0.1, 0.45)
    mask = (field_ > np.quantile(field_, 1.0 - frac)).astype(np.int64)

    soft = gaussian_filter(mask.astype(float), 1.0)
    base = _BASE[0][:, None, None] * (1 - soft) + _BASE[1][:, None, None] * soft
    # shared texture: dark nuclei scattered over both classes
    nuclei = np.zeros((size, size))
    count = rng.poisson(size * size / 40)
    nuclei[rng.integers(0, size, count), rng.integers(0, size, count)] = 1.0
    nuclei = np.clip(gaussian_filter(nuclei, 0.8) * 4.0, 0, 1)
    tint = np.array([0.35, 0.25, 0.1])[:, None, None]
    smooth = gaussian_filter(rng.normal(size=(3, size, size)), (0, 2.0, 2.0)) * 0.25
    grain = rng.normal(size=(3, size, size)) * 0.08
    shade = 1.0 + 0.15 * ((xx - 0.5) * rng.normal() + (yy - 0.5) * rng.normal())
    image = (base - tint * nuclei + smooth + grain) * shade
    return SegSample(np.clip(image, 0.0, 1.0), mask, int(seed))


def augment_flip(sample, seed):
    """Flip horizontally and vertically, each with probability 0.5."""
    h_flip, v_flip = (bool(b) for b in _rng(seed).random(2) < 0.5)
    return apply_flips(sample, h_flip, v_flip)


def apply_flips(sample, h_flip, v_flip):
    image, mask = sample.image, sample.mask
    if h_flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if v_flip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    flips = (sample.flips[0] ^ h_flip, sample.flips[1] ^ v_flip)
    return SegSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.seed, flips)


def split_seed(data_seed, split, index):
    """Seeds of different splits live in disjoint ranges by construction."""
    return int(data_seed) * 10_000_000 + SPLITS[split] * 1_000_000 + int(index)


@lru_cache(maxsize=8)
def load_split(data_seed, split, count, size=64):
    return tuple(generate_sample(split_seed(data_seed, split, i), size) for i in range(count))


@dataclass
class Batch:
    images: np.ndarray  # (b, 3, h, w)
    masks: np.ndarray  # (b, h, w)
    keys: list  # (sample index, h_flip, v_flip) per row


def batch_iter(samples, batch_size, epoch_seed=None, augment=False):
    """Yield batches; shuffled and flip-augmented when ``epoch_seed`` is given."""
    order = np.arange(len(samples))
    if epoch_seed is not None:
        order = _rng(epoch_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        rows = []
        for idx in order[start : start + batch_size]:
            s = samples[idx]
            if augment:
                s = augment_flip(s, int(_rng(epoch_seed, idx).integers(2**31)))
            rows.append((int(idx), s))
        yield Batch(
            np.stack([s.image for _, s in rows]),
            np.stack([s.mask for _, s in rows]),
            [(i, s.flips[0], s.flips[1]) for i, s in rows],
        )


def write_pnm(path, array):
    """Binary PGM for (h, w) or PPM for (3, h, w) arrays scaled to [0, 255]."""
    a = np.asarray(array)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        magic = b"P6"
    else:
        magic = b"P5"
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.clip(np.rint(a), 0, 255).astype(np.uint8).tobytes())


def export_dataset(out_dir, data_seed, sizes, size=64):
    for split, count in sizes.items():
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        lines = []
        for i, s in enumerate(load_split(data_seed, split, count, size)):
            write_pnm(os.path.join(d, f"{i:04d}_image.ppm"), s.image * 255.0)
            write_pnm(os.path.join(d, f"{i:04d}_mask.pgm"), s.mask * 255)
            lines.append(f"{i:04d} {s.seed}")
        with open(os.path.join(d, "index.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
