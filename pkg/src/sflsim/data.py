"""Datasets: synthetic Gaussian blob images, IDX file IO, sharding, flips.

Images are float32 arrays shaped (N, C, H, W) with values in [0, 1]. A
Dataset carries disjoint index splits: ``pretrain`` (central warm-up),
``train`` (federated rounds), ``test`` (evaluation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SPLIT_FRACTIONS = {"pretrain": 0.25, "train": 0.50, "test": 0.25}


class DataError(ValueError):
    """Malformed dataset file or invalid sharding request."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    splits: dict

    def subset(self, split):
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]


def make_splits(n, seed):
    """Disjoint pretrain/train/test index arrays covering range(n)."""
    order = np.random.default_rng(seed).permutation(n)
    n_pre = int(round(n * SPLIT_FRACTIONS["pretrain"]))
    n_train = int(round(n * SPLIT_FRACTIONS["train"]))
    return {
        "pretrain": np.sort(order[:n_pre]),
        "train": np.sort(order[n_pre : n_pre + n_train]),
        "test": np.sort(order[n_pre + n_train :]),
    }


def generate_blobs(classes, per_class, image_shape=(1, 16, 16), noise_sigma=0.1, seed=0):
    """Class-template images plus Gaussian pixel noise, clipped to [0, 1].

    Each class gets a fixed random template; samples are template + sigma *
    noise. Low sigma makes classes template-separable, which the training
    acceptance runs rely on.
    """
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes,) + tuple(image_shape))
    images = np.empty((classes * per_class,) + tuple(image_shape), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        noise = rng.normal(0.0, noise_sigma, size=(per_class,) + tuple(image_shape))
        block = np.clip(templates[c][None] + noise, 0.0, 1.0)
        images[c * per_class : (c + 1) * per_class] = block.astype(np.float32)
        labels[c * per_class : (c + 1) * per_class] = c
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    return Dataset(images=images, labels=labels, splits=make_splits(len(labels), seed))


def _read_exact(raw, offset, n, path):
    if offset + n > len(raw):
        raise DataError(f"{path}: truncated payload (need {offset + n} bytes, have {len(raw)})")
    return raw[offset : offset + n], offset + n


def load_idx(image_path, label_path):
    """Load an IDX ubyte image/label file pair into a Dataset.

    Big-endian headers: images magic 0x00000803 then count/rows/cols, labels
    magic 0x00000801 then count. Pixels are scaled to [0, 1] float32 and a
    channel axis is added. All indices land in the train split; callers that
    want pretrain/test portions reassign via make_splits.
    """
    raw = open(image_path, "rb").read()
    header, off = _read_exact(raw, 0, 16, image_path)
    magic, count, rows, cols = struct.unpack(">IIII", header)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{image_path}: bad image magic 0x{magic:08x}, want 0x{IDX_IMAGE_MAGIC:08x}")
    payload, off = _read_exact(raw, off, count * rows * cols, image_path)
    if off != len(raw):
        raise DataError(f"{image_path}: trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    images = (pixels.astype(np.float32) / 255.0)[:, None, :, :]

    raw = open(label_path, "rb").read()
    header, off = _read_exact(raw, 0, 8, label_path)
    magic, label_count = struct.unpack(">II", header)
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"{label_path}: bad label magic 0x{magic:08x}, want 0x{IDX_LABEL_MAGIC:08x}")
    payload, off = _read_exact(raw, off, label_count, label_path)
    if off != len(raw):
        raise DataError(f"{label_path}: trailing bytes after payload")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise DataError(f"image/label count mismatch: {count} images, {label_count} labels")
    splits = {
        "pretrain": np.zeros(0, dtype=np.int64),
        "train": np.arange(count),
        "test": np.zeros(0, dtype=np.int64),
    }
    return Dataset(images=images, labels=labels, splits=splits)


def write_idx(image_path, label_path, images, labels):
    """Write single-channel [0, 1] float images + integer labels as IDX ubyte files."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise DataError(f"write_idx needs (n, 1, h, w) images, got {images.shape}")
    if len(labels) != len(images):
        raise DataError("image/label count mismatch")
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("labels must fit in a ubyte")
    n, _, rows, cols = images.shape
    pixels = np.clip(np.round(images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


def shard_uniform(indices, k, seed):
    """Split an index array into k disjoint near-equal shards, seeded shuffle."""
    indices = np.asarray(indices)
    if k < 1 or k > len(indices):
        raise DataError(f"cannot cut {len(indices)} samples into {k} shards")
    order = np.random.default_rng(seed).permutation(indices)
    return [np.sort(part) for part in np.array_split(order, k)]


def augment_hflip(images, rng, p=0.5):
    """Horizontally flip each image independently with probability p."""
    flip = rng.random(len(images)) < p
    out = images.copy()
    out[flip] = out[flip][:, :, :, ::-1]
    return out
