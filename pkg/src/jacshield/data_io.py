"""Datasets: MNIST IDX files, CIFAR-10 binary batches and synthetic Gaussians.

All inputs are doubles in [0, 1]; pixel bytes are divided by 255 with no
centering.  IDX files may be gzip-compressed.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
CIFAR_RECORD = 3073
CIFAR_RECORDS = 10000
DATA_DIR_ENV = "JACSHIELD_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if len(x) != len(y):
            raise ValueError(f"{len(x)} inputs but {len(y)} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.y)

    def take(self, idx, split=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.name,
                       self.split if split is None else split, self.num_classes)


BUNDLED_DIR = os.path.join(os.path.dirname(__file__), "data")


def data_dir(default=BUNDLED_DIR):
    """Dataset root: ``$JACSHIELD_DATA_DIR`` if set, else the bundled data."""
    return os.environ.get(DATA_DIR_ENV) or default


def _read(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw, path, magic, rank):
    if len(raw) < 4 + 4 * rank:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic {found} at offset 0, expected {magic}")
    return struct.unpack_from(f">{rank}I", raw, 4)


def load_idx(images_path, labels_path, name="mnist", split=""):
    """Big-endian IDX image and label files; images become (N, rows, cols, 1)."""
    img = _read(images_path)
    lab = _read(labels_path)
    n, rows, cols = _idx_header(img, images_path, IMAGE_MAGIC, 3)
    (n_lab,) = _idx_header(lab, labels_path, LABEL_MAGIC, 1)
    need = 16 + n * rows * cols
    if len(img) != need:
        raise DataFormatError(f"{images_path}: expected {need} bytes, found {len(img)}")
    if len(lab) != 8 + n_lab:
        raise DataFormatError(f"{labels_path}: expected {8 + n_lab} bytes, found {len(lab)}")
    if n != n_lab:
        raise DataFormatError(f"{n} images but {n_lab} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8)
    return Dataset(pixels / 255.0, labels.astype(np.int64), name, split)


def load_cifar10(batch_path, split=""):
    """One CIFAR-10 binary batch: 10000 records of label byte + 3072 planar pixels."""
    raw = _read(batch_path)
    need = CIFAR_RECORDS * CIFAR_RECORD
    if len(raw) != need:
        raise DataFormatError(f"{batch_path}: expected {need} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_RECORDS, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{batch_path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(images / 255.0, labels, "cifar10", split)


def synth_gaussians(k, d, n_per_class, spread=0.1, seed=0):
    """``k`` isotropic Gaussian blobs around seeded points of radius 2, mapped into [0, 1].

    The affine map ``(v + 3) / 6`` is fixed (not data-dependent) so points
    within three units of the origin keep their geometry; the rest are clipped.
    """
    if k < 2 or d < 2:
        raise ValueError("need k >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, d))
    centers *= 2.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(k), n_per_class)
    v = centers[y] + spread * rng.normal(size=(len(y), d))
    x = np.clip((v + 3.0) / 6.0, 0.0, 1.0)
    return Dataset(x, y, f"gauss{k}x{d}", "", k)


def subsample_indices(labels, n, seed=0):
    """Seeded class-stratified index draw (largest-remainder allocation)."""
    labels = np.asarray(labels)
    total = len(labels)
    if n > total:
        raise ValueError(f"cannot draw {n} samples from {total}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n / total
    alloc = np.floor(quota).astype(np.int64)
    order = np.lexsort((classes, -(quota - alloc)))
    alloc[order[:n - alloc.sum()]] += 1
    picks = [rng.permutation(np.flatnonzero(labels == c))[:a] for c, a in zip(classes, alloc)]
    idx = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    return rng.permutation(idx)


def subsample(dataset, n, seed=0, split=None):
    """Seeded class-stratified subset of size ``n``."""
    return dataset.take(subsample_indices(dataset.y, n, seed), split)


def train_test_split(dataset, n_train, n_test, seed=0):
    """Disjoint stratified train and test subsets."""
    pool = subsample_indices(dataset.y, n_train + n_test, seed)
    test_pos = subsample_indices(dataset.y[pool], n_test, seed + 1)
    rest = np.setdiff1d(np.arange(len(pool)), test_pos)
    return dataset.take(pool[rest], "train"), dataset.take(pool[test_pos], "test")


def mnist_subset(root=None):
    """The 5000-digit MNIST subset (500 per class) under ``root``.

    Defaults to ``<data_dir()>/mnist5k``; a copy ships with the package.
    """
    root = root or os.path.join(data_dir(), "mnist5k")
    return load_idx(os.path.join(root, "images-idx3-ubyte.gz"),
                    os.path.join(root, "labels-idx1-ubyte.gz"), "mnist5k")
