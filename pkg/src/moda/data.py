"""Datasets: synthetic Gaussian blobs, IDX image files, replacement splits.

Everything here is deterministic given (paths, seed); random draws come
from counter-based streams so two processes with the same seed build
byte-identical datasets.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file violates the big-endian header/payload contract."""


@dataclass(frozen=True)
class Normalization:
    """Affine pixel/feature transform already applied: value = (raw - mean) / scale."""
    mean: float = 0.0
    scale: float = 1.0


@dataclass
class Dataset:
    inputs: np.ndarray            # [N, features] or [N, C, H, W], float64, finite
    labels: np.ndarray            # [N] int64, < class_count
    class_count: int
    name: str = ""
    normalization: Normalization | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, mask: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[mask], self.labels[mask], self.class_count,
                       name if name is not None else self.name, self.normalization)


def _blob_centers(classes: int, dim: int) -> np.ndarray:
    """Deterministic class centers on a radius-4 circle in the first two dims."""
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = 4.0 * np.cos(angles)
    centers[:, 1] = 4.0 * np.sin(angles)
    return centers


def make_blobs(classes: int, per_class: int, dim: int = 2, spread: float = 0.8,
               seed: int = 0) -> tuple[Dataset, Dataset]:
    """Gaussian clusters split 80/20 (stratified) into (train, test)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 2:
        raise ValueError("need at least 2 samples per class")
    if dim < 2:
        raise ValueError("blob dimension must be >= 2")
    centers = _blob_centers(classes, dim)
    gen = streams.generator(seed, streams.STREAM_BLOBS)

    train_x, train_y, test_x, test_y = [], [], [], []
    n_train = int(0.8 * per_class)
    for c in range(classes):
        pts = centers[c] + spread * gen.standard_normal((per_class, dim))
        train_x.append(pts[:n_train])
        test_x.append(pts[n_train:])
        train_y.append(np.full(n_train, c))
        test_y.append(np.full(per_class - n_train, c))

    name = f"blobs-c{classes}-n{per_class}-d{dim}-s{spread:g}-seed{seed}"
    train = Dataset(np.concatenate(train_x), np.concatenate(train_y), classes,
                    name=name + "-train")
    test = Dataset(np.concatenate(test_x), np.concatenate(test_y), classes,
                   name=name + "-test")
    return train, test


def _read_be_u32(fh, path, what) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def read_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files into a [N,1,H,W] dataset.

    Pixels are scaled to [0, 1]; the applied normalization is recorded on
    the dataset.
    """
    with open(images_path, "rb") as fh:
        magic = _read_be_u32(fh, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        n = _read_be_u32(fh, images_path, "count")
        h = _read_be_u32(fh, images_path, "rows")
        w = _read_be_u32(fh, images_path, "cols")
        payload = fh.read()
        if len(payload) < n * h * w:
            raise IdxFormatError(
                f"{images_path}: truncated payload, expected {n * h * w} bytes, got {len(payload)}")
        if len(payload) > n * h * w:
            raise IdxFormatError(
                f"{images_path}: {len(payload) - n * h * w} trailing bytes after payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)

    with open(labels_path, "rb") as fh:
        magic = _read_be_u32(fh, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        n_labels = _read_be_u32(fh, labels_path, "count")
        payload = fh.read()
        if len(payload) < n_labels:
            raise IdxFormatError(
                f"{labels_path}: truncated payload, expected {n_labels} bytes, got {len(payload)}")
        if len(payload) > n_labels:
            raise IdxFormatError(
                f"{labels_path}: {len(payload) - n_labels} trailing bytes after payload")
        labels = np.frombuffer(payload, dtype=np.uint8)

    if n != n_labels:
        raise IdxFormatError(
            f"image file has {n} items but label file has {n_labels}")
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels.astype(np.int64), int(labels.max()) + 1,
                   name=str(images_path),
                   normalization=Normalization(mean=0.0, scale=255.0))


@dataclass(frozen=True)
class SplitPlan:
    """How to carve one dataset into a strong and a weak training world.

    The shared target class appears in both; its training samples are
    partitioned between the two sides by ``shared_fraction``. Labels are
    re-indexed by position in the respective class tuple.
    """
    strong_classes: tuple[int, ...]
    weak_classes: tuple[int, ...]
    target: int
    shared_fraction: float = 0.5
    overfit_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strong_classes", tuple(int(c) for c in self.strong_classes))
        object.__setattr__(self, "weak_classes", tuple(int(c) for c in self.weak_classes))
        if self.target not in self.strong_classes or self.target not in self.weak_classes:
            raise ValueError("target class must belong to both class sets")
        if len(set(self.strong_classes)) != len(self.strong_classes):
            raise ValueError("duplicate class in strong set")
        if len(set(self.weak_classes)) != len(self.weak_classes):
            raise ValueError("duplicate class in weak set")
        if not 0.0 < self.shared_fraction < 1.0:
            raise ValueError("shared_fraction must be in (0, 1)")
        if not 0.0 < self.overfit_fraction <= 1.0:
            raise ValueError("overfit_fraction must be in (0, 1]")


@dataclass
class ReplacementSplit:
    strong_train: Dataset
    strong_test: Dataset
    weak_train: Dataset
    weak_test: Dataset
    weak_overfit_train: Dataset


def _relabel(ds: Dataset, classes: tuple[int, ...], keep: np.ndarray,
             name: str) -> Dataset:
    mapping = {c: i for i, c in enumerate(classes)}
    labels = np.array([mapping[int(l)] for l in ds.labels[keep]], dtype=np.int64)
    return Dataset(ds.inputs[keep], labels, len(classes), name=name,
                   normalization=ds.normalization)


def split_for_replacement(train: Dataset, test: Dataset,
                          plan: SplitPlan) -> ReplacementSplit:
    """Build the strong/weak training sets plus the weak overfit variant.

    Target-class training samples are partitioned between the strong and
    weak sides; all other classes contribute all their samples to their
    side. Test sets are restricted and re-indexed but never subsampled.
    """
    all_classes = set(plan.strong_classes) | set(plan.weak_classes)
    for c in all_classes:
        if (train.labels == c).sum() == 0:
            raise ValueError(f"class {c} has no training samples")

    target_idx = np.flatnonzero(train.labels == plan.target)
    perm = streams.generator(plan.seed, streams.STREAM_SPLIT).permutation(target_idx.size)
    n_strong = int(plan.shared_fraction * target_idx.size)
    target_strong = target_idx[perm[:n_strong]]
    target_weak = target_idx[perm[n_strong:]]

    strong_keep = np.zeros(len(train), dtype=bool)
    for c in plan.strong_classes:
        if c != plan.target:
            strong_keep |= train.labels == c
    strong_keep[target_strong] = True

    weak_keep = np.zeros(len(train), dtype=bool)
    for c in plan.weak_classes:
        if c != plan.target:
            weak_keep |= train.labels == c
    weak_keep[target_weak] = True

    strong_train = _relabel(train, plan.strong_classes, strong_keep, "strong-train")
    weak_train = _relabel(train, plan.weak_classes, weak_keep, "weak-train")

    strong_test = _relabel(test, plan.strong_classes,
                           np.isin(test.labels, plan.strong_classes), "strong-test")
    weak_test = _relabel(test, plan.weak_classes,
                         np.isin(test.labels, plan.weak_classes), "weak-test")

    # stratified subsample of the weak training set
    gen = streams.generator(plan.seed, streams.STREAM_OVERFIT)
    keep_idx = []
    for c in range(len(plan.weak_classes)):
        cls_idx = np.flatnonzero(weak_train.labels == c)
        n_keep = max(1, int(plan.overfit_fraction * cls_idx.size))
        if cls_idx.size == 0:
            raise ValueError(f"weak class bucket {plan.weak_classes[c]} is empty")
        sel = gen.permutation(cls_idx.size)[:n_keep]
        keep_idx.append(cls_idx[sel])
    keep_idx = np.sort(np.concatenate(keep_idx))
    overfit = Dataset(weak_train.inputs[keep_idx], weak_train.labels[keep_idx],
                      weak_train.class_count, name="weak-overfit-train",
                      normalization=weak_train.normalization)

    return ReplacementSplit(strong_train=strong_train, strong_test=strong_test,
                            weak_train=weak_train, weak_test=weak_test,
                            weak_overfit_train=overfit)
