"""Image dataset loading (CIFAR-10 binary, MNIST IDX) and seeded splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidArgumentError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck")


@dataclass
class LabeledImageSet:
    """Images ``(n, c, h, w)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidArgumentError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidArgumentError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError("label outside [0, num_classes)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InvalidArgumentError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class SplitPlan:
    train: int
    test: int
    seed: int = 0

    def __post_init__(self):
        if self.train < 0 or self.test < 0:
            raise InvalidArgumentError("split counts must be nonnegative")


def _read_cifar_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return pixels, labels


def load_cifar10(path, split="test"):
    """Load CIFAR-10 binary batches.

    ``path`` is either a single batch file or the ``cifar-10-batches-bin``
    directory, in which case ``split`` selects ``test_batch.bin`` or the five
    ``data_batch_*.bin`` files.
    """
    path = Path(path)
    if path.is_dir():
        if split == "test":
            files = [path / "test_batch.bin"]
        elif split == "train":
            files = [path / f"data_batch_{i}.bin" for i in range(1, 6)]
        else:
            raise InvalidArgumentError(f"unknown CIFAR-10 split {split!r}")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return LabeledImageSet(pixels.astype(np.float32) / 255, labels, 10)


def load_mnist_idx(images_path, labels_path):
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != 2051:
        raise FormatError(f"{images_path}: not an IDX image file (magic 2051)")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != 2049:
        raise FormatError(f"{labels_path}: not an IDX label file (magic 2049)")
    n, rows, cols = struct.unpack(">III", img[4:16])
    (n_labels,) = struct.unpack(">I", lab[4:8])
    if n != n_labels:
        raise FormatError(f"image count {n} differs from label count {n_labels}")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + n:
        raise FormatError("IDX payload length does not match its header")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if n and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} > 9")
    return LabeledImageSet(pixels.astype(np.float32) / 255, labels, 10)


def split_indices(n, plan):
    """Seeded shuffle of ``range(n)``; the first ``plan.train`` indices form
    the training part and the next ``plan.test`` the test part."""
    if plan.train + plan.test > n:
        raise InvalidArgumentError(f"split of {plan.train}+{plan.test} exceeds the {n} available examples")
    order = np.random.default_rng(plan.seed).permutation(n)
    return order[:plan.train], order[plan.train:plan.train + plan.test]


def split(data, plan):
    train_idx, test_idx = split_indices(len(data), plan)
    return data.subset(train_idx), data.subset(test_idx)


def save_image_set(data, path):
    """Write a set to the package's ``.npz`` layout (lossless float32)."""
    with open(path, "wb") as f:
        np.savez(f, images=data.images, labels=data.labels, num_classes=np.int64(data.num_classes))


def load_image_set(path):
    with np.load(path) as z:
        return LabeledImageSet(z["images"], z["labels"], int(z["num_classes"]))
