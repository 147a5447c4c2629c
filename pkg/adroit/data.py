"""
Dataset ingestion, imbalance, pretext transforms and mini-batching
==================================================================

CIFAR-10 binary records (1 label byte + 3072 pixel bytes, channel planes in
row-major order), a class-conditional synthetic generator for desk-scale runs,
the six-way pretext transform set, and seeded batch iteration.
"""

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import torch

from adroit.core import Dataset, DatasetFormatError, InvalidArgumentError, Rng, as_index_array
from adroit.logger import get_logger

logger = get_logger(__name__)

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR10_SIDE = 32
CIFAR10_CHANNELS = 3
CIFAR10_CLASSES = 10


# ========================
# Pretext transforms
# ========================

class PretextTransform(IntEnum):
    """Six self-supervised transforms; the integer code is the rotation-head class"""

    ROT0 = 0
    ROT90 = 1
    ROT180 = 2
    ROT270 = 3
    HFLIP = 4
    VFLIP = 5


NUM_PRETEXT = len(PretextTransform)


def apply_pretext(image: np.ndarray, t: PretextTransform) -> np.ndarray:
    """
    Apply one pretext transform to a (C, H, W) image

    Rotations are counter-clockwise; HFLIP reverses columns, VFLIP reverses rows.
    Channels are untouched.
    """
    t = PretextTransform(t)
    if image.ndim != 3:
        raise InvalidArgumentError(f"expected a (C, H, W) image, got shape {image.shape}")
    if t in (PretextTransform.ROT90, PretextTransform.ROT270) and image.shape[1] != image.shape[2]:
        raise InvalidArgumentError("quarter-turn rotations need a square image")

    if t == PretextTransform.ROT0:
        out = image
    elif t == PretextTransform.ROT90:
        out = np.rot90(image, 1, axes=(1, 2))
    elif t == PretextTransform.ROT180:
        out = np.rot90(image, 2, axes=(1, 2))
    elif t == PretextTransform.ROT270:
        out = np.rot90(image, 3, axes=(1, 2))
    elif t == PretextTransform.HFLIP:
        out = image[:, :, ::-1]
    else:
        out = image[:, ::-1, :]
    return np.ascontiguousarray(out)


# ========================
# Batches
# ========================

@dataclass
class Batch:
    """
    One mini-batch

    ``labels`` is present iff the batch comes from the labeled pool;
    ``pretext_images``/``pretext_labels`` are present iff pretext was applied.
    ``images`` always holds the untransformed view.
    """

    images: torch.Tensor
    indices: np.ndarray
    labels: Optional[torch.Tensor] = None
    pretext_images: Optional[torch.Tensor] = None
    pretext_labels: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def has_pretext(self) -> bool:
        return self.pretext_labels is not None


def make_batch(dataset: Dataset, indices: np.ndarray, with_labels: bool = True,
               pretext_codes: Optional[np.ndarray] = None,
               dtype: torch.dtype = torch.float32) -> Batch:
    """Assemble a batch for explicit indices (and explicit pretext codes)"""
    indices = np.asarray(indices, dtype=np.int64)
    images = dataset.images[indices]
    batch = Batch(
        images=torch.as_tensor(images, dtype=dtype),
        indices=indices,
        labels=torch.as_tensor(dataset.labels[indices], dtype=torch.long) if with_labels else None,
    )
    if pretext_codes is not None:
        codes = np.asarray(pretext_codes, dtype=np.int64)
        transformed = np.stack([apply_pretext(img, code) for img, code in zip(images, codes)])
        batch.pretext_images = torch.as_tensor(transformed, dtype=dtype)
        batch.pretext_labels = torch.as_tensor(codes, dtype=torch.long)
    return batch


def batches(dataset: Dataset, indices: Iterable[int], batch_size: int, with_pretext: bool,
            rng: Rng, with_labels: bool = True, dtype: torch.dtype = torch.float32) -> List[Batch]:
    """
    One epoch of shuffled mini-batches over ``indices``

    A single seeded shuffle; the final short batch is kept. With pretext, each
    image receives its own uniformly drawn transform.
    """
    if batch_size <= 0:
        raise InvalidArgumentError("batch_size must be positive")
    order = np.sort(as_index_array(indices))
    if len(order) == 0:
        return []
    order = rng.numpy.permutation(order)
    codes = rng.numpy.integers(0, NUM_PRETEXT, size=len(order)) if with_pretext else None

    result = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        result.append(make_batch(
            dataset,
            chunk,
            with_labels=with_labels,
            pretext_codes=codes[start:start + batch_size] if codes is not None else None,
            dtype=dtype,
        ))
    return result


# ========================
# Binary records
# ========================

def _read_records(path: Path, side: int, channels: int) -> Tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    record = 1 + channels * side * side
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise DatasetFormatError(f"{path}: {raw.size} bytes is not a whole number of {record}-byte records")
    rows = raw.reshape(-1, record)
    labels = rows[:, 0].astype(np.int64)
    pixels = rows[:, 1:].reshape(-1, channels, side, side)
    return pixels, labels


def read_binary_records(path: Union[str, Path], side: int, num_classes: int,
                        channels: int = CIFAR10_CHANNELS) -> Dataset:
    """Load one file (or every ``*.bin`` file of a directory) of label+pixel records"""
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .bin record files in {path}")
    parts = [_read_records(f, side, channels) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    if labels.max() >= num_classes:
        raise DatasetFormatError(f"{path}: label {labels.max()} outside {num_classes} classes")
    return Dataset(pixels.astype(np.float32) / 255.0, labels, num_classes)


def write_binary_records(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Serialize to the CIFAR record layout (pixels quantized to bytes)"""
    if dataset.num_classes > 256:
        raise InvalidArgumentError("record layout stores labels in one byte")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1
    )
    rows.tofile(path)
    logger.info(f"💾 Wrote {len(dataset)} records to {path}")
    return path


def _load_cifar_files(directory: Path, names: List[str]) -> Dataset:
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    pixels, labels = [], []
    for name in names:
        p, l = _read_records(directory / name, CIFAR10_SIDE, CIFAR10_CHANNELS)
        if len(l) != CIFAR10_RECORDS_PER_FILE:
            raise DatasetFormatError(
                f"{directory / name}: expected {CIFAR10_RECORDS_PER_FILE} records, found {len(l)}"
            )
        pixels.append(p)
        labels.append(l)
    images = np.concatenate(pixels).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels), CIFAR10_CLASSES)


def load_cifar10(path: Union[str, Path]) -> Dataset:
    """The 50000-image CIFAR-10 training set from the five binary batch files"""
    dataset = _load_cifar_files(Path(path), CIFAR10_TRAIN_FILES)
    logger.info(f"📂 Loaded CIFAR-10 training set: {len(dataset)} images from {path}")
    return dataset


def load_cifar10_test(path: Union[str, Path]) -> Dataset:
    """The 10000-image CIFAR-10 test batch"""
    return _load_cifar_files(Path(path), [CIFAR10_TEST_FILE])


# ========================
# Synthetic data
# ========================

def make_synthetic(num_classes: int, per_class: int, side: int, rng: Rng,
                   channels: int = CIFAR10_CHANNELS, amplitude: float = 0.2,
                   noise: float = 0.25) -> Dataset:
    """
    Class-conditional images: class k is a linear intensity gradient oriented at
    angle pi*k/num_classes, plus seeded Gaussian pixel noise, clipped to [0, 1].
    Samples are ordered by class.
    """
    if min(num_classes, per_class, side, channels) <= 0:
        raise InvalidArgumentError("num_classes, per_class, side and channels must be positive")
    axis = np.linspace(-1.0, 1.0, side) if side > 1 else np.zeros(1)
    v, u = np.meshgrid(axis, axis, indexing="ij")

    images = np.empty((num_classes * per_class, channels, side, side), dtype=np.float32)
    for k in range(num_classes):
        angle = np.pi * k / num_classes
        pattern = 0.5 + amplitude * (np.cos(angle) * u + np.sin(angle) * v)
        block = np.broadcast_to(pattern, (per_class, channels, side, side))
        block = block + noise * rng.numpy.standard_normal((per_class, channels, side, side))
        images[k * per_class:(k + 1) * per_class] = np.clip(block, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(images, labels, num_classes)


# ========================
# Dataset reshaping
# ========================

def class_counts(dataset: Dataset) -> np.ndarray:
    return np.bincount(dataset.labels, minlength=dataset.num_classes)


def apply_imbalance(dataset: Dataset, ratio: float, affected_classes: Iterable[int], rng: Rng) -> Dataset:
    """Keep floor(count / ratio) random samples of each affected class; order preserved"""
    if ratio < 1:
        raise InvalidArgumentError(f"imbalance ratio must be >= 1, got {ratio}")
    affected = sorted(set(int(k) for k in affected_classes))
    if any(k < 0 or k >= dataset.num_classes for k in affected):
        raise InvalidArgumentError(f"affected classes must lie in [0, {dataset.num_classes})")

    keep = np.ones(len(dataset), dtype=bool)
    for k in affected:
        members = np.flatnonzero(dataset.labels == k)
        retained = int(np.floor(len(members) / ratio))
        kept = rng.numpy.choice(members, size=retained, replace=False)
        keep[members] = False
        keep[kept] = True
    result = dataset.subset(np.flatnonzero(keep))
    logger.info(f"⚖️ Imbalance ratio {ratio} on classes {affected}: {len(dataset)} → {len(result)} samples")
    return result


def split_holdout(dataset: Dataset, fraction: float, rng: Rng) -> Tuple[Dataset, Dataset]:
    """Seeded (train, holdout) split; the holdout never enters either pool"""
    if not 0 < fraction < 1:
        raise InvalidArgumentError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n_holdout = int(round(len(dataset) * fraction))
    if n_holdout == 0 or n_holdout == len(dataset):
        raise InvalidArgumentError("holdout split leaves one side empty")
    order = rng.numpy.permutation(len(dataset))
    holdout = np.sort(order[:n_holdout])
    train = np.sort(order[n_holdout:])
    return dataset.subset(train), dataset.subset(holdout)
