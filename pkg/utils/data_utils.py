import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("moons", "blobs")


class IdxParseError(ValueError):
    """Raised when an IDX file does not follow the published layout."""

    def __init__(self, message, offset, expected=None, found=None):
        super().__init__(f"{message} (byte offset {offset}, expected {expected}, found {found})")
        self.offset = offset
        self.expected = expected
        self.found = found


@dataclass
class LabeledDataset:
    """Features in [0, 1]^d with integer class labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices, name: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.x[indices], self.y[indices], self.num_classes, name or self.name)

    def head(self, count: int) -> "LabeledDataset":
        return self.subset(np.arange(min(count, len(self))))


def validate_dataset(dataset):
    """
    Check that a dataset can be fed to the trainers.

    Args:
        dataset (LabeledDataset): Candidate dataset

    Returns:
        tuple: (is_valid, message)
    """
    if dataset.x.ndim != 2:
        return False, f"Features must be an N x d matrix, got shape {dataset.x.shape}"

    if dataset.y.shape != (dataset.x.shape[0],):
        return False, f"Expected {dataset.x.shape[0]} labels, got shape {dataset.y.shape}"

    if len(dataset) == 0:
        return False, "The dataset contains no samples."

    if not np.all(np.isfinite(dataset.x)):
        bad = int((~np.isfinite(dataset.x)).sum())
        return False, f"Features contain {bad} non-finite values."

    if dataset.x.min() < 0.0 or dataset.x.max() > 1.0:
        return False, f"Features must lie in [0, 1], found range [{dataset.x.min():.4g}, {dataset.x.max():.4g}]"

    if dataset.y.min() < 0 or dataset.y.max() >= dataset.num_classes:
        return False, f"Labels must lie in [0, {dataset.num_classes}), found [{dataset.y.min()}, {dataset.y.max()}]"

    return True, "Dataset validation successful."


def scale_unit_box(features):
    """Min-max scale each column into [0, 1]; constant columns become 0."""
    features = np.asarray(features, dtype=np.float64)
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    scaled = np.zeros_like(features)
    live = span > 0
    scaled[:, live] = (features[:, live] - lo[live]) / span[live]
    return scaled


def _two_moons(n, noise, rng):
    n_outer = n // 2
    n_inner = n - n_outer
    outer = np.linspace(0.0, np.pi, n_outer)
    inner = np.linspace(0.0, np.pi, n_inner)
    points = np.vstack([
        np.column_stack([np.cos(outer), np.sin(outer)]),
        np.column_stack([1.0 - np.cos(inner), 1.0 - np.sin(inner) - 0.5]),
    ])
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    if noise > 0:
        points = points + rng.normal(scale=noise, size=points.shape)
    return points, labels


def _blobs(n, d, classes, noise, rng):
    centers = rng.uniform(-10.0, 10.0, size=(classes, d))
    labels = np.arange(n) % classes
    points = centers[labels] + rng.normal(scale=noise, size=(n, d)) if noise > 0 else centers[labels].copy()
    return points, labels.astype(np.int64)


def make_synthetic_dataset(kind, n, d, noise=0.1, seed=0, classes=2):
    """
    Generate a seeded desk-scale classification set inside [0, 1]^d.

    Moons are drawn in 2-D and zero-padded to ``d`` columns before scaling;
    blobs place ``classes`` Gaussian clusters in d dimensions.

    Args:
        kind (str): 'moons' or 'blobs'
        n (int): Number of samples
        d (int): Feature dimension
        noise (float): Gaussian noise (moons) or cluster std (blobs)
        seed (int): Generator seed
        classes (int): Number of blobs; moons always have 2

    Returns:
        LabeledDataset: Shuffled samples
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic dataset {kind!r}; expected one of {', '.join(SYNTHETIC_KINDS)}")
    if n < 2 or d < 2:
        raise ValueError(f"synthetic datasets need n >= 2 and d >= 2, got n={n}, d={d}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)

    if kind == "moons":
        points, labels = _two_moons(n, noise, rng)
        points = np.hstack([points, np.zeros((n, d - 2))])
        num_classes = 2
    else:
        if classes < 2:
            raise ValueError(f"blobs need at least 2 classes, got {classes}")
        points, labels = _blobs(n, d, classes, noise, rng)
        num_classes = classes

    order = rng.permutation(n)
    dataset = LabeledDataset(scale_unit_box(points[order]), labels[order], num_classes, kind)
    logger.debug("Generated %s: n=%d d=%d noise=%g seed=%d", kind, n, d, noise, seed)
    return dataset


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxParseError(f"{path}: header truncated", offset=len(raw), expected=8, found=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxParseError(f"{path}: magic number mismatch", offset=0,
                            expected=hex(expected_magic), found=hex(magic))
    ndims = magic & 0xFF
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxParseError(f"{path}: dimension sizes truncated", offset=len(raw), expected=header, found=len(raw))
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    body = int(np.prod(dims))
    if len(raw) - header < body:
        raise IdxParseError(f"{path}: payload truncated", offset=len(raw),
                            expected=header + body, found=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=body, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path, limit=None, num_classes=10):
    """
    Load an IDX image/label pair (MNIST layout) as a flat dataset.

    Args:
        images_path (str): u8 image tensor file, magic 0x00000803
        labels_path (str): u8 label vector file, magic 0x00000801
        limit (int, optional): Keep only the first ``limit`` samples
        num_classes (int): Label range

    Returns:
        LabeledDataset: Pixels scaled to [0, 1]
    """
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(f"{images_path}: image and label counts differ", offset=4,
                            expected=labels.shape[0], found=images.shape[0])
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    dataset = LabeledDataset(x, labels.astype(np.int64), num_classes, Path(images_path).stem)
    logger.info("Loaded %d IDX samples of dimension %d from %s", len(dataset), dataset.dim, images_path)
    return dataset


def write_idx(path, array, magic):
    """Write a u8 array in IDX layout; used to build fixtures and subsets."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())
    return Path(path)


def train_test_split(dataset, test_fraction=0.2, seed=0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded shuffle split; the test part is never empty when test_fraction > 0."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    if test_fraction > 0:
        n_test = min(max(n_test, 1), len(dataset) - 1)
    test_part = dataset.subset(order[:n_test], f"{dataset.name}-test")
    train_part = dataset.subset(order[n_test:], f"{dataset.name}-train")
    return train_part, test_part


def summarize_dataset(dataset):
    """
    Per-class counts and feature ranges for the run manifest.

    Args:
        dataset (LabeledDataset): Dataset to describe

    Returns:
        dict: JSON-ready summary
    """
    counts = pd.Series(dataset.y).value_counts().sort_index()
    features = pd.DataFrame(dataset.x)
    return {
        "name": dataset.name,
        "samples": int(len(dataset)),
        "dim": int(dataset.dim),
        "num_classes": int(dataset.num_classes),
        "class_counts": {str(label): int(count) for label, count in counts.items()},
        "feature_min": float(features.min().min()),
        "feature_max": float(features.max().max()),
        "feature_mean": round(float(features.values.mean()), 6),
    }
