"""Datasets: the in-memory container, IDX-format ingestion, synthetic
generators sized for desk-scale experiments, and label-corruption tooling
for the dataset-debugging protocol.

Instances are float64 arrays shaped (N, F) for flat data or (N, C, H, W)
for images; labels are int64 class indices.  Every generator is a pure
function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

__all__ = [
    "Dataset",
    "IdxPayload",
    "corrupt_labels",
    "gen_synthetic",
    "load_idx_dataset",
    "parse_idx",
    "split_dataset",
    "subset",
]

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803

SYNTHETIC_KINDS = ("blobs", "moons", "bars8x8")

AUGMENTATIONS = ("none", "mixing")


@dataclass
class Dataset:
    """Instances plus labels, with consistent shapes enforced on build."""

    instances: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    augmentation: str = "none"

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.ndim not in (2, 4):
            raise ShapeError("Dataset: instances must be (N, F) or (N, C, H, W)")
        if self.labels.ndim != 1:
            raise ShapeError("Dataset: labels must be one class index per instance")
        if self.instances.shape[0] != self.labels.shape[0]:
            raise ShapeError("Dataset: instance/label counts differ")
        if self.instances.shape[0] < 1:
            raise ParameterError("Dataset: need at least one instance")
        if np.any(self.labels < 0):
            raise ParameterError("Dataset: labels must be nonnegative")
        if self.augmentation not in AUGMENTATIONS:
            raise ParameterError(
                f"Dataset: augmentation must be one of {AUGMENTATIONS}")

    @property
    def n(self) -> int:
        return int(self.instances.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def subset(ds: Dataset, indices, name: str | None = None) -> Dataset:
    """New dataset over the given rows (copies, original untouched)."""
    idx = np.asarray(indices)
    return Dataset(
        instances=ds.instances[idx].copy(),
        labels=ds.labels[idx].copy(),
        name=ds.name if name is None else name,
        augmentation=ds.augmentation,
    )


def split_dataset(ds: Dataset, n_first: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then split into the first n_first rows and the rest."""
    if not 1 <= n_first < ds.n:
        raise ParameterError("split_dataset: n_first must leave both parts nonempty")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return (subset(ds, perm[:n_first], name=f"{ds.name}/a"),
            subset(ds, perm[n_first:], name=f"{ds.name}/b"))


# ----------------------------------------------------------------- IDX files


class IdxPayload(NamedTuple):
    """One parsed IDX file: kind is 'images' or 'labels'."""

    kind: str
    array: np.ndarray


def parse_idx(path) -> IdxPayload:
    """Parse one IDX file (big-endian magic, dim sizes, unsigned bytes).

    Images come back float64 in [0, 1] shaped (N, 1, H, W); labels int64
    (N,).  Malformed files raise FormatError naming the byte offset.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise FormatError(
            f"{path}: truncated magic at byte offset 0 "
            f"(need 4 bytes, file has {len(data)})")
    magic = int.from_bytes(data[0:4], "big")
    if magic == IDX_MAGIC_LABELS:
        kind, ndim = "labels", 1
    elif magic == IDX_MAGIC_IMAGES:
        kind, ndim = "images", 3
    else:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0 "
            f"(expected 0x{IDX_MAGIC_LABELS:08x} or 0x{IDX_MAGIC_IMAGES:08x})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(
            f"{path}: truncated dimension table at byte offset {len(data)} "
            f"(header needs {header} bytes)")
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big")
            for i in range(ndim)]
    expected = header + int(math.prod(dims))
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte offset "
            f"{min(len(data), expected)}: expected {expected} bytes total "
            f"for dims {tuple(dims)}, file has {len(data)}")
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if kind == "labels":
        return IdxPayload(kind, payload.astype(np.int64))
    n, h, w = dims
    images = payload.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return IdxPayload(kind, images)


def load_idx_dataset(images_path, labels_path, name: str = "idx") -> Dataset:
    """Combine an IDX image file and an IDX label file into one Dataset."""
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.kind != "images":
        raise FormatError(f"{images_path}: expected an image file, "
                          f"found {images.kind}")
    if labels.kind != "labels":
        raise FormatError(f"{labels_path}: expected a label file, "
                          f"found {labels.kind}")
    if images.array.shape[0] != labels.array.shape[0]:
        raise FormatError(
            f"{images_path} has {images.array.shape[0]} instances but "
            f"{labels_path} has {labels.array.shape[0]} labels")
    return Dataset(instances=images.array, labels=labels.array, name=name)


# ------------------------------------------------------------ synthetic data


def gen_synthetic(kind: str, n: int, seed: int, separation: float = 6.0) -> Dataset:
    """Deterministic two-class toy datasets.

    blobs — 2-D Gaussian clusters (unit variance) centered ±separation/2 on
    the x-axis; moons — two interleaved noisy arcs; bars8x8 — 8×8 images
    holding exactly one bar, horizontal (two rows thick) for class 0 or
    vertical (one column) for class 1, so geometry and total intensity both
    separate the classes.
    """
    if n < 2:
        raise ParameterError("gen_synthetic: need n >= 2")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        labels = rng.integers(0, 2, size=n)
        centers = np.array([[-separation / 2.0, 0.0], [separation / 2.0, 0.0]])
        inst = centers[labels] + rng.normal(size=(n, 2))
        return Dataset(instances=inst, labels=labels, name=f"blobs-{seed}")
    if kind == "moons":
        labels = rng.integers(0, 2, size=n)
        t = rng.uniform(0.0, np.pi, size=n)
        x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
        y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
        inst = np.stack([x, y], axis=1) + 0.1 * rng.normal(size=(n, 2))
        return Dataset(instances=inst, labels=labels, name=f"moons-{seed}")
    if kind == "bars8x8":
        labels = rng.integers(0, 2, size=n)
        inst = np.zeros((n, 1, 8, 8))
        for i in range(n):
            value = rng.uniform(0.75, 1.0)
            if labels[i] == 0:
                r = int(rng.integers(0, 7))
                inst[i, 0, r:r + 2, :] = value
            else:
                c = int(rng.integers(0, 8))
                inst[i, 0, :, c] = value
        return Dataset(instances=inst, labels=labels, name=f"bars8x8-{seed}")
    raise ParameterError(
        f"gen_synthetic: unknown kind {kind!r}; choose from {SYNTHETIC_KINDS}")


def corrupt_labels(ds: Dataset, frac: float, seed: int) -> tuple[Dataset, np.ndarray]:
    """Flip a random fraction of labels to a different class.

    Returns (corrupted dataset, boolean mask of which instances were hit).
    The original dataset is untouched.
    """
    if not 0.0 <= frac <= 1.0:
        raise ParameterError("corrupt_labels: frac must lie in [0, 1]")
    n_classes = ds.n_classes
    if n_classes < 2:
        raise ParameterError("corrupt_labels: need at least two classes")
    rng = np.random.default_rng(seed)
    k = int(round(frac * ds.n))
    hit = rng.choice(ds.n, size=k, replace=False)
    mask = np.zeros(ds.n, dtype=bool)
    mask[hit] = True
    labels = ds.labels.copy()
    # shift by a nonzero amount mod L: always lands on a different class
    shift = 1 + rng.integers(0, n_classes - 1, size=k)
    labels[hit] = (labels[hit] + shift) % n_classes
    out = replace(ds, instances=ds.instances.copy(), labels=labels,
                  name=f"{ds.name}/corrupted")
    return out, mask
