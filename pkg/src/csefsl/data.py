"""Datasets, client partitioning and seeded mini-batch iteration."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DataError, FormatError, PlanError

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) < 1:
            raise DataError("dataset must contain at least one sample")
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


# --- loaders -----------------------------------------------------------------

def _read_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for an IDX header", offset=len(raw))
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic != expected_magic:
        raise FormatError(f"bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} header truncated", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise FormatError(f"{what} payload truncated: need {n} bytes, have {len(raw) - header}",
                          offset=len(raw))
    if len(raw) - header > n:
        raise FormatError(f"{what} payload has {len(raw) - header - n} trailing bytes", offset=header + n)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] in (N, 1, H, W) layout."""
    images = _read_idx(Path(images_path).read_bytes(), IDX_IMAGE_MAGIC, "image")
    labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABEL_MAGIC, "label")
    if len(labels) != len(images):
        raise FormatError(f"label count {len(labels)} does not match image count {len(images)}")
    features = images.astype(np.float64)[:, None, :, :] / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(features, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, sample_shape: Sequence[int], num_classes: int | None = None, scale: float = 255.0) -> Dataset:
    """Rows of ``label,pixel,...``; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows)
    want = int(np.prod(sample_shape))
    if arr.shape[1] - 1 != want:
        raise DataError(f"{path}: rows have {arr.shape[1] - 1} values, expected {want}")
    labels = arr[:, 0].astype(np.int64)
    features = arr[:, 1:].reshape(len(arr), *sample_shape) / scale
    return Dataset(features, labels, num_classes or int(labels.max()) + 1)


def synth_dataset(seed: int, n: int, dim_or_shape: Union[int, Sequence[int]], classes: int,
                  separation: float, sigma: float = 1.0, sample_seed: int | None = None) -> Dataset:
    """Gaussian blobs, one per class, balanced labels.

    Class means are mutually ``separation`` apart (orthonormal directions when
    the feature dimension allows). Means depend only on ``seed``; samples on
    ``sample_seed`` (defaults to ``seed``), so train/test sets can share blobs.
    """
    if classes < 2:
        raise DataError("synthetic datasets need at least two classes")
    shape = (dim_or_shape,) if isinstance(dim_or_shape, (int, np.integer)) else tuple(dim_or_shape)
    dim = int(np.prod(shape))
    mean_rng = np.random.default_rng([seed, 0])
    if dim >= classes:
        q, _ = np.linalg.qr(mean_rng.normal(size=(dim, classes)))
        dirs = q.T
    else:
        dirs = mean_rng.normal(size=(classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (separation / np.sqrt(2.0))
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + sigma * rng.normal(size=(n, dim))
    return Dataset(features.reshape(n, *shape), labels, classes)


def train_test_split(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng([seed, 2]).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-channel (axis 1) standardization using training statistics."""
    axes = (0,) + tuple(range(2, train.features.ndim))
    mu = train.features.mean(axis=axes, keepdims=True)
    sd = train.features.std(axis=axes, keepdims=True)
    sd[sd == 0] = 1.0
    return [Dataset((d.features - mu) / sd, d.labels, d.num_classes) for d in (train, *others)]


def center_crop(dataset: Dataset, size: int) -> Dataset:
    h, w = dataset.features.shape[2], dataset.features.shape[3]
    top, left = (h - size) // 2, (w - size) // 2
    return Dataset(dataset.features[:, :, top:top + size, left:left + size], dataset.labels, dataset.num_classes)


# --- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class IID:
    pass


@dataclass(frozen=True)
class LabelShards:
    shards_per_client: int

    def __post_init__(self):
        if self.shards_per_client < 1:
            raise PlanError("shards_per_client must be >= 1")


@dataclass(frozen=True)
class Dirichlet:
    concentration: float

    def __post_init__(self):
        if self.concentration <= 0:
            raise PlanError("Dirichlet concentration must be positive")


PartitionPlan = Union[IID, LabelShards, Dirichlet]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def partition(dataset: Dataset, plan: PartitionPlan, n: int, seed: int) -> list[ClientShard]:
    """Split sample indices into ``n`` disjoint client shards."""
    total = len(dataset)
    if n < 1 or n > total:
        raise PlanError(f"cannot split {total} samples across {n} clients")
    rng = np.random.default_rng([seed, 3])
    if isinstance(plan, IID):
        parts = np.array_split(rng.permutation(total), n)
    elif isinstance(plan, LabelShards):
        n_shards = n * plan.shards_per_client
        if n_shards > total:
            raise PlanError(f"{n_shards} shards requested but only {total} samples")
        order = np.argsort(dataset.labels, kind="stable")
        shards = np.array_split(order, n_shards)
        assignment = rng.permutation(n_shards).reshape(n, plan.shards_per_client)
        parts = [np.concatenate([shards[s] for s in row]) for row in assignment]
    elif isinstance(plan, Dirichlet):
        parts = [[] for _ in range(n)]
        for k in range(dataset.num_classes):
            idx = rng.permutation(np.flatnonzero(dataset.labels == k))
            if not len(idx):
                continue
            props = rng.dirichlet(np.full(n, plan.concentration))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        parts = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
    else:
        raise PlanError(f"unknown partition plan {plan!r}")
    return [ClientShard(i, np.sort(np.asarray(p, dtype=np.int64))) for i, p in enumerate(parts)]


def sample_participants(n: int, k: int, round_index: int, seed: int) -> list[int]:
    """K distinct client ids for one round (all clients when K == n)."""
    if not 1 <= k <= n:
        raise PlanError(f"participation K={k} must lie in [1, {n}]")
    if k == n:
        return list(range(n))
    rng = np.random.default_rng([seed, 4, round_index])
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


# --- batching ----------------------------------------------------------------

@dataclass
class MiniBatch:
    features: np.ndarray
    labels: np.ndarray
    batch_index: int
    indices: np.ndarray


def batches(shard: ClientShard, dataset: Dataset, batch_size: int, epoch_seed, drop_last: bool = True) -> list[MiniBatch]:
    """Seeded permutation of the shard chunked into mini-batches (remainder dropped by default)."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    if batch_size > len(shard):
        raise DataError(f"batch size {batch_size} exceeds shard size {len(shard)}")
    seed = epoch_seed if isinstance(epoch_seed, (list, tuple)) else [epoch_seed]
    order = shard.indices[np.random.default_rng([*seed, 5]).permutation(len(shard))]
    count = len(order) // batch_size if drop_last else -(-len(order) // batch_size)
    out = []
    for m in range(count):
        idx = order[m * batch_size:(m + 1) * batch_size]
        out.append(MiniBatch(dataset.features[idx], dataset.labels[idx], m, idx))
    return out


def label_histogram(dataset: Dataset, shard: ClientShard) -> np.ndarray:
    return np.bincount(dataset.labels[shard.indices], minlength=dataset.num_classes)
