"""Dataset loading and client partition plans.

Covers the MNIST IDX on-disk format (big-endian headers, magic 0x00000803
for images / 0x00000801 for labels, ``.gz`` accepted), a seeded synthetic
fallback so everything runs without downloads, and the IID / label-skewed
partitioners that decide which dataset rows each client trains on.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Bad magic number or malformed IDX header."""


class IdxLengthError(ValueError):
    """File shorter than its header promises."""


class DataMismatchError(ValueError):
    """Image and label files disagree on sample count."""


@dataclass
class Dataset:
    """Row-per-sample images scaled to [0,1] plus integer labels in [0,9]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ValueError("images must be a 2-D (n, dim) matrix")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels must lie in [0,9]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class ClientSlice:
    client_id: int
    label_set: frozenset[int]
    sample_indices: np.ndarray

    def __post_init__(self):
        self.label_set = frozenset(int(x) for x in self.label_set)
        self.sample_indices = np.asarray(self.sample_indices, dtype=np.int64)

    @property
    def sample_count(self) -> int:
        return int(self.sample_indices.shape[0])


@dataclass
class PartitionPlan:
    per_client: list[ClientSlice]

    def validate(self, dataset: Dataset) -> None:
        n = len(dataset)
        for sl in self.per_client:
            if sl.sample_count < 1:
                raise ValueError(f"client {sl.client_id} got an empty slice")
            if sl.sample_indices.min() < 0 or sl.sample_indices.max() >= n:
                raise ValueError(f"client {sl.client_id} has out-of-range indices")
            drawn = set(np.unique(dataset.labels[sl.sample_indices]).tolist())
            if not drawn <= sl.label_set:
                raise ValueError(
                    f"client {sl.client_id} drew labels {sorted(drawn - sl.label_set)} "
                    "outside its label set"
                )


@dataclass
class Partition:
    client_id: int
    train: Dataset

    def __post_init__(self):
        if len(self.train) < 1:
            raise ValueError("partition must be non-empty")


@dataclass
class SkewConfig:
    """Per-client label-subset sizes and sample counts for non-IID plans."""

    label_set_sizes: tuple[int, ...]
    sample_counts: tuple[int, ...]
    allow_replacement: bool = False

    def __post_init__(self):
        self.label_set_sizes = tuple(int(x) for x in self.label_set_sizes)
        self.sample_counts = tuple(int(x) for x in self.sample_counts)
        if len(self.label_set_sizes) != len(self.sample_counts):
            raise ValueError("label_set_sizes and sample_counts lengths differ")
        if any(not 1 <= s <= 10 for s in self.label_set_sizes):
            raise ValueError("label-set sizes must lie in [1,10]")
        if any(c < 1 for c in self.sample_counts):
            raise ValueError("sample counts must be positive")


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxLengthError(f"{what}: expected {n} bytes, file ended after {len(buf)}")
    return buf


def _open_maybe_gz(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair into a Dataset (pixels / 255)."""
    with _open_maybe_gz(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(f"image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, n * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)

    with _open_maybe_gz(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise IdxFormatError(f"label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "label data"), dtype=np.uint8)

    if n != n_labels:
        raise DataMismatchError(f"{n} images but {n_labels} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Inverse of load_idx; pixels are rescaled to uint8."""
    n, dim = dataset.images.shape
    if rows * cols != dim:
        raise ValueError(f"rows*cols = {rows * cols} does not match image dim {dim}")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


ALL_LABELS = frozenset(range(10))


def make_iid_plan(dataset: Dataset, n_clients: int, per_client_count: int, seed: int) -> PartitionPlan:
    """Uniform plan: disjoint chunks when they fit, otherwise per-client draws
    that may overlap across clients (never within one client)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if n_clients < 1 or per_client_count < 1:
        raise ValueError("n_clients and per_client_count must be >= 1")
    n = len(dataset)
    if per_client_count > n:
        raise ValueError(f"per-client count {per_client_count} exceeds dataset size {n}")
    rng = np.random.default_rng([seed, 1])
    slices = []
    if n_clients * per_client_count <= n:
        perm = rng.permutation(n)
        for cid in range(n_clients):
            idx = perm[cid * per_client_count : (cid + 1) * per_client_count]
            slices.append(ClientSlice(cid, ALL_LABELS, idx))
    else:
        for cid in range(n_clients):
            idx = rng.choice(n, size=per_client_count, replace=False)
            slices.append(ClientSlice(cid, ALL_LABELS, idx))
    return PartitionPlan(slices)


def make_noniid_plan(dataset: Dataset, n_clients: int, skew: SkewConfig, seed: int) -> PartitionPlan:
    """Label-skewed plan: label subsets walk round-robin over a seeded
    permutation of the 10 digits; each client draws only from its subset."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if len(skew.label_set_sizes) != n_clients:
        raise ValueError(f"skew config describes {len(skew.label_set_sizes)} clients, not {n_clients}")
    rng = np.random.default_rng([seed, 2])
    label_perm = rng.permutation(10)
    pos = 0
    slices = []
    for cid in range(n_clients):
        size = skew.label_set_sizes[cid]
        count = skew.sample_counts[cid]
        labels = frozenset(int(label_perm[(pos + j) % 10]) for j in range(size))
        pos = (pos + size) % 10
        pool = np.flatnonzero(np.isin(dataset.labels, sorted(labels)))
        if count > pool.size and not skew.allow_replacement:
            raise ValueError(
                f"client {cid} wants {count} samples but labels {sorted(labels)} "
                f"only offer {pool.size} (enable replacement to allow reuse)"
            )
        replace = count > pool.size
        idx = rng.choice(pool, size=count, replace=replace)
        slices.append(ClientSlice(cid, labels, idx))
    return PartitionPlan(slices)


def eval_split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng([seed, 3])
    perm = rng.permutation(n)
    n_eval = int(round(n * fraction))
    return perm[:n_eval], perm[n_eval:]


def shared_eval_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle-then-split; every participant sees the same eval set."""
    eval_idx, rest_idx = eval_split_indices(len(dataset), fraction, seed)
    return dataset.subset(eval_idx), dataset.subset(rest_idx)


def materialize(plan: PartitionPlan, dataset: Dataset) -> list[Partition]:
    plan.validate(dataset)
    return [Partition(sl.client_id, dataset.subset(sl.sample_indices)) for sl in plan.per_client]


def plan_to_json(plan: PartitionPlan) -> str:
    return json.dumps(
        [
            {
                "client_id": sl.client_id,
                "labels": sorted(sl.label_set),
                "count": sl.sample_count,
                "indices": sl.sample_indices.tolist(),
            }
            for sl in plan.per_client
        ]
    )


def plan_from_json(text: str) -> PartitionPlan:
    return PartitionPlan(
        [
            ClientSlice(rec["client_id"], frozenset(rec["labels"]), np.array(rec["indices"]))
            for rec in json.loads(text)
        ]
    )


def synthetic_blobs(
    n_samples: int,
    seed: int,
    n_classes: int = 10,
    dim: int = 784,
    center_scale: float = 0.10,
    noise_scale: float = 0.55,
) -> Dataset:
    """Gaussian class blobs squashed into [0,1]; label counts exactly balanced.

    center_scale sets how far class means sit apart, noise_scale how fuzzy
    each blob is; together they fix how many SGD steps a classifier needs.
    """
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng([seed, 4])
    centers = rng.normal(0.0, 1.0, size=(n_classes, dim))
    reps = -(-n_samples // n_classes)
    labels = np.tile(np.arange(n_classes), reps)[:n_samples]
    labels = labels[rng.permutation(n_samples)]
    images = 0.5 + center_scale * centers[labels] + rng.normal(0.0, noise_scale, size=(n_samples, dim))
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels)
