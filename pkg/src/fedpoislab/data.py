"""Dataset ingestion, synthesis, and client partitioning.

Features are always float64 rows normalized to [-1, 1]; labels are integer
class ids. IDX files (big-endian, magic 0x803 for images / 0x801 for labels)
cover the real-image path; ``synth_mixture`` is the fast stand-in used by the
test and experiment harnesses.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError
from .seeding import spawn

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# fixed stream for per-class mean directions so they depend only on (class, dim)
_DIRECTION_KEY = 311073


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, d) float64 in [-1, 1]
    labels: np.ndarray    # (n,) int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise InputError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise InputError(f"{x.shape[0]} feature rows but {y.shape} labels")
        if not np.isfinite(x).all():
            raise InputError("non-finite feature values")
        if x.size and (x.min() < -1.0 or x.max() > 1.0):
            raise InputError("features outside [-1, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise InputError(f"labels outside [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple  # per client, np.ndarray of sample indices
    mode: str

    def validate_against(self, n_samples: int):
        all_idx = np.concatenate([np.asarray(a) for a in self.assignments]) if self.assignments else np.array([])
        if len(all_idx) != n_samples or len(np.unique(all_idx)) != n_samples:
            raise InputError("partition is not disjoint-and-covering")
        if any(len(a) == 0 for a in self.assignments):
            raise InputError("partition left a client empty")


def _read_be32(f, field: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"truncated file while reading {field}")
    return struct.unpack(">I", data)[0]


def load_idx(image_path, label_path) -> LabeledDataset:
    """Parse an IDX image/label file pair into a normalized dataset.

    Pixel bytes map linearly from [0, 255] to [-1, 1].
    """
    with open(image_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IMAGE_MAGIC:
            raise FormatError(f"image magic 0x{magic:08x} != 0x{IMAGE_MAGIC:08x}")
        n = _read_be32(f, "image count")
        rows = _read_be32(f, "image rows")
        cols = _read_be32(f, "image cols")
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise FormatError(f"image data truncated: expected {n * rows * cols} bytes, got {len(raw)}")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)

    with open(label_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != LABEL_MAGIC:
            raise FormatError(f"label magic 0x{magic:08x} != 0x{LABEL_MAGIC:08x}")
        n_labels = _read_be32(f, "label count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise FormatError(f"label data truncated: expected {n_labels} bytes, got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise FormatError(f"image count {n} != label count {n_labels}")
    features = pixels.astype(np.float64) * (2.0 / 255.0) - 1.0
    return LabeledDataset(features, labels, int(labels.max()) + 1 if n else 1)


def features_to_bytes(features: np.ndarray) -> np.ndarray:
    """Invert normalization back to uint8; exact for values produced by load_idx."""
    return np.rint((np.asarray(features) + 1.0) * (255.0 / 2.0)).astype(np.uint8)


def class_centers(classes: int, dim: int, separation: float) -> np.ndarray:
    """Deterministic per-class Gaussian centers: separation x a fixed unit direction."""
    centers = np.zeros((classes, dim))
    for c in range(classes):
        u = spawn(_DIRECTION_KEY, c, dim).standard_normal(dim)
        centers[c] = separation * u / np.linalg.norm(u)
    return centers


def synth_mixture(classes: int, n_per_class: int, dim: int, separation: float,
                  seed: int, noise_sd: float = 0.7) -> LabeledDataset:
    """Gaussian class mixture clipped to [-1, 1]; deterministic given seed."""
    if dim < 2:
        raise InputError("dim must be >= 2")
    if classes < 1 or n_per_class < 1:
        raise InputError("counts must be positive")
    centers = class_centers(classes, dim, separation)
    rng = spawn(seed, "synth")
    features = np.empty((classes * n_per_class, dim))
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * n_per_class, (c + 1) * n_per_class)
        features[block] = centers[c] + noise_sd * rng.standard_normal((n_per_class, dim))
        labels[block] = c
    features = np.clip(features, -1.0, 1.0)
    order = rng.permutation(len(labels))
    return LabeledDataset(features[order], labels[order], classes)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int):
    """Seeded shuffle split; test gets round(n * test_fraction) samples."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError("test_fraction must be in (0, 1)")
    n_test = int(round(len(ds) * test_fraction))
    order = spawn(seed, "split").permutation(len(ds))
    return ds.subset(order[n_test:]), ds.subset(order[:n_test])


def partition_iid(ds: LabeledDataset, n_clients: int, seed: int) -> PartitionPlan:
    """Uniform shuffle split; shard sizes differ by at most one."""
    if n_clients <= 0:
        raise InputError("client count must be positive")
    n = len(ds)
    if n_clients > n:
        raise InputError(f"{n_clients} clients but only {n} samples")
    order = spawn(seed, "iid").permutation(n)
    base, extra = divmod(n, n_clients)
    shards, offset = [], 0
    for i in range(n_clients):
        size = base + (1 if i < extra else 0)
        shards.append(np.sort(order[offset:offset + size]))
        offset += size
    return PartitionPlan(tuple(shards), "iid")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional to weights."""
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    remainder = int(total - counts.sum())
    if remainder > 0:
        # largest fractional part first; ties to the lower index
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:remainder]] += 1
    return counts


def partition_dirichlet(ds: LabeledDataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Label-skewed shards: per class, client proportions ~ Dirichlet(alpha).

    Counts are rounded by largest remainder so each class's samples are used
    exactly once; a client left empty steals one sample from the largest one.
    """
    if alpha <= 0:
        raise InputError("alpha must be > 0")
    if n_clients <= 0:
        raise InputError("client count must be positive")
    rng = spawn(seed, "dirichlet")
    shards = [[] for _ in range(n_clients)]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            raise InputError(f"class {c} has no samples")
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = _largest_remainder(props, len(idx))
        offset = 0
        for i in range(n_clients):
            shards[i].extend(idx[offset:offset + counts[i]])
            offset += counts[i]
    for i in range(n_clients):
        if not shards[i]:
            donor = max(range(n_clients), key=lambda j: len(shards[j]))
            shards[i].append(shards[donor].pop())
    return PartitionPlan(tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards),
                         f"dirichlet({alpha})")


def dataset_to_csv(ds: LabeledDataset, path):
    """One row per sample, feature columns then the label."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
