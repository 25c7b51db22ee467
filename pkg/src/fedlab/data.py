"""Datasets, client partitioners and mini-batch scheduling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedlab.errors import ConfigError, ContractError, FormatError
from fedlab.model import Batch
from fedlab.rng import stream

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

FLDS_MAGIC = b"FLDS"
FLDS_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != labels.size:
            raise ContractError(
                f"{self.features.shape[0]} feature rows but {labels.size} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class PartitionReport:
    sizes: np.ndarray  # (K,)
    counts: np.ndarray  # (K, C)

    def to_csv(self) -> str:
        k, c = self.counts.shape
        lines = ["client_id,size," + ",".join(f"class_{j}" for j in range(c))]
        for i in range(k):
            lines.append(f"{i},{self.sizes[i]}," + ",".join(str(v) for v in self.counts[i]))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- loading


def read_cifar10_file(path, records: int | None = CIFAR_RECORDS_PER_FILE):
    """Read one CIFAR-10 binary batch file into (uint8 images, labels)."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    n, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise FormatError(
            f"file ends inside a record ({rem} of {CIFAR_RECORD} bytes)",
            path=str(path), offset=n * CIFAR_RECORD,
        )
    if records is not None and n != records:
        offset = min(n, records) * CIFAR_RECORD
        raise FormatError(
            f"expected {records} records of {CIFAR_RECORD} bytes, found {n}",
            path=str(path), offset=offset,
        )
    rows = raw.reshape(n, CIFAR_RECORD)
    labels = rows[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        r = int(bad[0])
        raise FormatError(
            f"label byte {int(labels[r])} out of range 0-9", path=str(path), offset=r * CIFAR_RECORD
        )
    return rows[:, 1:].reshape(n, 3, 32, 32), labels.astype(np.int64)


def load_cifar10(path, records_per_file: int | None = CIFAR_RECORDS_PER_FILE) -> tuple[Dataset, Dataset]:
    """Load the five training batches and the test batch from ``path``.

    Pixels are divided by 255 and kept in channel-planar (C, H, W) order. The
    arrays are stored as float32 to halve memory; batches are promoted to
    float64 when drawn. Every file is validated before any dataset is built.
    """
    root = Path(path)
    if not (root / CIFAR_TEST_FILE).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [read_cifar10_file(root / name, records_per_file) for name in CIFAR_TRAIN_FILES]
    test_x, test_y = read_cifar10_file(root / CIFAR_TEST_FILE, records_per_file)
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    scale = np.float32(1.0 / 255.0)
    train = Dataset(train_x.astype(np.float32) * scale, train_y, 10, "cifar10-train")
    test = Dataset(test_x.astype(np.float32) * scale, test_y, 10, "cifar10-test")
    return train, test


def synth_blobs(n: int, C: int, dim: int, spread: float, seed: int, split: int = 0) -> Dataset:
    """Gaussian clusters around ``C`` random unit-norm centers.

    Centers depend only on ``seed``; ``split`` selects an independent draw of
    labels and noise so train and test sets share the same clusters.
    """
    if n < C:
        raise ConfigError(f"need n >= C, got n={n}, C={C}")
    if C < 2 or dim < 1 or spread < 0:
        raise ConfigError("synth_blobs needs C >= 2, dim >= 1, spread >= 0")
    centers = stream(seed, "blob-centers").normal(size=(C, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rng = stream(seed, "blob-samples", split)
    labels = rng.permutation(np.arange(n) % C)
    features = centers[labels] + spread * rng.normal(size=(n, dim))
    return Dataset(features, labels, C, f"blobs-{split}")


def save_dataset(ds: Dataset, path) -> None:
    if ds.features.ndim != 2:
        raise ContractError("FLDS stores flat feature vectors only")
    if ds.num_classes > 256:
        raise ContractError("FLDS stores labels as u8")
    n, dim = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(FLDS_MAGIC)
        fh.write(struct.pack("<IIII", FLDS_VERSION, n, dim, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path, name: str | None = None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != FLDS_MAGIC:
        raise FormatError("missing FLDS magic", path=str(path), offset=0)
    version, n, dim, c = struct.unpack_from("<IIII", blob, 4)
    if version != FLDS_VERSION:
        raise FormatError(f"unsupported FLDS version {version}", path=str(path), offset=4)
    expected = 20 + n * dim * 8 + n
    if len(blob) != expected:
        raise FormatError(
            f"expected {expected} bytes, found {len(blob)}", path=str(path),
            offset=min(len(blob), expected),
        )
    features = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=20).reshape(n, dim).copy()
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=20 + n * dim * 8).astype(np.int64)
    if n and labels.max() >= c:
        bad = int(np.flatnonzero(labels >= c)[0])
        raise FormatError(f"label {labels[bad]} >= C={c}", path=str(path), offset=20 + n * dim * 8 + bad)
    return Dataset(features, labels, c, name or os.path.basename(str(path)))


# ---------------------------------------------------------------- partitioners


def _shards(parts) -> list[ClientShard]:
    return [ClientShard(k, np.sort(np.asarray(p, dtype=np.int64))) for k, p in enumerate(parts)]


def _class_order(ds: Dataset, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]


def partition_iid_balanced(ds: Dataset, K: int, seed: int) -> list[ClientShard]:
    """Deal class-sorted, within-class-shuffled samples round-robin to K clients.

    Shard sizes differ by at most one, and so do each class's per-shard counts.
    """
    n = len(ds)
    if K < 1 or K > n:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={n}")
    order = np.concatenate(_class_order(ds, stream(seed, "iid")))
    return _shards(order[k::K] for k in range(K))


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        # stable sort keeps ties resolved toward lower client ids
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_sgm(ds: Dataset, K: int, sgm: float, seed: int) -> list[ClientShard]:
    """Size-imbalanced partition whose shards keep the global label mix.

    Shard sizes are proportional to exp(sgm * z_k), z_k ~ N(0, 1); shards
    below ``max(C, 1)`` samples are topped up from the largest shard. Each
    shard is a contiguous cut of a class-interleaved ordering, so its class
    counts track the global proportions to within about one sample.
    """
    n, c = len(ds), ds.num_classes
    if sgm < 0:
        raise ConfigError(f"sgm must be >= 0, got {sgm}")
    if K < 1:
        raise ConfigError(f"need K >= 1, got {K}")
    minimum = max(c, 1)
    if K * minimum > n:
        raise ConfigError(f"K*C = {K * minimum} exceeds N = {n}")
    if sgm == 0:
        return partition_iid_balanced(ds, K, seed)
    rng = stream(seed, "sgm")
    sizes = _largest_remainder(n, np.exp(sgm * rng.normal(size=K)))
    while sizes.min() < minimum:
        small, big = int(sizes.argmin()), int(sizes.argmax())
        move = minimum - sizes[small]
        sizes[small] += move
        sizes[big] -= move

    per_class = _class_order(ds, rng)
    keys, members = [], []
    for cls in per_class:
        m = cls.size
        keys.append((np.arange(m) + 0.5) / m)
        members.append(cls)
    keys = np.concatenate(keys)
    members = np.concatenate(members)
    order = members[np.argsort(keys, kind="stable")]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return _shards(order[bounds[k] : bounds[k + 1]] for k in range(K))


def partition_dirichlet(ds: Dataset, K: int, alpha: float, seed: int) -> list[ClientShard]:
    """Label-skewed partition: class c is split by p_c ~ Dirichlet(alpha * 1_K)."""
    n = len(ds)
    if K < 1 or K > n:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={n}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    rng = stream(seed, "dirichlet")
    parts: list[list[int]] = [[] for _ in range(K)]
    for cls in _class_order(ds, rng):
        p = _dirichlet(rng, alpha, K)
        counts = _largest_remainder(cls.size, p)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(K):
            parts[k].extend(cls[bounds[k] : bounds[k + 1]].tolist())
    for k in range(K):
        while not parts[k]:
            big = max(range(K), key=lambda j: (len(parts[j]), -j))
            parts[k].append(parts[big].pop())
    return _shards(parts)


def _dirichlet(rng: np.random.Generator, alpha: float, K: int) -> np.ndarray:
    p = rng.dirichlet(np.full(K, alpha))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # every gamma draw underflowed; the limit is a one-hot on a random client
        p = np.zeros(K)
        p[rng.integers(K)] = 1.0
    return p


def partition(ds: Dataset, K: int, scheme: str, seed: int, *, alpha: float | None = None, sgm: float | None = None):
    if scheme == "iid":
        return partition_iid_balanced(ds, K, seed)
    if scheme == "sgm":
        return partition_sgm(ds, K, float(sgm), seed)
    if scheme == "dirichlet":
        return partition_dirichlet(ds, K, float(alpha), seed)
    raise ConfigError(f"unknown partition scheme {scheme!r}")


def partition_report(ds: Dataset, shards: list[ClientShard]) -> PartitionReport:
    counts = np.zeros((len(shards), ds.num_classes), dtype=np.int64)
    for i, shard in enumerate(shards):
        counts[i] = np.bincount(ds.labels[shard.indices], minlength=ds.num_classes)
    return PartitionReport(counts.sum(axis=1), counts)


# ---------------------------------------------------------------- batching


def minibatch_indices(shard: ClientShard, B: int, seed: int, epoch: int) -> list[np.ndarray]:
    if B < 1:
        raise ContractError(f"batch size must be >= 1, got {B}")
    if len(shard) == 0:
        raise ContractError(f"client {shard.client_id} has an empty shard")
    order = stream(seed, "batches", shard.client_id, epoch).permutation(shard.indices)
    return [order[i : i + B] for i in range(0, order.size, B)]


def minibatches(ds: Dataset, shard: ClientShard, B: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle the shard with the (seed, client, epoch) stream and cut it into batches."""
    return [ds.batch(idx) for idx in minibatch_indices(shard, B, seed, epoch)]


def full_shard(ds: Dataset, client_id: int = 0) -> ClientShard:
    return ClientShard(client_id, np.arange(len(ds)))
