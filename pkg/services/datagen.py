"""
Synthetic datasets and client partitioners (IID, IID/non-IID mix, Dirichlet label skew, LQ-C shards).
Every partitioner is a pure function of (dataset, parameters, seed). Indices that cannot be split
evenly are dropped and counted rather than assigned unevenly.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from services.errors import DatasetError, PartitionError
from services.models import Batch
from services.rng import TAG_BLOBS, TAG_PARTITION, stream

logger = logging.getLogger(__name__)

MAX_DIRICHLET_REDRAWS = 1000


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise DatasetError(f"features {features.shape} and labels {labels.shape} do not line up")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), labels)
        if missing.size:
            raise DatasetError(f"classes {missing.tolist()} have no examples")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def as_batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch(self.features, self.labels)
        return Batch(self.features[indices], self.labels[indices])


@dataclass(frozen=True)
class Partition:
    assignments: Tuple[np.ndarray, ...]
    dropped: int = 0
    redraws: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> List[int]:
        return [int(a.shape[0]) for a in self.assignments]


def _make_partition(lists, dropped: int = 0, redraws: int = 0) -> Partition:
    assignments = tuple(np.sort(np.asarray(a, dtype=np.int64)) for a in lists)
    for client, a in enumerate(assignments):
        if a.shape[0] == 0:
            raise PartitionError(f"client {client} received no examples")
    return Partition(assignments=assignments, dropped=int(dropped), redraws=int(redraws))


def check_partition(part: Partition, n: int) -> None:
    """Raise PartitionError unless the partition is disjoint, non-empty and covers n minus dropped."""
    seen = np.concatenate(part.assignments) if part.assignments else np.empty(0, dtype=np.int64)
    if np.unique(seen).shape[0] != seen.shape[0]:
        raise PartitionError("client index lists overlap")
    if seen.size and (seen.min() < 0 or seen.max() >= n):
        raise PartitionError("index out of dataset range")
    if seen.shape[0] + part.dropped != n:
        raise PartitionError(f"{seen.shape[0]} assigned + {part.dropped} dropped != {n}")
    if any(s == 0 for s in part.sizes()):
        raise PartitionError("empty client")


# ---------- Datasets ----------

def make_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed: int, draw: int = 1) -> LabeledDataset:
    """
    Gaussian blobs: centroid_c ~ 3*N(0, I) (from the seed's centroid stream), points = centroid + N(0, spread^2 I).
    draw selects the noise stream, so draw=2 gives a held-out pool around the same centroids.
    """
    if num_classes < 2:
        raise DatasetError("num_classes must be >= 2")
    if per_class < 1 or dim < 1:
        raise DatasetError("per_class and dim must be >= 1")
    if spread <= 0:
        raise DatasetError("spread must be positive")
    centroids = 3.0 * stream(seed, TAG_BLOBS, 0).standard_normal((num_classes, dim))
    noise = stream(seed, TAG_BLOBS, draw).standard_normal((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    features = centroids[labels] + spread * noise
    return LabeledDataset(features=features, labels=labels, num_classes=num_classes)


def load_csv_dataset(path, num_classes: Optional[int] = None) -> LabeledDataset:
    """Load `f0,...,f{dim-1},label` CSV with a header row."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    dim = len(header) - 1
    expected = [f"f{i}" for i in range(dim)] + ["label"]
    if dim < 1 or [h.strip() for h in header] != expected:
        raise DatasetError(f"{path}: header must be f0,...,f{{dim-1}},label; got {','.join(header)}")
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed row ({exc})") from exc
    if raw.shape[0] == 0:
        raise DatasetError(f"{path}: no data rows")
    if raw.shape[1] != dim + 1:
        raise DatasetError(f"{path}: expected {dim + 1} fields per row, got {raw.shape[1]}")
    if not np.all(np.isfinite(raw)):
        raise DatasetError(f"{path}: non-finite values")
    labels_f = raw[:, -1]
    if not np.all(labels_f == np.round(labels_f)):
        raise DatasetError(f"{path}: labels must be integers")
    labels = labels_f.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(features=raw[:, :-1], labels=labels, num_classes=num_classes)


# ---------- Partitioners ----------

def _deal_per_class(labels: np.ndarray, indices: np.ndarray, num_clients: int, rng: np.random.Generator):
    """Shuffle each class's indices and deal floor(count/N) to every client."""
    lists = [[] for _ in range(num_clients)]
    dropped = 0
    for c in np.unique(labels[indices]):
        members = rng.permutation(indices[labels[indices] == c])
        per = members.shape[0] // num_clients
        if per == 0:
            raise PartitionError(f"class {c} has {members.shape[0]} examples, fewer than {num_clients} clients")
        for k in range(num_clients):
            lists[k].append(members[k * per:(k + 1) * per])
        dropped += members.shape[0] - per * num_clients
    return [np.concatenate(parts) for parts in lists], dropped


def partition_iid(ds: LabeledDataset, N: int, seed: int) -> Partition:
    if N < 1:
        raise PartitionError("N must be >= 1")
    rng = stream(seed, TAG_PARTITION, 0)
    lists, dropped = _deal_per_class(ds.labels, np.arange(ds.size), N, rng)
    return _make_partition(lists, dropped)


def partition_mixed(ds: LabeledDataset, N: int, seed: int) -> Partition:
    """Global random half dealt IID; the other half sorted by label and cut into N contiguous shards."""
    if N < 1:
        raise PartitionError("N must be >= 1")
    rng = stream(seed, TAG_PARTITION, 1)
    perm = rng.permutation(ds.size)
    half = ds.size // 2
    iid_part, dropped = _deal_per_class(ds.labels, perm[:half], N, rng)
    rest = perm[half:]
    rest = rest[np.lexsort((rest, ds.labels[rest]))]
    shard = rest.shape[0] // N
    if shard == 0:
        raise PartitionError(f"non-IID half has {rest.shape[0]} examples, fewer than {N} clients")
    dropped += rest.shape[0] - shard * N
    lists = [np.concatenate([iid_part[k], rest[k * shard:(k + 1) * shard]]) for k in range(N)]
    return _make_partition(lists, dropped)


def partition_dirichlet(ds: LabeledDataset, N: int, beta: float, min_size: int, seed: int) -> Partition:
    """Per-class Dirichlet(beta) proportions; full redraw until every client holds >= min_size examples."""
    if beta <= 0:
        raise PartitionError("beta must be positive")
    if min_size < 1 or N < 1:
        raise PartitionError("min_size and N must be >= 1")
    rng = stream(seed, TAG_PARTITION, 2)
    classes = np.unique(ds.labels)
    for attempt in range(MAX_DIRICHLET_REDRAWS):
        lists = [[] for _ in range(N)]
        for c in classes:
            members = rng.permutation(np.flatnonzero(ds.labels == c))
            props = rng.dirichlet(np.full(N, beta))
            cuts = (np.cumsum(props) * members.shape[0]).astype(np.int64)[:-1]
            for k, chunk in enumerate(np.split(members, cuts)):
                lists[k].append(chunk)
        sizes = [sum(chunk.shape[0] for chunk in parts) for parts in lists]
        if min(sizes) >= min_size:
            if attempt >= 100:
                logger.warning("Dirichlet partition needed %d redraws (N=%d, beta=%s)", attempt, N, beta)
            return _make_partition([np.concatenate(parts) for parts in lists], 0, attempt)
    raise PartitionError(
        f"Dirichlet partition infeasible: {MAX_DIRICHLET_REDRAWS} redraws failed "
        f"(N={N}, beta={beta}, min_size={min_size})"
    )


def partition_lq(ds: LabeledDataset, N: int, C: int, seed: int) -> Partition:
    """Sort by label, cut N*C equal shards, shuffle shard order, deal C shards per client."""
    if N < 1 or C < 1:
        raise PartitionError("N and C must be >= 1")
    num_shards = N * C
    if num_shards > ds.size:
        raise PartitionError(f"N*C = {num_shards} exceeds {ds.size} rows")
    order = np.lexsort((np.arange(ds.size), ds.labels))
    shard = ds.size // num_shards
    dropped = ds.size - shard * num_shards
    shards = order[:shard * num_shards].reshape(num_shards, shard)
    shard_order = stream(seed, TAG_PARTITION, 3).permutation(num_shards)
    lists = [shards[shard_order[k * C:(k + 1) * C]].reshape(-1) for k in range(N)]
    return _make_partition(lists, dropped)


def partition_dataset(ds: LabeledDataset, kind: str, N: int, seed: int, beta: float = 0.5,
                      min_size: int = 10, chunks: int = 1) -> Partition:
    if kind == "iid":
        return partition_iid(ds, N, seed)
    if kind == "mixed":
        return partition_mixed(ds, N, seed)
    if kind == "dirichlet":
        return partition_dirichlet(ds, N, beta, min_size, seed)
    if kind == "lq":
        return partition_lq(ds, N, chunks, seed)
    raise PartitionError(f"unknown partitioner {kind!r}")


def label_histogram(ds: LabeledDataset, part: Partition, client: int) -> np.ndarray:
    if not 0 <= client < part.num_clients:
        raise PartitionError(f"client {client} outside [0, {part.num_clients})")
    return np.bincount(ds.labels[part.assignments[client]], minlength=ds.num_classes)


def client_batches(ds: LabeledDataset, part: Partition) -> List[Batch]:
    return [ds.as_batch(idx) for idx in part.assignments]
