"""Synthetic identity datasets and federated partitioning schemes.

Gaussian identity clusters stand in for a face dataset: class centers are
drawn once from a seeded normal, samples are center + isotropic noise. The
default center scale (5x the cluster std) keeps the pooled problem solvable
but leaves enough ambiguity for cross-client embedding collisions to show up
in a plain private-head run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SyntheticSpec:
    num_classes: int = 32
    samples_per_class: int = 25
    input_dim: int = 16
    cluster_std: float = 1.0
    class_center_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples_per_class < 2:
            raise ValueError("need >= 2 samples per class for a train/test split")
        if self.input_dim < 1 or self.cluster_std < 0.0:
            raise ValueError("bad input_dim or cluster_std")


@dataclass
class VerificationPairs:
    """Index pairs into a held-out sample block, plus same-identity flags."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    same: np.ndarray

    def __len__(self) -> int:
        return len(self.same)


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    centers: np.ndarray
    pairs: VerificationPairs

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]


def generate(spec: SyntheticSpec, pairs_per_class: int = 10) -> Dataset:
    """Seeded dataset with a disjoint train/test split and verification pairs.

    Pairs come from the test block only: pairs_per_class * C positive pairs
    (same class, distinct samples) and as many negative pairs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    c, spc, dim = spec.num_classes, spec.samples_per_class, spec.input_dim
    if spc < 8:
        # a quarter of the samples go to test and positive pairs need two
        # distinct test samples of the same class
        raise ValueError(f"samples_per_class must be >= 8, got {spc}")
    centers = rng.normal(0.0, spec.class_center_scale, size=(c, dim))

    n_test = spc // 4
    n_train = spc - n_test

    labels = np.repeat(np.arange(c), spc)
    samples = centers[labels] + rng.normal(0.0, spec.cluster_std, size=(c * spc, dim))
    per_class = samples.reshape(c, spc, dim)
    train_x = per_class[:, :n_train, :].reshape(c * n_train, dim)
    train_y = np.repeat(np.arange(c), n_train)
    test_x = per_class[:, n_train:, :].reshape(c * n_test, dim)
    test_y = np.repeat(np.arange(c), n_test)

    pairs = _sample_pairs(test_y, pairs_per_class * c, rng)
    return Dataset(train_x, train_y, test_x, test_y, centers, pairs)


def _sample_pairs(labels: np.ndarray, n_each: int, rng: np.random.Generator) -> VerificationPairs:
    by_class = [np.flatnonzero(labels == cls) for cls in range(labels.max() + 1)]
    classes = len(by_class)
    idx_a, idx_b, same = [], [], []
    for _ in range(n_each):
        cls = rng.integers(classes)
        a, b = rng.choice(by_class[cls], size=2, replace=False)
        idx_a.append(a)
        idx_b.append(b)
        same.append(True)
    for _ in range(n_each):
        ca, cb = rng.choice(classes, size=2, replace=False)
        idx_a.append(rng.choice(by_class[ca]))
        idx_b.append(rng.choice(by_class[cb]))
        same.append(False)
    return VerificationPairs(np.array(idx_a), np.array(idx_b), np.array(same))


@dataclass
class PartitionSpec:
    num_clients: int
    assignment: dict[int, tuple[int, ...]]  # class -> clients holding it
    counts: np.ndarray                      # per-client sample counts n_k
    scheme: str
    shared_groups: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


@dataclass
class ClientData:
    """One client's shard; local label j means global class `classes[j]`."""

    client_id: int
    classes: list[int]
    x: np.ndarray
    y_local: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.y_local)

    @property
    def y_global(self) -> np.ndarray:
        return np.asarray(self.classes)[self.y_local]


def _build_clients(
    dataset: Dataset,
    holders: dict[int, tuple[int, ...]],
    splits: dict[int, dict[int, np.ndarray]],
    num_clients: int,
) -> list[ClientData]:
    """Assemble per-client shards from class->clients and per-class index splits."""
    class_lists: list[list[int]] = [[] for _ in range(num_clients)]
    for cls, hs in holders.items():
        for k in hs:
            class_lists[k].append(cls)
    clients = []
    for k in range(num_clients):
        classes = sorted(class_lists[k])
        xs, ys = [], []
        for local, cls in enumerate(classes):
            idx = splits[cls][k]
            xs.append(dataset.train_x[idx])
            ys.append(np.full(len(idx), local, dtype=np.int64))
        x = np.concatenate(xs) if xs else np.empty((0, dataset.input_dim))
        y = np.concatenate(ys) if ys else np.empty(0, dtype=np.int64)
        clients.append(ClientData(k, classes, x, y))
    return clients


def _exclusive_splits(dataset: Dataset, holders: dict[int, tuple[int, ...]]):
    splits: dict[int, dict[int, np.ndarray]] = {}
    for cls, hs in holders.items():
        idx = np.flatnonzero(dataset.train_y == cls)
        splits[cls] = {hs[0]: idx}
    return splits


def partition_balanced(dataset: Dataset, num_clients: int) -> tuple[PartitionSpec, list[ClientData]]:
    """Contiguous equal-size class blocks; requires num_clients | num_classes."""
    c = dataset.num_classes
    if num_clients < 1 or c % num_clients:
        raise ValueError(f"balanced partition needs clients ({num_clients}) to divide classes ({c})")
    per = c // num_clients
    holders = {cls: (cls // per,) for cls in range(c)}
    clients = _build_clients(dataset, holders, _exclusive_splits(dataset, holders), num_clients)
    counts = np.array([cl.n_samples for cl in clients])
    return PartitionSpec(num_clients, holders, counts, "balanced"), clients


def partition_lognormal(
    dataset: Dataset, num_clients: int, seed: int
) -> tuple[PartitionSpec, list[ClientData]]:
    """Unbalanced class counts per client, drawn so that ln(weight) ~ N(0, 1).

    Weights are converted to class counts by largest-remainder rounding with
    every client keeping at least one class; classes are dealt out in a
    seeded shuffled order.
    """
    c = dataset.num_classes
    if num_clients < 2:
        raise ValueError("lognormal partition needs >= 2 clients")
    if num_clients > c:
        raise ValueError("more clients than classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x109]))
    weights = np.exp(rng.normal(0.0, 1.0, size=num_clients))
    counts = _largest_remainder(weights / weights.sum() * c, c, minimum=1)
    order = rng.permutation(c)
    holders: dict[int, tuple[int, ...]] = {}
    start = 0
    for k, cnt in enumerate(counts):
        for cls in order[start : start + cnt]:
            holders[int(cls)] = (k,)
        start += cnt
    clients = _build_clients(dataset, holders, _exclusive_splits(dataset, holders), num_clients)
    n_k = np.array([cl.n_samples for cl in clients])
    return PartitionSpec(num_clients, holders, n_k, "lognormal"), clients


def _largest_remainder(target: np.ndarray, total: int, minimum: int) -> np.ndarray:
    floors = np.maximum(np.floor(target).astype(int), minimum)
    while floors.sum() > total:
        floors[np.argmax(floors)] -= 1
    remainder = total - floors.sum()
    if remainder > 0:
        frac = target - np.floor(target)
        for i in np.argsort(-frac)[:remainder]:
            floors[i] += 1
    return floors


def partition_shared(
    dataset: Dataset,
    num_clients: int,
    share_fraction: float,
    seed: int,
    group_size: int = 2,
) -> tuple[PartitionSpec, list[ClientData]]:
    """Duplicate a fraction of classes across small client groups.

    Each shared class is held by a random group of `group_size` clients, its
    training samples split evenly among them; remaining classes are exclusive
    and dealt round-robin.
    """
    c = dataset.num_classes
    if not 0.0 <= share_fraction < 1.0:
        raise ValueError("share_fraction must be in [0, 1)")
    if not 2 <= group_size <= num_clients:
        raise ValueError("group_size must be in [2, num_clients]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AE]))
    n_shared = int(round(share_fraction * c))
    order = rng.permutation(c)
    shared_classes = sorted(int(x) for x in order[:n_shared])

    holders: dict[int, tuple[int, ...]] = {}
    splits: dict[int, dict[int, np.ndarray]] = {}
    shared_groups = []
    for cls in shared_classes:
        group = tuple(int(g) for g in np.sort(rng.choice(num_clients, size=group_size, replace=False)))
        holders[cls] = group
        shared_groups.append((cls, group))
        idx = np.flatnonzero(dataset.train_y == cls)
        chunks = np.array_split(idx, group_size)
        splits[cls] = {k: chunk for k, chunk in zip(group, chunks)}

    exclusive = [cls for cls in range(c) if cls not in set(shared_classes)]
    for i, cls in enumerate(exclusive):
        k = i % num_clients
        holders[cls] = (k,)
        splits[cls] = {k: np.flatnonzero(dataset.train_y == cls)}

    clients = _build_clients(dataset, holders, splits, num_clients)
    n_k = np.array([cl.n_samples for cl in clients])
    return PartitionSpec(num_clients, holders, n_k, "shared", shared_groups), clients


def save_samples(path, x: np.ndarray, y: np.ndarray) -> None:
    """Plain-text export: header '<n> <dim>', then 'label,v1,...,vdim' per record.

    Floats use 17 significant digits, so float64 values round-trip exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("expected x (n, dim) and y (n,)")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{x.shape[0]} {x.shape[1]}\n")
        for label, row in zip(y, x):
            fh.write(f"{label}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def load_samples(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of save_samples."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: bad header, expected '<n> <dim>'")
        n, dim = int(header[0]), int(header[1])
        x = np.empty((n, dim))
        y = np.empty(n, dtype=np.int64)
        for i in range(n):
            fields = fh.readline().rstrip("\n").split(",")
            if len(fields) != dim + 1:
                raise ValueError(f"{path}: record {i} has {len(fields) - 1} values, expected {dim}")
            y[i] = int(fields[0])
            x[i] = [float(v) for v in fields[1:]]
    return x, y
