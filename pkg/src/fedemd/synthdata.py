"""Cluster-structured federated datasets built from 2-D Gaussian class blobs.

Two families are provided:

* rotated clusters: every cluster sees the same class-conditional blobs,
  rotated about the origin by a cluster-specific angle;
* backdoor partitions: a clean group, a group whose extra feature column
  encodes the label, and a group with shifted class means.

Each client holds an 80/10/10 train/val/test split. ``n_per_client`` counts
training samples, so a client holds ``round(n_per_client / 0.8)`` in total.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import ValidationError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class BackdoorInfo:
    """Where the spurious column lives and how it encodes a class."""

    column: int
    strength: float
    codes: np.ndarray
    jitter: float

    def encode(self, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # jitter is relative to the code scale so a zero-strength column is exactly zero
        return self.strength * (self.codes[classes] + self.jitter * rng.standard_normal(len(classes)))

    def neutral(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Column values of data without the backdoor: uniform over the code range."""
        return self.strength * rng.uniform(-1.0, 1.0, n)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    split: str
    num_classes: int
    backdoor: BackdoorInfo | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError("X and y lengths differ")
        if np.isnan(self.X).any():
            raise ValidationError("features contain NaN")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValidationError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class ClientData:
    client_id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    @property
    def n_samples(self) -> int:
        """Training-set size, the aggregation weight's numerator."""
        return len(self.train)


@dataclass(frozen=True, eq=False)
class ClientPartition:
    clients: list[ClientData]
    ground_truth: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if ids != list(range(len(ids))):
            raise ValidationError("client ids must be 0..C-1 in order")
        if len(self.ground_truth) != len(ids):
            raise ValidationError("ground truth length differs from client count")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def n_features(self) -> int:
        return self.clients[0].train.X.shape[1]

    @property
    def total_samples(self) -> int:
        return sum(c.n_samples for c in self.clients)


def class_means(num_classes: int, radius: float = 1.0) -> np.ndarray:
    """Class centres on a spiral: growing radius, 80 degree steps from 35 degrees.

    The unequal radii make the class mixture free of rotational symmetry, so
    each rotation angle yields a distinct input distribution.
    """
    k = np.arange(num_classes)
    r = radius * (1.0 + 0.3 * k)
    theta = np.deg2rad(35.0 + 80.0 * k)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def rotation(angle_deg: float) -> np.ndarray:
    """Matrix rotating row vectors counter-clockwise by ``angle_deg``."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, s], [-s, c]])


def split_sizes(n_train: int) -> tuple[int, int, int]:
    total = int(round(n_train / 0.8))
    n_val = (total - n_train) // 2
    return n_train, n_val, total - n_train - n_val


def _split(X, y, n_train, num_classes, rng, backdoor=None) -> tuple[LabeledDataset, ...]:
    """Stratified 80/10/10 split: every split keeps the class balance of the pool."""
    sizes = split_sizes(n_train)
    parts = [[] for _ in SPLITS]
    # deal each class's shuffled samples round-robin in proportion to split size
    order = np.argsort(y, kind="stable")
    order = np.concatenate([rng.permutation(order[y[order] == k]) for k in range(num_classes)])
    quota = np.array(sizes, dtype=float) / sum(sizes)
    taken = np.zeros(len(SPLITS))
    for idx in order:
        s = int(np.argmax(quota * (taken.sum() + 1) - taken))
        parts[s].append(idx)
        taken[s] += 1
    out = []
    for name, idx in zip(SPLITS, parts):
        idx = rng.permutation(np.asarray(idx, dtype=np.int64))
        out.append(LabeledDataset(X[idx], y[idx], name, num_classes, backdoor))
    return tuple(out)


def _blobs(means, n, noise, rng):
    """``n`` samples with class counts as equal as possible, in random order."""
    y = rng.permutation(np.arange(n) % len(means))
    X = means[y] + noise * rng.standard_normal((n, means.shape[1]))
    return X, y


def make_rotated_clusters(
    C: int = 16,
    K: int = 4,
    classes: int = 4,
    n_per_client: int = 200,
    angles=(0, 90, 180, 270),
    noise: float = 0.2,
    seed: int = 0,
) -> ClientPartition:
    """Clients assigned round-robin to ``K`` rotated copies of one blob mixture.

    Client ``c`` belongs to cluster ``c mod K``; when ``C`` is not a multiple
    of ``K`` the first ``C mod K`` clusters hold one extra client.
    """
    angles = [float(a) for a in angles]
    if len(angles) != K:
        raise ValidationError(f"need {K} angles, got {len(angles)}")
    if not 1 <= K <= C:
        raise ValidationError("need 1 <= K <= C")
    means = class_means(classes)
    n_total = sum(split_sizes(n_per_client))
    root = np.random.SeedSequence([seed, 0x524F54])
    clients = []
    truth = np.arange(C) % K
    for cid, ss in enumerate(root.spawn(C)):
        rng = np.random.default_rng(ss)
        X, y = _blobs(means, n_total, noise, rng)
        X = X @ rotation(angles[truth[cid]])
        train, val, test = _split(X, y, n_per_client, classes, rng)
        clients.append(ClientData(cid, train, val, test))
    meta = {
        "kind": "rotated",
        "angles": angles,
        "noise": noise,
        "cluster_sizes": np.bincount(truth, minlength=K).tolist(),
        "remainder": C % K,
    }
    return ClientPartition(clients, truth, classes, meta)


def make_backdoor_partition(
    C: int = 15,
    n_per_client: int = 200,
    patch_strength: float = 2.0,
    seed: int = 0,
    classes: int = 4,
    noise: float = 0.8,
    shift: tuple[float, float] = (6.0, -6.0),
    jitter: float = 0.05,
) -> ClientPartition:
    """Three equal client groups with a third, spurious feature column.

    * group 0 (clients ``0..C/3-1``): clean; the extra column is uniform
      noise over ``[-patch_strength, patch_strength]``, independent of the label;
    * group 1: backdoored; the extra column sits on one of ``classes`` evenly
      spaced codes in the same interval, selected by the true label;
    * group 2: a disjoint label set ``classes..2*classes-1`` whose means are
      the base means moved by ``shift``; extra column as in group 0.

    Labels therefore range over ``2 * classes`` values.

    Both column distributions cover the same range, so a model trained on
    clean data learns to ignore the column, while the sharp codes of group 1
    make it a near-perfect label cue for any model that sees them.
    """
    if C % 3:
        raise ValidationError(f"C must be divisible by 3, got {C}")
    per = C // 3
    info = BackdoorInfo(2, float(patch_strength), np.linspace(-1.0, 1.0, classes), jitter)
    base = class_means(classes)
    n_total = sum(split_sizes(n_per_client))
    root = np.random.SeedSequence([seed, 0x424B44])
    truth = np.repeat(np.arange(3), per)
    clients = []
    for cid, ss in enumerate(root.spawn(C)):
        rng = np.random.default_rng(ss)
        group = truth[cid]
        means = base + np.asarray(shift) if group == 2 else base
        X2, y = _blobs(means, n_total, noise, rng)
        if group == 2:
            y = y + classes
        extra = info.encode(y, rng) if group == 1 else info.neutral(n_total, rng)
        X = np.column_stack([X2, extra])
        train, val, test = _split(X, y, n_per_client, 2 * classes, rng, info)
        clients.append(ClientData(cid, train, val, test))
    meta = {
        "kind": "backdoor",
        "patch_strength": float(patch_strength),
        "noise": noise,
        "groups": ["clean", "backdoor", "shifted"],
    }
    return ClientPartition(clients, truth, 2 * classes, meta)


def flip_backdoor(test: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Re-encode the spurious column to point at a uniformly random wrong class.

    Labels beyond the code table wrap around it, so every sample receives a
    code other than ``codes[y mod len(codes)]``.
    """
    if test.backdoor is None:
        raise ValidationError("dataset has no backdoor column")
    info = test.backdoor
    k = len(info.codes)
    if k < 2:
        raise ValidationError("need at least two classes to flip")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x464C50]))
    wrong = (test.y % k + rng.integers(1, k, size=len(test))) % k
    X = test.X.copy()
    X[:, info.column] = info.encode(wrong, rng)
    return replace(test, X=X)


CSV_HEADER_TAIL = ("label", "split", "client_id")


def write_partition_csv(partition: ClientPartition, path: str | Path) -> None:
    """One row per sample: ``x0..x{d-1}, label, split, client_id``."""
    d = partition.n_features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + list(CSV_HEADER_TAIL))
        for client in partition.clients:
            for ds in (client.train, client.val, client.test):
                for row, label in zip(ds.X, ds.y):
                    w.writerow([repr(float(v)) for v in row] + [int(label), ds.split, client.client_id])
