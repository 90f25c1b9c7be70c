"""Clustering scores, accuracy summaries and pairwise client-distance diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import subspace_angles
from scipy.spatial.distance import pdist, squareform

from . import autonet
from ._validation import DimensionMismatchError, ValidationError, as_matrix
from .autonet import ModelParams
from .synthdata import ClientPartition, LabeledDataset, flip_backdoor


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Cluster id per client, numbered contiguously from 0."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1:
            raise ValidationError("cluster labels must be 1-D")
        if lab.size and not np.array_equal(np.unique(lab), np.arange(lab.max() + 1)):
            raise ValidationError("cluster ids must be contiguous from 0")

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        """Relabel arbitrary ids to ``0..K-1`` by order of first appearance."""
        lab = np.asarray(labels).ravel()
        ids: dict = {}
        out = np.array([ids.setdefault(v, len(ids)) for v in lab.tolist()], dtype=np.int64)
        return cls(out)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index (Hubert and Arabie) of two labelings.

    Ranges over [-1/2, 1] for two-cluster labelings and is 1 exactly when
    the partitions agree up to relabeling. When both labelings are trivial
    (all singletons or one cluster each) the index is defined as 1.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise DimensionMismatchError(
            f"labelings differ in length ({pred.size} vs {truth.size})"
        )
    n = pred.size
    if n < 2:
        return 1.0
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((p_idx.max() + 1, t_idx.max() + 1))
    np.add.at(table, (p_idx, t_idx), 1)
    index = _comb2(table).sum()
    rows = _comb2(table.sum(axis=1)).sum()
    cols = _comb2(table.sum(axis=0)).sum()
    expected = rows * cols / _comb2(n)
    maximum = 0.5 * (rows + cols)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def accuracy_summary(per_client_acc) -> tuple[float, float]:
    """``(mean, min)`` of per-client accuracies."""
    acc = np.asarray(per_client_acc, dtype=float).ravel()
    if acc.size == 0:
        raise ValidationError("no accuracies to summarise")
    return float(acc.mean()), float(acc.min())


def flipped_accuracy(
    params: ModelParams, test: LabeledDataset, n_flips: int = 10, seed: int = 0
) -> float:
    """Accuracy on ``test`` with its backdoor column re-encoded to a wrong class.

    The re-encoding is random, so the value is averaged over ``n_flips``
    independent draws.
    """
    if n_flips < 1:
        raise ValidationError("n_flips must be >= 1")
    accs = [
        autonet.evaluate(params, flip_backdoor(test, seed * 1_000_003 + i).X, test.y)
        for i in range(n_flips)
    ]
    return float(np.mean(accs))


def pairwise_l2(vectors) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``vectors``."""
    V = as_matrix(np.asarray(vectors, dtype=float), "vectors")
    return squareform(pdist(V))


def param_distance_matrix(params: list[ModelParams], part: str = "all") -> np.ndarray:
    """Pairwise L2 distances of flattened parameters (``all``, ``omega`` or ``phi``)."""
    return pairwise_l2(np.stack([p.flat(part) for p in params]))


def within_and_overall(D, labels) -> tuple[float, float]:
    """Mean off-diagonal distance among same-cluster pairs and among all pairs."""
    D = np.asarray(D, dtype=float)
    labels = np.asarray(labels)
    if D.shape != (labels.size, labels.size):
        raise DimensionMismatchError("distance matrix and labels disagree in size")
    off = ~np.eye(labels.size, dtype=bool)
    same = (labels[:, None] == labels[None, :]) & off
    if not same.any():
        raise ValidationError("no within-cluster pairs")
    return float(D[same].mean()), float(D[off].mean())


def symmetrized_emd(W) -> np.ndarray:
    """Elementwise max of ``W`` and its transpose, clipped at 0, zero diagonal.

    Unmeasured pairs (NaN) stay NaN.
    """
    W = np.asarray(W, dtype=float)
    S = np.maximum(W, W.T)
    S = np.where(np.isnan(W) | np.isnan(W.T), np.nan, S)
    S = np.where(np.isnan(S), np.nan, np.maximum(S, 0.0))
    np.fill_diagonal(S, 0.0)
    return S


def gradient_cosine_matrix(theta0: ModelParams, partition: ClientPartition) -> np.ndarray:
    """``1 - cos`` between full-batch training-loss gradients at ``theta0``."""
    grads = []
    for client in partition.clients:
        _, g = autonet.loss_and_grad(theta0, client.train.X, client.train.y)
        grads.append(g.flat())
    G = np.stack(grads)
    norms = np.linalg.norm(G, axis=1)
    norms[norms == 0] = 1.0
    U = G / norms[:, None]
    D = np.clip(1.0 - U @ U.T, 0.0, 2.0)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def principal_angle_matrix(partition: ClientPartition, n_components: int | None = None) -> np.ndarray:
    """Sum of principal angles (degrees) between clients' leading input subspaces.

    Each client's basis is the top ``n_components`` left singular vectors of
    its (uncentred) training inputs, transposed to features x samples. The
    default keeps ``d - 1`` directions so a full-rank basis never hides
    every difference.
    """
    d = partition.n_features
    p = max(1, d - 1) if n_components is None else n_components
    if not 1 <= p <= d:
        raise ValidationError(f"n_components must lie in [1, {d}]")
    bases = []
    for client in partition.clients:
        U, _, _ = np.linalg.svd(client.train.X.T, full_matrices=False)
        bases.append(U[:, :p])
    C = len(bases)
    D = np.zeros((C, C))
    for i in range(C):
        for j in range(i + 1, C):
            D[i, j] = D[j, i] = float(np.degrees(subspace_angles(bases[i], bases[j])).sum())
    return D


DIAGNOSTIC_NAMES = ("emd", "param_l2", "grad_cosine", "principal_angle")


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    emd: np.ndarray
    param_l2: np.ndarray
    grad_cosine: np.ndarray
    principal_angle: np.ndarray

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in DIAGNOSTIC_NAMES}

    def to_dict(self) -> dict:
        return {name: matrix_to_list(M) for name, M in self.matrices().items()}


def distance_diagnostics(
    partition: ClientPartition,
    W,
    client_params: list[ModelParams],
    initial_params: ModelParams,
) -> DiagnosticsReport:
    """The four C x C client-distance matrices of a finished run."""
    C = partition.n_clients
    if np.asarray(W).shape != (C, C) or len(client_params) != C:
        raise DimensionMismatchError("run artifacts do not match the partition size")
    return DiagnosticsReport(
        emd=symmetrized_emd(W),
        param_l2=param_distance_matrix(client_params),
        grad_cosine=gradient_cosine_matrix(initial_params, partition),
        principal_angle=principal_angle_matrix(partition),
    )


# ---------------------------------------------------------------- serialisation


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def matrix_to_list(M) -> list[list]:
    """Nested lists with NaN as None; bool matrices stay bool."""
    M = np.asarray(M)
    if M.dtype == bool:
        return M.tolist()
    return [[_jsonable(float(v)) for v in row] for row in M]


def write_json(obj, path: str | Path) -> None:
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def write_matrix_csv(M, path: str | Path) -> None:
    """Header ``client_id,c0..c{C-1}``; one row per client; NaN as an empty cell."""
    M = np.asarray(M, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id"] + [f"c{j}" for j in range(M.shape[1])])
        for i, row in enumerate(M):
            w.writerow([i] + ["" if math.isnan(v) else repr(float(v)) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in row[1:]] for row in rows])
