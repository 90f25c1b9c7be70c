"""Seeded Gaussian random projections shared between pairs of clients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DimensionMismatchError, ValidationError, as_matrix


@dataclass(frozen=True)
class ProjectionSpec:
    seed: int
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1:
            raise ValidationError("in_dim must be >= 1")
        if not 1 <= self.out_dim <= self.in_dim:
            raise ValidationError(
                f"out_dim must lie in [1, in_dim={self.in_dim}], got {self.out_dim}"
            )

    @classmethod
    def from_ratio(cls, seed: int, in_dim: int, ratio: float) -> "ProjectionSpec":
        """Spec keeping ``round(ratio * in_dim)`` output columns (at least one)."""
        if not 0 < ratio <= 1:
            raise ValidationError("projection ratio must lie in (0, 1]")
        return cls(seed, in_dim, max(1, int(round(ratio * in_dim))))


def pair_seed(experiment_seed: int, c: int, c2: int) -> int:
    """Seed both members of a client pair derive independently of the server.

    Order-independent in ``(c, c2)``; built from a SeedSequence so nearby
    experiment seeds do not yield correlated projections.
    """
    lo, hi = min(c, c2), max(c, c2)
    ss = np.random.SeedSequence([experiment_seed, lo, hi, 0x4A4C])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_projection(spec: ProjectionSpec) -> np.ndarray:
    """Gaussian projection matrix (in_dim x out_dim) with entry variance 1/out_dim.

    Entries come from numpy's PCG64 bit generator seeded with ``spec.seed``
    and drawn with ``standard_normal`` in C order, a stream that numpy keeps
    stable across platforms.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    z = rng.standard_normal((spec.in_dim, spec.out_dim))
    return z / math.sqrt(spec.out_dim)


def project(Z, R: np.ndarray) -> np.ndarray:
    Z = as_matrix(Z, "Z")
    if Z.shape[1] != R.shape[0]:
        raise DimensionMismatchError(
            f"embedding has {Z.shape[1]} columns, projection expects {R.shape[0]}"
        )
    return Z @ R


def jl_dimension(n_points: int, distortion: float) -> int:
    """Target dimension ``ceil(8 ln N / distortion^2)`` for the (1 +- distortion) guarantee."""
    return math.ceil(8.0 * math.log(n_points) / distortion**2)


class PairwiseProjection(TransformerMixin, BaseEstimator):
    """Random projection transformer with an explicit, shareable seed.

    Parameters
    ----------
    ratio : float
        Fraction of input dimensions kept (0.9 keeps 90% of columns).
    seed : int
        Seed of the projection; two parties holding the same seed and input
        width obtain the same matrix.
    out_dim : int or None
        Overrides ``ratio`` when given.
    """

    def __init__(self, ratio: float = 0.9, seed: int = 0, out_dim: int | None = None):
        self.ratio = ratio
        self.seed = seed
        self.out_dim = out_dim

    def fit(self, X, y=None):
        X = as_matrix(X)
        d = X.shape[1]
        if self.out_dim is None:
            spec = ProjectionSpec.from_ratio(self.seed, d, self.ratio)
        else:
            spec = ProjectionSpec(self.seed, d, self.out_dim)
        self.spec_ = spec
        self.components_ = make_projection(spec)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return project(X, self.components_)
