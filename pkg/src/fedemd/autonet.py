"""Small dense networks split into an embedding map and a softmax head.

The embedding map is a stack of dense layers (tanh on every layer but the
last, which is linear); the head is one dense layer followed by softmax.
Gradients are written out by hand, and training follows the semantics of
momentum SGD with coupled weight decay as found in common DL frameworks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DimensionMismatchError, ValidationError, as_labels, as_matrix

Layer = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameters of ``head ∘ embed``: ``omega`` layers then the ``phi`` head."""

    omega: tuple[Layer, ...]
    phi: Layer

    def __post_init__(self):
        if not self.omega:
            raise ValidationError("embedding map needs at least one layer")
        prev = None
        for W, b in (*self.omega, self.phi):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionMismatchError(f"bad layer shapes {W.shape}, {b.shape}")
            if prev is not None and W.shape[0] != prev:
                raise DimensionMismatchError(
                    f"layer expects {W.shape[0]} inputs but previous layer emits {prev}"
                )
            prev = W.shape[1]

    @property
    def in_dim(self) -> int:
        return self.omega[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.omega[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.phi[0].shape[1]

    def layers(self) -> list[Layer]:
        return [*self.omega, self.phi]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.omega):
            out[f"omega.{i}.weight"] = W
            out[f"omega.{i}.bias"] = b
        out["phi.weight"], out["phi.bias"] = self.phi
        return out

    def to_dict(self) -> dict[str, list]:
        return {k: v.tolist() for k, v in self.named_tensors().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        n = len([k for k in d if k.startswith("omega.") and k.endswith(".weight")])
        omega = tuple(
            (np.asarray(d[f"omega.{i}.weight"], float), np.asarray(d[f"omega.{i}.bias"], float))
            for i in range(n)
        )
        return cls(omega, (np.asarray(d["phi.weight"], float), np.asarray(d["phi.bias"], float)))

    def flat(self, part: str = "all") -> np.ndarray:
        """Concatenated parameter vector; ``part`` is ``all``, ``omega`` or ``phi``."""
        if part == "phi":
            layers = [self.phi]
        elif part == "omega":
            layers = list(self.omega)
        elif part == "all":
            layers = self.layers()
        else:
            raise ValidationError(f"unknown parameter part {part!r}")
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        """Parameters shaped like ``self`` filled from a full flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(W.size + b.size for W, b in self.layers())
        if vec.shape != (expected,):
            raise DimensionMismatchError(f"vector has shape {vec.shape}, expected ({expected},)")
        pos = 0
        layers = []
        for W, b in self.layers():
            w = vec[pos : pos + W.size].reshape(W.shape)
            pos += W.size
            layers.append((w, vec[pos : pos + b.size].copy()))
            pos += b.size
        return ModelParams(tuple(layers[:-1]), layers[-1])

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        """Apply ``fn`` tensor-wise across ``self`` and ``others``."""
        for o in others:
            if [t.shape for t in _tensors(o)] != [t.shape for t in _tensors(self)]:
                raise DimensionMismatchError("parameter shapes differ")
        layers = []
        for idx, (W, b) in enumerate(self.layers()):
            Ws = [o.layers()[idx][0] for o in others]
            bs = [o.layers()[idx][1] for o in others]
            layers.append((fn(W, *Ws), fn(b, *bs)))
        return ModelParams(tuple(layers[:-1]), layers[-1])


def _tensors(p: ModelParams):
    for W, b in p.layers():
        yield W
        yield b


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-6
    local_epochs: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if self.local_epochs < 0:
            raise ValidationError("local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def init_params(
    in_dim: int,
    num_classes: int,
    hidden: tuple[int, ...] = (32,),
    embed_dim: int = 16,
    seed: int | np.random.SeedSequence = 0,
) -> ModelParams:
    """Gaussian weights with variance ``1/fan_in`` and zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, embed_dim, num_classes]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((W, np.zeros(fan_out)))
    return ModelParams(tuple(layers[:-1]), layers[-1])


def _embed_trace(params: ModelParams, X: np.ndarray) -> list[np.ndarray]:
    acts = [X]
    h = X
    last = len(params.omega) - 1
    for i, (W, b) in enumerate(params.omega):
        h = h @ W + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward_embed(params: ModelParams, X) -> np.ndarray:
    X = as_matrix(X)
    if X.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"model expects {params.in_dim} input features, got {X.shape[1]}"
        )
    return _embed_trace(params, X)[-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_head(params: ModelParams, Z) -> np.ndarray:
    Z = as_matrix(Z, "Z")
    if Z.shape[1] != params.embed_dim:
        raise DimensionMismatchError(
            f"head expects {params.embed_dim}-dimensional embeddings, got {Z.shape[1]}"
        )
    W, b = params.phi
    return _softmax(Z @ W + b)


def predict_proba(params: ModelParams, X) -> np.ndarray:
    return forward_head(params, forward_embed(params, X))


def _layer_views(vec: np.ndarray, shapes) -> list[Layer]:
    """(W, b) views into a flat vector laid out as :meth:`ModelParams.flat`."""
    out, pos = [], 0
    for r, c in shapes:
        W = vec[pos : pos + r * c].reshape(r, c)
        pos += r * c
        out.append((W, vec[pos : pos + c]))
        pos += c
    return out


def _backprop(layers: list[Layer], X: np.ndarray, y: np.ndarray, gviews: list[Layer]) -> float:
    """Mean cross-entropy of ``layers`` on a batch; gradients written into ``gviews``."""
    B = X.shape[0]
    acts = [X]
    h = X
    n_embed = len(layers) - 1
    for i in range(n_embed):
        W, b = layers[i]
        h = h @ W + b
        if i < n_embed - 1:
            h = np.tanh(h)
        acts.append(h)
    Wp, bp = layers[-1]
    probs = _softmax(h @ Wp + bp)
    rows = np.arange(B)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], 1e-300))))

    d = probs
    d[rows, y] -= 1.0
    d /= B
    for i in range(n_embed, -1, -1):
        gW, gb = gviews[i]
        if i < n_embed - 1:
            d = d * (1.0 - acts[i + 1] ** 2)
        np.matmul(acts[i].T, d, out=gW)
        np.sum(d, axis=0, out=gb)
        if i:
            d = d @ layers[i][0].T
    return loss


def _shapes(params: ModelParams) -> list[tuple[int, int]]:
    return [W.shape for W, _ in params.layers()]


def loss_and_grad(
    params: ModelParams, X, y, weight_decay: float = 0.0
) -> tuple[float, ModelParams]:
    """Mean cross-entropy (+ ``weight_decay/2 * ||theta||^2``) and its gradient."""
    X = as_matrix(X)
    if X.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"model expects {params.in_dim} input features, got {X.shape[1]}"
        )
    y = as_labels(y, X.shape[0], params.num_classes)
    shapes = _shapes(params)
    g = np.empty(sum(r * c + c for r, c in shapes))
    loss = _backprop(params.layers(), X, y, _layer_views(g, shapes))
    if weight_decay:
        theta = params.flat()
        loss += 0.5 * weight_decay * float(theta @ theta)
        g += weight_decay * theta
    return loss, params.unflatten(g)


def sgd_step(
    params: ModelParams,
    grad: ModelParams,
    velocity: ModelParams | None,
    cfg: TrainConfig,
) -> tuple[ModelParams, ModelParams]:
    """One momentum-SGD step; weight decay is added to ``grad`` here.

    ``velocity`` is None on the first step, in which case the buffer starts
    at the decayed gradient itself.
    """
    theta = params.flat()
    d_p = grad.flat() + cfg.weight_decay * theta
    if cfg.momentum and velocity is not None:
        buf = cfg.momentum * velocity.flat() + d_p
    else:
        buf = d_p
    return params.unflatten(theta - cfg.lr * buf), params.unflatten(buf)


def client_update(
    params: ModelParams,
    X,
    y,
    cfg: TrainConfig,
    seed: int | np.random.SeedSequence = 0,
) -> ModelParams:
    """``cfg.local_epochs`` epochs of shuffled minibatch SGD from ``params``.

    The momentum buffer starts empty on every call. The arithmetic matches
    repeated :func:`loss_and_grad` / :func:`sgd_step` calls but runs on one
    flat parameter vector updated in place.
    """
    X = as_matrix(X)
    if X.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"model expects {params.in_dim} input features, got {X.shape[1]}"
        )
    y = as_labels(y, X.shape[0], params.num_classes)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    shapes = _shapes(params)
    theta = params.flat()
    g = np.empty_like(theta)
    buf = np.zeros_like(theta)
    layers, gviews = _layer_views(theta, shapes), _layer_views(g, shapes)
    first = True
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _backprop(layers, X[idx], y[idx], gviews)
            if cfg.weight_decay:
                g += cfg.weight_decay * theta
            if first or not cfg.momentum:
                buf[:] = g
                first = False
            else:
                buf *= cfg.momentum
                buf += g
            theta -= cfg.lr * buf
    return params.unflatten(theta)


def evaluate(params: ModelParams, X, y) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    X = as_matrix(X)
    y = as_labels(y, X.shape[0])
    return float(np.mean(np.argmax(predict_proba(params, X), axis=1) == y))


class EmbeddingMLPClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around :func:`client_update` for a single dataset.

    ``transform`` returns the learned embeddings, so the estimator can sit in
    a pipeline in front of anything that consumes feature vectors.
    """

    def __init__(
        self,
        hidden: tuple[int, ...] = (32,),
        embed_dim: int = 16,
        lr: float = 0.05,
        momentum: float = 0.9,
        weight_decay: float = 1e-6,
        epochs: int = 20,
        batch_size: int = 32,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = as_matrix(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        ss = np.random.SeedSequence(self.random_state)
        init_seed, train_seed = ss.spawn(2)
        params = init_params(
            X.shape[1], len(self.classes_), tuple(self.hidden), self.embed_dim, init_seed
        )
        cfg = TrainConfig(self.lr, self.momentum, self.weight_decay, self.epochs, self.batch_size)
        self.params_ = client_update(params, X, y_idx, cfg, train_seed)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_proba(self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        return forward_embed(self.params_, X)
