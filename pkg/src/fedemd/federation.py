"""One-shot EMD clustering of federated clients and the training loop around it.

Each round, participating clients train locally; every not-yet-measured pair
of participants then exchanges embedding models, embeds its own data under a
pair-private random projection, and the server compares the two embedding
distributions with the 1-Wasserstein distance, calibrated by each client's
train-vs-validation reference distance. A pair is adjacent only if both
calibrated directed distances fall below ``epsilon``. Clients whose
adjacency rows are identical form a cluster, and models are averaged inside
each cluster weighted by training-set size.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from . import autonet
from ._validation import DimensionMismatchError, ValidationError
from .autonet import ModelParams, TrainConfig
from .projection import ProjectionSpec, make_projection, pair_seed, project
from .synthdata import ClientData, ClientPartition
from .transport import DiscreteDistribution, emd_exact, sinkhorn, subsample, cost_matrix

logger = logging.getLogger(__name__)

# stream tags keep the random streams for each purpose independent
_INIT, _TRAIN, _SAMPLE, _SUBSAMPLE, _COVER = 1, 2, 3, 4, 5

BASELINES = ("oracle", "fedavg", "param_distance")


@dataclass(frozen=True)
class FederationConfig:
    epsilon: float = 0.025
    global_epochs: int = 10
    train: TrainConfig = field(default_factory=lambda: TrainConfig(local_epochs=10))
    participation: int | None = None
    participation_policy: str = "covering"
    backend: str = "exact"
    reg: float = 0.1
    sinkhorn_max_iter: int = 1000
    sinkhorn_tol: float = 1e-9
    projection_ratio: float = 0.9
    subsample_fraction: float = 0.1
    subsample_cap: int = 512
    subsample_floor: int | None = 256
    rescale_epsilon: bool = False
    pair_rule: str = "mirrored"
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if self.global_epochs < 1:
            raise ValidationError("global_epochs must be >= 1")
        if self.backend not in ("exact", "sinkhorn"):
            raise ValidationError(f"unknown transport backend {self.backend!r}")
        if self.participation_policy not in ("covering", "uniform"):
            raise ValidationError(f"unknown participation policy {self.participation_policy!r}")
        if self.pair_rule not in ("mirrored", "literal"):
            raise ValidationError(f"unknown pair rule {self.pair_rule!r}")
        if not 0 < self.projection_ratio <= 1:
            raise ValidationError("projection_ratio must lie in (0, 1]")
        if self.reg <= 0 or self.sinkhorn_max_iter < 1 or self.sinkhorn_tol <= 0:
            raise ValidationError("sinkhorn needs reg > 0, max_iter >= 1 and tol > 0")
        if not 0 < self.subsample_fraction <= 1 or self.subsample_cap < 1:
            raise ValidationError("subsample_fraction must lie in (0, 1] and subsample_cap be >= 1")
        if self.subsample_floor is not None and self.subsample_floor < 2:
            raise ValidationError("subsample_floor must be >= 2")
        if self.participation is not None and self.participation < 2:
            raise ValidationError("participation must be >= 2 clients per round")
        if self.n_jobs < 1:
            raise ValidationError("n_jobs must be >= 1")

    def out_dim(self) -> int:
        return ProjectionSpec.from_ratio(0, self.embed_dim, self.projection_ratio).out_dim

    def effective_epsilon(self) -> float:
        """``epsilon``, optionally shrunk by the expected projection contraction."""
        if not self.rescale_epsilon:
            return self.epsilon
        return self.epsilon * math.sqrt(self.out_dim() / self.embed_dim)


@dataclass
class ServerState:
    """Directed calibrated distances ``W`` and the symmetric adjacency ``M``.

    ``measured[i, j]`` is the explicit marker for ``W[i, j]``; unmeasured
    entries of ``W`` hold NaN.
    """

    W: np.ndarray
    measured: np.ndarray
    M: np.ndarray
    cluster_models: dict[int, ModelParams] = field(default_factory=dict)
    round: int = 0
    measurements: list[tuple[int, int, int]] = field(default_factory=list)

    @classmethod
    def empty(cls, C: int) -> "ServerState":
        return cls(
            W=np.full((C, C), np.nan),
            measured=np.zeros((C, C), dtype=bool),
            M=np.eye(C, dtype=bool),
        )

    def is_measured(self, c: int, c2: int) -> bool:
        return bool(self.measured[c, c2] and self.measured[c2, c])

    def record(self, c: int, c2: int, w_fwd: float, w_bwd: float, eps: float) -> None:
        if self.is_measured(c, c2):
            logger.info("pair (%d, %d) already measured; ignoring", c, c2)
            return
        self.W[c, c2] = w_fwd
        self.W[c2, c] = w_bwd
        self.measured[c, c2] = self.measured[c2, c] = True
        self.M[c, c2] = self.M[c2, c] = bool(w_fwd < eps and w_bwd < eps)
        self.measurements.append((self.round, min(c, c2), max(c, c2)))

    def all_measured(self) -> bool:
        off = ~np.eye(len(self.M), dtype=bool)
        return bool(self.measured[off].all())


@dataclass
class ClientRecord:
    """A client's data, current model and cached reference distances.

    ``tau`` maps a pair-projection seed to the reference distance computed
    under that projection.
    """

    id: int
    data: ClientData
    params: ModelParams
    tau: dict[int, float] = field(default_factory=dict)


@dataclass
class RoundLog:
    epoch: int
    participants: list[int]
    labels: np.ndarray
    n_clusters: int
    new_pairs: int
    test_accuracy: np.ndarray
    adjacency: np.ndarray


@dataclass
class RunArtifacts:
    method: str
    labels: np.ndarray
    ground_truth: np.ndarray
    state: ServerState
    rounds: list[RoundLog]
    client_params: list[ModelParams]
    initial_params: ModelParams
    interrupted: bool = False
    error: str | None = None
    # each client's model after its last local update, before aggregation
    local_params: list[ModelParams] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def final_accuracy(self) -> np.ndarray:
        return self.rounds[-1].test_accuracy


def _seed(cfg_seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg_seed, *keys])


# ---------------------------------------------------------------- participation


def sample_participants(
    C: int, k: int | None, round: int, seed: int = 0, policy: str = "uniform"
) -> list[int]:
    """Sorted ids of the clients taking part in ``round`` (1-based).

    Both policies draw, for any fixed round, a uniformly random ``k``-subset,
    and both are pure functions of ``(seed, round)``:

    * ``uniform`` draws each round independently;
    * ``covering`` walks through passes of a pair-covering schedule under a
      fresh random relabelling per pass: clients are split into groups of
      ``k // 2`` and every round unites two groups (padded with random
      extra clients), so each pass places every pair together at least once.
    """
    if k is None or k == C:
        return list(range(C))
    if not 1 <= k <= C:
        raise ValidationError(f"participation {k} outside [1, {C}]")
    if policy == "uniform":
        rng = np.random.default_rng(_seed(seed, _SAMPLE, round))
        return sorted(int(i) for i in rng.choice(C, size=k, replace=False))
    if policy != "covering":
        raise ValidationError(f"unknown participation policy {policy!r}")

    g = max(1, k // 2)
    n_groups = math.ceil(C / g)
    if n_groups == 1 or k == 1:
        blocks = [(a,) for a in range(n_groups)]
    else:
        blocks = list(itertools.combinations(range(n_groups), 2))
    pass_idx, pos = divmod(round - 1, len(blocks))
    pass_rng = np.random.default_rng(_seed(seed, _COVER, pass_idx))
    relabel = pass_rng.permutation(C)
    order = pass_rng.permutation(len(blocks))
    groups = [relabel[i * g : (i + 1) * g] for i in range(n_groups)]
    members = set(int(c) for a in blocks[order[pos]] for c in groups[a])
    rest = np.array(sorted(set(range(C)) - members))
    if len(members) < k:
        round_rng = np.random.default_rng(_seed(seed, _COVER, pass_idx, round))
        extra = round_rng.choice(rest, size=k - len(members), replace=False)
        members.update(int(c) for c in extra)
    return sorted(members)


# ---------------------------------------------------------------- measurement


def _subsampled(X: np.ndarray, cfg: FederationConfig, *keys: int) -> np.ndarray:
    n = X.shape[0]
    floor = min(n, cfg.subsample_floor) if cfg.subsample_floor is not None else None
    dist = subsample(
        DiscreteDistribution.uniform(X),
        fraction=cfg.subsample_fraction,
        cap=cfg.subsample_cap,
        floor=floor,
        seed=_seed(cfg.seed, _SUBSAMPLE, *keys),
    )
    return dist.points


def _w1(A: np.ndarray, B: np.ndarray, cfg: FederationConfig) -> float:
    a = DiscreteDistribution.uniform(A)
    b = DiscreteDistribution.uniform(B)
    C = cost_matrix(a, b)
    if cfg.backend == "sinkhorn":
        return sinkhorn(a, b, C, reg=cfg.reg, max_iter=cfg.sinkhorn_max_iter, tol=cfg.sinkhorn_tol).value
    return emd_exact(a, b, C).value


@dataclass(frozen=True, eq=False)
class _Views:
    """Per-round subsampled train and validation inputs of one client."""

    train: np.ndarray
    val: np.ndarray


def _views(client: ClientRecord, cfg: FederationConfig, round: int) -> _Views:
    data = client.data
    if len(data.val) < 2:
        raise ValidationError(f"client {client.id}: validation split needs >= 2 samples")
    return _Views(
        _subsampled(data.train.X, cfg, round, client.id, 0),
        _subsampled(data.val.X, cfg, round, client.id, 1),
    )


def reference_distance(
    client: ClientRecord,
    R: np.ndarray,
    cfg: FederationConfig,
    views: _Views,
    key: int,
) -> float:
    """W_1 between the client's projected train and validation embeddings.

    Cached in ``client.tau`` under ``key`` (the pair-projection seed).
    """
    if key in client.tau:
        return client.tau[key]
    Z_train = project(autonet.forward_embed(client.params, views.train), R)
    Z_val = project(autonet.forward_embed(client.params, views.val), R)
    tau = _w1(Z_train, Z_val, cfg)
    client.tau[key] = tau
    return tau


def pair_distances(
    c: ClientRecord,
    c2: ClientRecord,
    cfg: FederationConfig,
    views: dict[int, _Views],
) -> tuple[float, float]:
    """Calibrated directed distances ``(W[c][c2], W[c2][c])`` for one pair."""
    key = pair_seed(cfg.seed, c.id, c2.id)
    R = make_projection(ProjectionSpec(key, c.params.embed_dim, cfg.out_dim()))
    Xc, Xc2 = views[c.id].train, views[c2.id].train

    def emb(owner: ClientRecord, X):
        return project(autonet.forward_embed(owner.params, X), R)

    Z_cc, Z_c2c, Z_cc2, Z_c2c2 = emb(c, Xc), emb(c, Xc2), emb(c2, Xc), emb(c2, Xc2)
    tau_c = reference_distance(c, R, cfg, views[c.id], key)
    tau_c2 = reference_distance(c2, R, cfg, views[c2.id], key)
    w_fwd = _w1(Z_cc, Z_c2c, cfg) - tau_c
    if cfg.pair_rule == "literal":
        w_bwd = _w1(Z_c2c, Z_c2c2, cfg) - tau_c2
    else:
        w_bwd = _w1(Z_cc2, Z_c2c2, cfg) - tau_c2
    return w_fwd, w_bwd


def measure_pair(
    c: ClientRecord,
    c2: ClientRecord,
    state: ServerState,
    cfg: FederationConfig,
    views: dict[int, _Views] | None = None,
) -> ServerState:
    """Measure one unordered pair and update ``W`` and ``M`` in place.

    Re-measuring a pair is a logged no-op.
    """
    if state.is_measured(c.id, c2.id):
        logger.info("pair (%d, %d) already measured; ignoring", c.id, c2.id)
        return state
    if views is None:
        views = {r.id: _views(r, cfg, state.round) for r in (c, c2)}
    w_fwd, w_bwd = pair_distances(c, c2, cfg, views)
    state.record(c.id, c2.id, w_fwd, w_bwd, cfg.effective_epsilon())
    return state


# ---------------------------------------------------------------- clustering


def neighbourhoods(M) -> np.ndarray:
    """Cluster labels grouping clients with identical adjacency rows.

    Labels are numbered by first appearance, so client 0 is always in
    cluster 0.
    """
    M = np.asarray(M, dtype=bool)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatchError("adjacency must be square")
    ids: dict[bytes, int] = {}
    labels = np.empty(M.shape[0], dtype=np.int64)
    for c, row in enumerate(M):
        labels[c] = ids.setdefault(row.tobytes(), len(ids))
    return labels


def aggregate(models: list[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-size weighted average ``sum_c (N_c / N_k) theta_c``."""
    if not models:
        raise ValidationError("nothing to aggregate")
    ref = models[0][0]
    if len(models) == 1:
        return ref
    shapes = [t.shape for t in ref.named_tensors().values()]
    total = float(sum(n for _, n in models))
    acc = None
    for params, n in models:
        if [t.shape for t in params.named_tensors().values()] != shapes:
            raise DimensionMismatchError("cannot aggregate models of different shapes")
        term = (n / total) * params.flat()
        acc = term if acc is None else acc + term
    return ref.unflatten(acc)


# ---------------------------------------------------------------- training loop


def _init_clients(partition: ClientPartition, cfg: FederationConfig):
    theta0 = autonet.init_params(
        partition.n_features,
        partition.num_classes,
        tuple(cfg.hidden),
        cfg.embed_dim,
        _seed(cfg.seed, _INIT),
    )
    clients = [ClientRecord(d.client_id, d, theta0) for d in partition.clients]
    return theta0, clients


def _map(fn, items, n_jobs: int):
    if n_jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _local_updates(clients, participants, cfg: FederationConfig, t: int) -> None:
    def train(c):
        rec = clients[c]
        return autonet.client_update(
            rec.params, rec.data.train.X, rec.data.train.y, cfg.train, _seed(cfg.seed, _TRAIN, t, c)
        )

    for c, params in zip(participants, _map(train, participants, cfg.n_jobs)):
        clients[c].params = params
        clients[c].tau.clear()


def _aggregate_clusters(clients, participants, labels, state: ServerState) -> None:
    active = set(participants)
    state.cluster_models = {}
    for k in range(int(labels.max()) + 1):
        members = [c for c in range(len(clients)) if labels[c] == k]
        contributing = [c for c in members if c in active]
        if not contributing:
            continue
        model = aggregate([(clients[c].params, clients[c].data.n_samples) for c in contributing])
        state.cluster_models[k] = model
        for c in members:
            clients[c].params = model


def _test_accuracy(clients) -> np.ndarray:
    return np.array(
        [autonet.evaluate(r.params, r.data.test.X, r.data.test.y) for r in clients]
    )


def _loop(partition, cfg, method, cluster_step) -> RunArtifacts:
    C = partition.n_clients
    theta0, clients = _init_clients(partition, cfg)
    state = ServerState.empty(C)
    rounds: list[RoundLog] = []
    labels = np.zeros(C, dtype=np.int64)
    local = [r.params for r in clients]
    try:
        for t in range(1, cfg.global_epochs + 1):
            state.round = t
            participants = sample_participants(
                C, cfg.participation, t, cfg.seed, cfg.participation_policy
            )
            _local_updates(clients, participants, cfg, t)
            for c in participants:
                local[c] = clients[c].params
            before = len(state.measurements)
            labels = cluster_step(clients, participants, state, t)
            _aggregate_clusters(clients, participants, labels, state)
            rounds.append(
                RoundLog(
                    epoch=t,
                    participants=participants,
                    labels=labels.copy(),
                    n_clusters=int(labels.max()) + 1,
                    new_pairs=len(state.measurements) - before,
                    test_accuracy=_test_accuracy(clients),
                    adjacency=state.M.copy(),
                )
            )
    except Exception as exc:  # noqa: BLE001 - partial artifacts are part of the contract
        logger.exception("round %d failed", state.round)
        return RunArtifacts(
            method, labels, partition.ground_truth, state, rounds,
            [r.params for r in clients], theta0, interrupted=True, error=repr(exc),
            local_params=local,
        )
    return RunArtifacts(
        method, labels, partition.ground_truth, state, rounds, [r.params for r in clients], theta0,
        local_params=local,
    )


def run_experiment(
    partition: ClientPartition,
    cfg: FederationConfig,
    initial_adjacency: np.ndarray | None = None,
) -> RunArtifacts:
    """Full clustered-federation run with one-shot EMD pair measurement.

    ``initial_adjacency`` pre-fills ``M`` and marks every pair as measured,
    which skips measurement entirely.
    """
    C = partition.n_clients

    def step(clients, participants, state: ServerState, t):
        if t == 1 and initial_adjacency is not None:
            M0 = np.asarray(initial_adjacency, dtype=bool)
            if M0.shape != (C, C):
                raise DimensionMismatchError("initial adjacency must be C x C")
            state.M[:] = M0 | np.eye(C, dtype=bool)
            state.measured[:] = ~np.eye(C, dtype=bool)
        pending = [
            (c, c2)
            for c, c2 in itertools.combinations(participants, 2)
            if not state.is_measured(c, c2)
        ]
        if pending:
            involved = sorted({c for pair in pending for c in pair})
            views = dict(zip(involved, _map(lambda c: _views(clients[c], cfg, t), involved, cfg.n_jobs)))
            results = _map(
                lambda p: pair_distances(clients[p[0]], clients[p[1]], cfg, views), pending, cfg.n_jobs
            )
            eps = cfg.effective_epsilon()
            for (c, c2), (w_fwd, w_bwd) in zip(pending, results):
                state.record(c, c2, w_fwd, w_bwd, eps)
        return neighbourhoods(state.M)

    return _loop(partition, cfg, "emd", step)


def run_baseline(
    kind: str,
    partition: ClientPartition,
    cfg: FederationConfig,
    threshold: float | None = None,
) -> RunArtifacts:
    """Reference runs sharing the training loop of :func:`run_experiment`.

    ``oracle`` fixes clusters to the ground truth, ``fedavg`` keeps one global
    cluster, and ``param_distance`` links participants whose post-update
    parameter vectors lie within ``threshold`` (L2), re-evaluated each round.
    """
    C = partition.n_clients
    if kind == "oracle":
        truth = np.asarray(partition.ground_truth)

        def step(clients, participants, state, t):
            state.M[:] = truth[:, None] == truth[None, :]
            return neighbourhoods(state.M)

    elif kind == "fedavg":

        def step(clients, participants, state, t):
            state.M[:] = True
            return np.zeros(C, dtype=np.int64)

    elif kind == "param_distance":
        if threshold is None or threshold <= 0:
            raise ValidationError("param_distance needs a positive threshold")

        def step(clients, participants, state, t):
            flat = {c: clients[c].params.flat() for c in participants}
            for c, c2 in itertools.combinations(participants, 2):
                d = float(np.linalg.norm(flat[c] - flat[c2]))
                state.W[c, c2] = state.W[c2, c] = d
                state.measured[c, c2] = state.measured[c2, c] = True
                state.M[c, c2] = state.M[c2, c] = d < threshold
            return neighbourhoods(state.M)

    else:
        raise ValidationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    return _loop(partition, cfg, kind, step)


class EMDClusteredFL(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_experiment`.

    ``fit`` takes a :class:`~fedemd.synthdata.ClientPartition` in place of a
    feature matrix; ``labels_`` holds the final cluster of every client.
    """

    def __init__(
        self,
        epsilon: float = 0.025,
        global_epochs: int = 10,
        local_epochs: int = 10,
        participation: int | None = None,
        backend: str = "exact",
        projection_ratio: float = 0.9,
        seed: int = 0,
    ):
        self.epsilon = epsilon
        self.global_epochs = global_epochs
        self.local_epochs = local_epochs
        self.participation = participation
        self.backend = backend
        self.projection_ratio = projection_ratio
        self.seed = seed

    def _config(self) -> FederationConfig:
        return FederationConfig(
            epsilon=self.epsilon,
            global_epochs=self.global_epochs,
            train=TrainConfig(local_epochs=self.local_epochs),
            participation=self.participation,
            backend=self.backend,
            projection_ratio=self.projection_ratio,
            seed=self.seed,
        )

    def fit(self, partition: ClientPartition, y=None):
        if not isinstance(partition, ClientPartition):
            raise ValidationError("fit expects a ClientPartition")
        art = run_experiment(partition, self._config())
        if art.interrupted:
            raise RuntimeError(f"run interrupted: {art.error}")
        self.artifacts_ = art
        self.labels_ = art.labels
        self.W_ = art.state.W
        self.M_ = art.state.M
        self.client_params_ = art.client_params
        return self
