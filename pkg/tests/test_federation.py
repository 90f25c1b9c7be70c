import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scenarios
from fedemd import autonet, federation
from fedemd._validation import DimensionMismatchError, ValidationError
from fedemd.autonet import ModelParams, TrainConfig
from fedemd.federation import (
    ClientRecord,
    EMDClusteredFL,
    FederationConfig,
    ServerState,
    aggregate,
    measure_pair,
    neighbourhoods,
    pair_distances,
    reference_distance,
    run_baseline,
    run_experiment,
    sample_participants,
)
from fedemd.metrics import ari
from fedemd.projection import ProjectionSpec, make_projection
from fedemd.synthdata import make_rotated_clusters


def small_partition(seed=0, **kw):
    kw.setdefault("C", 8)
    kw.setdefault("n_per_client", 100)
    return make_rotated_clusters(seed=seed, **kw)


def small_config(**kw):
    base = dict(global_epochs=2, train=TrainConfig(local_epochs=3), subsample_floor=64)
    base.update(kw)
    return FederationConfig(**base)


def truth_blocks(truth):
    truth = np.asarray(truth)
    return truth[:, None] == truth[None, :]


def scalar_model(v):
    return ModelParams(((np.full((1, 1), v), np.zeros(1)),), (np.zeros((1, 1)), np.zeros(1)))


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValidationError):
        FederationConfig(epsilon=0)
    with pytest.raises(ValidationError):
        FederationConfig(global_epochs=0)
    with pytest.raises(ValidationError):
        FederationConfig(backend="greenkhorn")
    with pytest.raises(ValidationError):
        FederationConfig(pair_rule="other")
    with pytest.raises(ValidationError):
        FederationConfig(participation=1)


def test_epsilon_rescaling():
    assert FederationConfig(projection_ratio=0.5).effective_epsilon() == 0.025
    cfg = FederationConfig(projection_ratio=0.5, rescale_epsilon=True)
    assert cfg.effective_epsilon() == pytest.approx(0.025 * np.sqrt(8 / 16))


# ---------------------------------------------------------------- participation


def test_sample_participants_examples():
    assert sample_participants(5, 5, 1) == [0, 1, 2, 3, 4]
    assert sample_participants(5, None, 1) == [0, 1, 2, 3, 4]
    for policy in ("uniform", "covering"):
        s = sample_participants(40, 10, 3, seed=2, policy=policy)
        assert len(s) == 10 and len(set(s)) == 10 and all(0 <= c < 40 for c in s)
        assert s == sample_participants(40, 10, 3, seed=2, policy=policy)
    with pytest.raises(ValidationError):
        sample_participants(5, 6, 1)


@pytest.mark.parametrize("C,k", [(16, 8), (40, 10), (15, 7), (9, 2)])
def test_covering_pass_meets_every_pair(C, k):
    g = k // 2
    n_groups = -(-C // g)
    rounds = n_groups * (n_groups - 1) // 2
    met = np.eye(C, dtype=bool)
    for t in range(1, rounds + 1):
        s = sample_participants(C, k, t, seed=1, policy="covering")
        assert len(s) == k
        met[np.ix_(s, s)] = True
    assert met.all()


def test_covering_rounds_are_uniform_subsets():
    # each client's inclusion rate over many passes matches k / C
    C, k = 12, 4
    counts = np.zeros(C)
    T = 3000
    for t in range(1, T + 1):
        counts[sample_participants(C, k, t, seed=0, policy="covering")] += 1
    assert np.allclose(counts / T, k / C, atol=0.03)


# ---------------------------------------------------------------- server state


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.001, 0.5))
def test_unilateral_veto(w1, w2, eps):
    s = ServerState.empty(3)
    s.record(0, 2, w1, w2, eps)
    assert s.M[0, 2] == s.M[2, 0] == (w1 < eps and w2 < eps)
    assert np.array_equal(s.M, s.M.T) and s.M.diagonal().all()


def test_record_is_one_shot():
    s = ServerState.empty(3)
    s.record(0, 1, 0.0, 0.0, 0.1)
    s.record(1, 0, 5.0, 5.0, 0.1)
    assert s.W[0, 1] == 0.0 and s.M[0, 1]
    assert len(s.measurements) == 1
    assert np.isnan(s.W[0, 2]) and not s.measured[0, 2]


# ---------------------------------------------------------------- measurement


@pytest.fixture(scope="module")
def round_one():
    """Clients of scenario 1 right after their first local update."""
    part = scenarios.rotated(0)
    cfg = FederationConfig(seed=0)
    _, clients = federation._init_clients(part, cfg)
    federation._local_updates(clients, list(range(part.n_clients)), cfg, 1)
    views = {r.id: federation._views(r, cfg, 1) for r in clients}
    return part, cfg, clients, views


def test_tau_zero_when_val_equals_train(round_one):
    _, cfg, clients, views = round_one
    rec = ClientRecord(clients[0].id, clients[0].data, clients[0].params)
    v = views[0]
    same = federation._Views(v.train, v.train)
    R = make_projection(ProjectionSpec(1, rec.params.embed_dim, cfg.out_dim()))
    assert reference_distance(rec, R, cfg, same, key=1) == 0.0
    assert rec.tau[1] == 0.0


def test_identical_clients_adjacent(round_one):
    _, cfg, clients, _ = round_one
    data = clients[0].data
    a = ClientRecord(0, data, clients[0].params)
    b = ClientRecord(1, data, clients[0].params)
    state = measure_pair(a, b, ServerState.empty(2), cfg)
    eps = cfg.effective_epsilon()
    assert state.W[0, 1] < eps and state.W[1, 0] < eps
    assert state.M[0, 1]


def test_cross_cluster_pairs_separated(round_one):
    part, cfg, clients, views = round_one
    truth = part.ground_truth
    eps = cfg.effective_epsilon()
    raw_cross, cross_taus, taus = [], [], []
    for c, c2 in itertools.combinations(range(part.n_clients), 2):
        w_fwd, w_bwd = pair_distances(clients[c], clients[c2], cfg, views)
        key = federation.pair_seed(cfg.seed, c, c2)
        taus += [clients[c].tau[key], clients[c2].tau[key]]
        if truth[c] != truth[c2]:
            assert w_fwd > eps and w_bwd > eps
            raw_cross += [w_fwd + clients[c].tau[key], w_bwd + clients[c2].tau[key]]
            cross_taus += [clients[c].tau[key], clients[c2].tau[key]]
        else:
            assert w_fwd < eps and w_bwd < eps
    assert min(taus) > 0
    # each reference distance sits below the raw distance it calibrates
    assert np.all(np.array(cross_taus) < np.array(raw_cross))
    assert np.mean(taus) < np.mean(raw_cross)
    # 0 vs 180 degree clusters in particular
    assert truth[0] == 0 and truth[2] == 2


def test_measure_pair_idempotent(round_one):
    _, cfg, clients, _ = round_one
    state = ServerState.empty(len(clients))
    measure_pair(clients[0], clients[1], state, cfg)
    W = state.W.copy()
    measure_pair(clients[1], clients[0], state, cfg)
    assert np.array_equal(W, state.W, equal_nan=True) and len(state.measurements) == 1


def test_pair_rules(round_one):
    _, cfg, clients, views = round_one
    lit = dataclasses.replace(cfg, pair_rule="literal")
    m = pair_distances(clients[0], clients[1], cfg, views)
    l = pair_distances(clients[0], clients[1], lit, views)
    assert m[0] == l[0]
    assert np.isfinite(l[1])


def test_validation_split_too_small():
    part = small_partition(n_per_client=8)
    rec = ClientRecord(0, part.clients[0], autonet.init_params(2, 4))
    assert len(part.clients[0].val) < 2
    with pytest.raises(ValidationError):
        federation._views(rec, FederationConfig(), 1)


# ---------------------------------------------------------------- clustering


def test_neighbourhood_examples():
    assert neighbourhoods(np.eye(3, dtype=bool)).tolist() == [0, 1, 2]
    blocks = np.kron(np.eye(2), np.ones((2, 2))).astype(bool)
    assert neighbourhoods(blocks).tolist() == [0, 0, 1, 1]
    # rows {1,2}, {1,2,3}, {2,3} (1-based)
    M = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    assert neighbourhoods(M).tolist() == [0, 1, 2]
    with pytest.raises(DimensionMismatchError):
        neighbourhoods(np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.lists(st.integers(0, n - 1), min_size=n, max_size=n)))
def test_neighbourhoods_recover_block_partitions(groups):
    g = np.asarray(groups)
    labels = neighbourhoods(truth_blocks(g))
    assert ari(labels, g) == 1.0
    assert labels[0] == 0


def test_aggregate_examples():
    m = scalar_model(1.0)
    assert aggregate([(m, 4)]) is m
    mean = aggregate([(scalar_model(1.0), 2), (scalar_model(2.0), 2)])
    assert mean.omega[0][0][0, 0] == pytest.approx(1.5)
    w = aggregate([(scalar_model(1.0), 1), (scalar_model(3.0), 3)])
    assert w.omega[0][0][0, 0] == pytest.approx(2.5)
    with pytest.raises(DimensionMismatchError):
        aggregate([(m, 1), (autonet.init_params(2, 2), 1)])
    with pytest.raises(ValidationError):
        aggregate([])


# ---------------------------------------------------------------- runs


def test_oracle_equivalence():
    part = small_partition()
    cfg = small_config()
    a = run_experiment(part, cfg, initial_adjacency=truth_blocks(part.ground_truth))
    b = run_baseline("oracle", part, cfg)
    for ra, rb in zip(a.rounds, b.rounds):
        assert np.array_equal(ra.labels, rb.labels)
        assert np.array_equal(ra.test_accuracy, rb.test_accuracy)
    for pa, pb in zip(a.client_params, b.client_params):
        assert np.array_equal(pa.flat(), pb.flat())


def test_cluster_isolation():
    part = small_partition()
    cfg = small_config()
    M0 = truth_blocks(part.ground_truth)
    base = run_experiment(part, cfg, initial_adjacency=M0)
    # perturb a client outside cluster 0
    victim = 1
    assert part.ground_truth[victim] != 0
    c = part.clients[victim]
    noisy = dataclasses.replace(c.train, X=c.train.X + 0.5)
    clients = list(part.clients)
    clients[victim] = dataclasses.replace(c, train=noisy)
    other = dataclasses.replace(part, clients=clients)
    pert = run_experiment(other, cfg, initial_adjacency=M0)
    for k in range(part.n_clients):
        same = np.array_equal(base.client_params[k].flat(), pert.client_params[k].flat())
        assert same == (part.ground_truth[k] != part.ground_truth[victim])


def test_one_shot_under_partial_participation():
    part = small_partition()
    art = run_experiment(part, small_config(global_epochs=8, participation=4))
    pairs = [(a, b) for _, a, b in art.state.measurements]
    assert len(pairs) == len(set(pairs))
    assert art.state.all_measured() and len(pairs) == 28
    assert sum(r.new_pairs for r in art.rounds) == 28
    M = art.state.M
    assert np.array_equal(M, M.T) and M.diagonal().all()


def test_unmeasured_pairs_are_not_adjacent():
    part = small_partition()
    art = run_experiment(part, small_config(global_epochs=1, participation=2))
    assert art.state.M.sum() == part.n_clients + 2 * int(art.state.M[np.triu_indices(8, 1)].sum())
    assert np.isnan(art.state.W[~art.state.measured & ~np.eye(8, dtype=bool)]).all()
    assert art.n_clusters >= 7


def test_thread_pool_gives_identical_results():
    part = small_partition()
    a = run_experiment(part, small_config(n_jobs=1))
    b = run_experiment(part, small_config(n_jobs=4))
    assert np.array_equal(a.state.W, b.state.W, equal_nan=True)
    for pa, pb in zip(a.client_params, b.client_params):
        assert np.array_equal(pa.flat(), pb.flat())


def test_small_run_recovers_clusters():
    part = make_rotated_clusters(C=8, seed=3)
    art = run_experiment(part, FederationConfig(seed=3, global_epochs=2))
    assert ari(art.labels, part.ground_truth) == 1.0
    assert len(art.rounds) == 2 and art.rounds[0].epoch == 1


def test_local_params_are_pre_aggregation():
    part = make_rotated_clusters(C=8, seed=3)
    art = run_experiment(part, FederationConfig(seed=3, global_epochs=1))
    assert len(art.local_params) == 8
    # cluster members share the aggregate but not their local models
    assert np.array_equal(art.client_params[0].flat(), art.client_params[4].flat())
    assert not np.array_equal(art.local_params[0].flat(), art.local_params[4].flat())
    mean = aggregate([(art.local_params[c], part.clients[c].n_samples) for c in (0, 4)])
    assert np.allclose(mean.flat(), art.client_params[0].flat())


def test_baselines():
    part = small_partition()
    cfg = small_config(global_epochs=1)
    assert run_baseline("fedavg", part, cfg).n_clusters == 1
    assert ari(run_baseline("oracle", part, cfg).labels, part.ground_truth) == 1.0
    pd = run_baseline("param_distance", part, cfg, threshold=1e-9)
    assert pd.state.measured[~np.eye(8, dtype=bool)].all() and pd.n_clusters == 8
    with pytest.raises(ValidationError):
        run_baseline("param_distance", part, cfg)
    with pytest.raises(ValidationError):
        run_baseline("ifca", part, cfg)


def test_failure_keeps_partial_artifacts(monkeypatch):
    part = small_partition()
    real = autonet.client_update
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > part.n_clients:
            raise RuntimeError("boom")
        return real(*a, **k)

    monkeypatch.setattr(autonet, "client_update", flaky)
    art = run_experiment(part, small_config())
    assert art.interrupted and "boom" in art.error
    assert len(art.rounds) == 1


def test_estimator():
    part = make_rotated_clusters(C=8, seed=3)
    est = EMDClusteredFL(global_epochs=1, seed=3).fit(part)
    assert ari(est.labels_, part.ground_truth) == 1.0
    assert est.M_.shape == (8, 8)
