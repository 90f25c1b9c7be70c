"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Scenario 1 is the default rotated partition (C=16, K=4 angles 0/90/180/270,
200 train samples per client) run with the default federation settings
(epsilon 0.025, T=10, full participation, exact backend).
"""

import itertools

import numpy as np
import pytest
from scipy.spatial.distance import pdist

import scenarios
from oracles import brute_force_matching, central_differences, max_relative_error, sorted_1d

from fedemd import cli
from fedemd.autonet import init_params, loss_and_grad
from fedemd.config import load_config
from fedemd.metrics import ari, flipped_accuracy, param_distance_matrix, within_and_overall
from fedemd.projection import ProjectionSpec, jl_dimension, make_projection
from fedemd.transport import DiscreteDistribution, cost_matrix, emd_exact

SEEDS = scenarios.SEEDS


def test_1_one_shot_clustering(report):
    rows, ok = [], True
    for s in SEEDS:
        art, orc = scenarios.emd_run(s), scenarios.oracle_run(s)
        a1 = ari(art.rounds[0].labels, art.ground_truth)
        gap = 100 * abs(art.final_accuracy.mean() - orc.final_accuracy.mean())
        ok &= a1 == 1.0 and gap <= 0.5
        rows.append(f"s{s}: ARI {a1:.2f}, gap {gap:.2f}pt")
    assert report(1, "one-shot clustering vs oracle", ok, "; ".join(rows))


EPS_GRID = (0.005, 0.01, 0.025, 0.05, 0.1)


def test_2_epsilon_range(report):
    passing = [ari(scenarios.emd_run(0, epsilon=e).labels, scenarios.rotated(0).ground_truth) == 1.0 for e in EPS_GRID]
    best = 1.0
    for i, j in itertools.combinations_with_replacement(range(len(EPS_GRID)), 2):
        if all(passing[i : j + 1]):
            best = max(best, EPS_GRID[j] / EPS_GRID[i])
    ok = best >= 4
    detail = ", ".join(f"{e}:{'1' if p else 'x'}" for e, p in zip(EPS_GRID, passing))
    assert report(2, "epsilon robustness", ok, f"{detail}; contiguous factor {best:g}")


def test_3_projection_ratios(report):
    res = {r: ari(scenarios.emd_run(0, projection_ratio=r).labels, scenarios.rotated(0).ground_truth) for r in (0.9, 0.7, 0.5)}
    ok = all(v == 1.0 for v in res.values())
    assert report(3, "projection robustness", ok, ", ".join(f"ratio {r}: ARI {v:.2f}" for r, v in res.items()))


def test_4_sinkhorn_interchangeable(report):
    exact, sk = scenarios.emd_run(0), scenarios.emd_run(0, backend="sinkhorn")
    same_M = np.array_equal(exact.state.M, sk.state.M)
    same_pi = np.array_equal(exact.labels, sk.labels)
    diff = np.nanmax(np.abs(exact.state.W - sk.state.W))
    assert report(4, "sinkhorn matches exact", same_M and same_pi, f"M equal {same_M}, labels equal {same_pi}, max |dW| {diff:.3g}")


def test_5_ot_oracles(report):
    rng = np.random.default_rng(2024)
    worst_perm = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 4))
        a = DiscreteDistribution.uniform(rng.normal(size=(n, d)))
        b = DiscreteDistribution.uniform(rng.normal(size=(n, d)))
        C = cost_matrix(a, b)
        oracle = brute_force_matching(C)
        for method in ("auto", "simplex"):
            worst_perm = max(worst_perm, abs(emd_exact(a, b, C, method=method).value - oracle))
    worst_1d = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 60))
        x, y = rng.normal(size=n), rng.normal(0.5, 2.0, size=n)
        a = DiscreteDistribution.uniform(x[:, None])
        b = DiscreteDistribution.uniform(y[:, None])
        for method in ("auto", "simplex"):
            worst_1d = max(worst_1d, abs(emd_exact(a, b, method=method).value - sorted_1d(x, y)))
    ok = worst_perm < 1e-9 and worst_1d < 1e-9
    assert report(5, "OT solver oracles", ok, f"max err matching {worst_perm:.2e}, 1-D {worst_1d:.2e}")


def test_6_jl_preservation(report):
    N, lam = 100, 0.3
    k = jl_dimension(N, lam)
    in_dim = 2 * k
    fracs = []
    for s in range(20):
        rng = np.random.default_rng(s)
        Z = rng.normal(size=(N, in_dim))
        R = make_projection(ProjectionSpec(s, in_dim, k))
        r = pdist(Z @ R, "sqeuclidean") / pdist(Z, "sqeuclidean")
        fracs.append(np.mean((r >= 1 - lam) & (r <= 1 + lam)))
    ok = min(fracs) >= 0.95
    assert report(6, "JL preservation", ok, f"out_dim {k}, worst in-band fraction {min(fracs):.4f} over 20 seeds")


def test_7_gradient_check(report):
    worst = 0.0
    for s in range(30):
        rng = np.random.default_rng(1000 + s)
        hidden = tuple(int(h) for h in rng.integers(2, 8, size=rng.integers(0, 3)))
        p = init_params(int(rng.integers(1, 5)), int(rng.integers(2, 5)), hidden, int(rng.integers(2, 6)), s)
        p = p.unflatten(p.flat() + 0.3 * rng.standard_normal(p.flat().size))
        n = int(rng.integers(1, 10))
        X, y = rng.normal(size=(n, p.in_dim)), rng.integers(0, p.num_classes, size=n)
        wd = float(rng.choice([0.0, 1e-6, 1e-2]))
        _, g = loss_and_grad(p, X, y, wd)
        num = central_differences(lambda v: loss_and_grad(p.unflatten(v), X, y, wd)[0], p.flat())
        worst = max(worst, max_relative_error(g.flat(), num))
    assert report(7, "gradient correctness", worst < 1e-4, f"max relative error {worst:.2e} over 30 draws")


def _flip_gap(art, part, clients):
    gaps = []
    for c in clients:
        test = part.clients[c].test
        clean = art.final_accuracy[c]
        flipped = flipped_accuracy(art.client_params[c], test, n_flips=10, seed=c)
        gaps.append(clean - flipped)
    return 100 * float(np.mean(gaps))


def test_8_backdoor_isolation(report):
    rows, ok = [], True
    for s in SEEDS:
        part, emd, fedavg = scenarios.backdoor_runs(s)
        target = np.flatnonzero(part.ground_truth == 0)
        a = ari(emd.labels, part.ground_truth)
        g_emd, g_avg = _flip_gap(emd, part, target), _flip_gap(fedavg, part, target)
        ok &= a == 1.0 and abs(g_emd) <= 2.0 and g_avg >= 10.0
        rows.append(f"s{s}: ARI {a:.2f}, EMD gap {g_emd:.1f}pt, FedAvg gap {g_avg:.1f}pt")
    assert report(8, "backdoor isolation", ok, "; ".join(rows))


def test_9_parameter_distances(report):
    # the clients' final local models, before the last aggregation collapses
    # every cluster onto one shared model
    rows, ok = [], True
    for s in SEEDS:
        art = scenarios.emd_run(s)
        for part in ("phi", "all"):
            w, o = within_and_overall(param_distance_matrix(art.local_params, part), art.ground_truth)
            ok &= w < o
            if s == 0:
                rows.append(f"{part}: within {w:.3g} < overall {o:.3g}")
    assert report(9, "parameter-distance property", ok, "; ".join(rows) + "; 5 seeds")


def test_10_partial_participation(report):
    rows, ok = [], True
    for s in SEEDS:
        art = scenarios.emd_run(s, participation=8, global_epochs=20)
        pairs = [(a, b) for _, a, b in art.state.measurements]
        once = len(pairs) == len(set(pairs)) == 16 * 15 // 2
        a = ari(art.labels, art.ground_truth)
        last = max(t for t, _, _ in art.state.measurements)
        ok &= once and art.state.all_measured() and a == 1.0
        rows.append(f"s{s}: pairs {len(set(pairs))}/120 by round {last}, ARI {a:.2f}")
    assert report(10, "partial participation", ok, "; ".join(rows))


def test_11_min_single_cluster(report):
    data = {"angles": scenarios.MIN_ANGLES, "noise": scenarios.MIN_NOISE}
    Ks = [scenarios.emd_run(s, data_args=data).n_clusters for s in SEEDS]
    ok = all(k == 1 for k in Ks)
    assert report(11, "degenerate single cluster", ok, f"noise {scenarios.MIN_NOISE}, K per seed {Ks}")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("dummy", [0])
def test_12_determinism(report, tmp_path, dummy):
    runs = {
        "scenario 1": [],
        "backdoor": ["--override", "dataset.kind=backdoor"],
        "partial": ["--override", "federation.participation=8", "--override", "federation.global_epochs=20"],
    }
    results = []
    for name, extra in runs.items():
        dirs = [tmp_path / f"{name.replace(' ', '_')}_{i}" for i in range(2)]
        codes = [cli.main(["run", "--seed", "1", "--out", str(d)] + extra) for d in dirs]
        a, b = _tree(dirs[0]), _tree(dirs[1])
        results.append((name, codes == [0, 0] and a == b and len(a) == len(cli.RUN_FILES)))
    # the same config evaluated in-process reproduces bit-identical state
    cfg = load_config(None, [], {"seed": 1})
    x, y = cli.execute(cfg), cli.execute(cfg)
    inproc = np.array_equal(x.state.W, y.state.W, equal_nan=True) and all(
        np.array_equal(p.flat(), q.flat()) for p, q in zip(x.client_params, y.client_params)
    )
    ok = all(r for _, r in results) and inproc
    detail = ", ".join(f"{n}: {'identical' if r else 'DIFFERENT'}" for n, r in results)
    assert report(12, "byte-identical artifacts", ok, f"{detail}, in-process {inproc}")
