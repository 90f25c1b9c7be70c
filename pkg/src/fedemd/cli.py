"""Command-line front end: ``fedemd run | sweep | diagnose``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.

Artifacts of ``run`` (all deterministic given config and seed):

* ``metrics.csv``: ``epoch,client_id,cluster_id,test_accuracy``
* ``clusters.json``: labels, cluster count and ARI per epoch, ground truth
* ``distances.json``: ``W`` (null where unmeasured), ``M``, ``measured``
* ``summary.json``: accuracy summary, final ARI, cluster count, resolved config
* ``models.json``: initial parameters, final per-client parameters and each
  client's last pre-aggregation local model
* ``config.yaml``: the resolved configuration

``sweep`` writes one run directory per value plus
``sweep.csv``: ``value,ari,avg_accuracy,worst_accuracy``.
``diagnose`` writes ``diagnostics/{emd,param_l2,grad_cosine,principal_angle}.csv``
and ``diagnostics/diagnostics.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import federation, metrics
from .autonet import ModelParams
from .config import ConfigError, ExperimentConfig

logger = logging.getLogger("fedemd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

RUN_FILES = ("metrics.csv", "clusters.json", "distances.json", "summary.json", "models.json", "config.yaml")


class RuntimeFailure(RuntimeError):
    pass


def execute(cfg: ExperimentConfig, partition=None) -> federation.RunArtifacts:
    if partition is None:
        partition = cfg.make_partition()
    fc = cfg.federation_config()
    if cfg.method == "emd":
        return federation.run_experiment(partition, fc)
    return federation.run_baseline(
        cfg.method, partition, fc, threshold=cfg.federation.param_threshold
    )


def _portable(cfg: ExperimentConfig) -> dict:
    """Config as recorded in artifacts; the output location is left out."""
    d = cfg.to_dict()
    d.pop("output")
    return d


def _summary(cfg: ExperimentConfig, art: federation.RunArtifacts) -> dict:
    out = {
        "method": art.method,
        "config": _portable(cfg),
        "interrupted": art.interrupted,
        "error": art.error,
        "epochs_completed": len(art.rounds),
    }
    if art.rounds:
        avg, worst = metrics.accuracy_summary(art.final_accuracy)
        out.update(
            avg_accuracy=avg,
            worst_accuracy=worst,
            final_ari=metrics.ari(art.labels, art.ground_truth),
            n_clusters=art.n_clusters,
        )
    return out


def write_run(out: Path, cfg: ExperimentConfig, art: federation.RunArtifacts) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "client_id", "cluster_id", "test_accuracy"])
        for r in art.rounds:
            for c, (k, acc) in enumerate(zip(r.labels, r.test_accuracy)):
                w.writerow([r.epoch, c, int(k), repr(float(acc))])
    truth = [int(v) for v in art.ground_truth]
    metrics.write_json(
        {
            "ground_truth": truth,
            "epochs": [
                {
                    "epoch": r.epoch,
                    "labels": [int(v) for v in r.labels],
                    "n_clusters": r.n_clusters,
                    "ari": metrics.ari(r.labels, truth),
                    "participants": [int(c) for c in r.participants],
                    "new_pairs": r.new_pairs,
                }
                for r in art.rounds
            ],
        },
        out / "clusters.json",
    )
    st = art.state
    metrics.write_json(
        {
            "W": metrics.matrix_to_list(st.W),
            "M": st.M.tolist(),
            "measured": st.measured.tolist(),
            "epsilon": cfg.federation_config().effective_epsilon(),
        },
        out / "distances.json",
    )
    metrics.write_json(
        {
            "initial": art.initial_params.to_dict(),
            "clients": [p.to_dict() for p in art.client_params],
            "local": [p.to_dict() for p in art.local_params],
        },
        out / "models.json",
    )
    (out / "config.yaml").write_text(cfgmod.dump_yaml(cfg, include_output=False))
    summary = _summary(cfg, art)
    metrics.write_json(summary, out / "summary.json")
    return summary


def cmd_run(cfg: ExperimentConfig) -> int:
    art = execute(cfg)
    summary = write_run(Path(cfg.output), cfg, art)
    if art.interrupted:
        raise RuntimeFailure(f"run interrupted: {art.error}")
    print(
        f"{cfg.method}: ARI {summary['final_ari']:.4f}, K={summary['n_clusters']}, "
        f"avg acc {summary['avg_accuracy']:.4f}, worst {summary['worst_accuracy']:.4f} -> {cfg.output}"
    )
    return EXIT_OK


def _value_label(v) -> str:
    return json.dumps(v, sort_keys=True) if not isinstance(v, str) else v


def cmd_sweep(args, overrides: list[str], extra: dict) -> int:
    if not cfgmod.has_key(args.param):
        raise ConfigError(f"unknown sweep parameter {args.param!r}")
    values = [cfgmod.parse_override(f"{args.param}={v}")[1] for v in args.values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = cfgmod.load_config(args.config, overrides, extra)
    root = Path(base.output)
    configs = []
    for v in values:
        sub = dict(extra)
        sub[args.param] = v
        sub["output"] = str(root / f"{args.param}={_value_label(v)}")
        configs.append(cfgmod.load_config(args.config, overrides, sub))
    rows = []
    for v, cfg in zip(values, configs):
        art = execute(cfg)
        summary = write_run(Path(cfg.output), cfg, art)
        if art.interrupted:
            raise RuntimeFailure(f"run for {args.param}={v} interrupted: {art.error}")
        rows.append((_value_label(v), summary))
        print(f"{args.param}={_value_label(v)}: ARI {summary['final_ari']:.4f}")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "ari", "avg_accuracy", "worst_accuracy"])
        for label, s in rows:
            w.writerow([label, repr(s["final_ari"]), repr(s["avg_accuracy"]), repr(s["worst_accuracy"])])
    return EXIT_OK


def diagnose(run_dir: Path) -> metrics.DiagnosticsReport:
    for name in ("config.yaml", "distances.json", "models.json"):
        if not (run_dir / name).is_file():
            raise FileNotFoundError(f"missing artifact {run_dir / name}")
    cfg = cfgmod.load_config(run_dir / "config.yaml")
    partition = cfg.make_partition()
    dist = json.loads((run_dir / "distances.json").read_text())
    W = np.array([[np.nan if v is None else v for v in row] for row in dist["W"]], dtype=float)
    models = json.loads((run_dir / "models.json").read_text())
    # local (pre-aggregation) models, since cluster members share one model afterwards
    params = [ModelParams.from_dict(d) for d in models["local"]]
    theta0 = ModelParams.from_dict(models["initial"])
    report = metrics.distance_diagnostics(partition, W, params, theta0)
    out = run_dir / "diagnostics"
    out.mkdir(exist_ok=True)
    for name, M in report.matrices().items():
        metrics.write_matrix_csv(M, out / f"{name}.csv")
    metrics.write_json(report.to_dict(), out / "diagnostics.json")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedemd", description="Clustered federated learning by embedding EMDs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file (defaults are used when omitted)")
        sp.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config assignment, e.g. federation.epsilon=0.05; repeatable",
        )
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one experiment"))
    sw = sub.add_parser("sweep", help="run one experiment per value of a config key")
    common(sw)
    sw.add_argument("--param", required=True, help="dotted config key to vary")
    sw.add_argument("--values", required=True, nargs="+", help="values, parsed as YAML scalars")
    dg = sub.add_parser("diagnose", help="pairwise distance matrices of a finished run")
    dg.add_argument("run_dir")
    dg.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "diagnose":
            diagnose(Path(args.run_dir))
            print(f"diagnostics written to {Path(args.run_dir) / 'diagnostics'}")
            return EXIT_OK
        extra = {}
        if args.seed is not None:
            extra["seed"] = args.seed
        if args.out is not None:
            extra["output"] = args.out
        if args.command == "sweep":
            return cmd_sweep(args, args.override, extra)
        cfg = cfgmod.load_config(args.config, args.override, extra)
        return cmd_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
