"""Nested YAML experiment configuration with strict keys and line-aware errors.

Layout (every key optional; defaults shown)::

    seed: 0
    output: runs/experiment
    method: emd              # emd | oracle | fedavg | param_distance
    dataset:
      kind: rotated          # rotated | backdoor
      args: {}               # keyword arguments of the generator
    model:
      hidden: [32]
      embed_dim: 16
      lr: 0.05
      momentum: 0.9
      weight_decay: 1.0e-6
      batch_size: 32
    federation:
      epsilon: 0.025
      global_epochs: 10
      local_epochs: 10
      participation: null    # clients per round; null means all
      participation_policy: covering
      backend: exact         # exact | sinkhorn
      reg: 0.1
      sinkhorn_max_iter: 1000
      projection_ratio: 0.9
      subsample_fraction: 0.1
      subsample_cap: 512
      subsample_floor: 256
      rescale_epsilon: false
      pair_rule: mirrored
      param_threshold: null  # only for method param_distance
      n_jobs: 1

``dataset.args`` keys are checked against the generator signature: see
:func:`fedemd.synthdata.make_rotated_clusters` and
:func:`fedemd.synthdata.make_backdoor_partition` for their defaults.
"""

from __future__ import annotations

import dataclasses
import inspect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import synthdata
from .autonet import TrainConfig
from .federation import BASELINES, FederationConfig

GENERATORS = {
    "rotated": synthdata.make_rotated_clusters,
    "backdoor": synthdata.make_backdoor_partition,
}
METHODS = ("emd",) + BASELINES


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and, if known, the line."""


@dataclass
class DatasetSection:
    kind: str = "rotated"
    args: dict = field(default_factory=dict)


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [32])
    embed_dim: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 32


@dataclass
class FederationSection:
    epsilon: float = 0.025
    global_epochs: int = 10
    local_epochs: int = 10
    participation: int | None = None
    participation_policy: str = "covering"
    backend: str = "exact"
    reg: float = 0.1
    sinkhorn_max_iter: int = 1000
    projection_ratio: float = 0.9
    subsample_fraction: float = 0.1
    subsample_cap: int = 512
    subsample_floor: int | None = 256
    rescale_epsilon: bool = False
    pair_rule: str = "mirrored"
    param_threshold: float | None = None
    n_jobs: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs/experiment"
    method: str = "emd"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def federation_config(self) -> FederationConfig:
        f, m = self.federation, self.model
        train = TrainConfig(m.lr, m.momentum, m.weight_decay, f.local_epochs, m.batch_size)
        return FederationConfig(
            epsilon=f.epsilon,
            global_epochs=f.global_epochs,
            train=train,
            participation=f.participation,
            participation_policy=f.participation_policy,
            backend=f.backend,
            reg=f.reg,
            sinkhorn_max_iter=f.sinkhorn_max_iter,
            projection_ratio=f.projection_ratio,
            subsample_fraction=f.subsample_fraction,
            subsample_cap=f.subsample_cap,
            subsample_floor=f.subsample_floor,
            rescale_epsilon=f.rescale_epsilon,
            pair_rule=f.pair_rule,
            hidden=tuple(m.hidden),
            embed_dim=m.embed_dim,
            seed=self.seed,
            n_jobs=f.n_jobs,
        )

    def make_partition(self) -> synthdata.ClientPartition:
        return GENERATORS[self.dataset.kind](seed=self.seed, **self.dataset.args)


_SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "federation": FederationSection}


def _marks(node, prefix="") -> dict[str, int]:
    """Dotted key -> 1-based line number for every mapping key in a YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = k.start_mark.line + 1
            out.update(_marks(v, key + "."))
    return out


def _where(lines: dict[str, int], key: str, source: str) -> str:
    if key in lines:
        return f"{source}:{lines[key]}: "
    return f"{source}: "


def _coerce(value, annotation: str, key: str):
    """Check ``value`` against the type implied by a field's annotation."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be null")
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if "list" in annotation:
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return value
    if "dict" in annotation:
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a mapping, got {value!r}")
        return value
    return value


def _build_section(cls, data, key_prefix: str, lines, source):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(lines, key_prefix, source)}{key_prefix} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        key = f"{key_prefix}.{k}"
        if k not in fields:
            raise ConfigError(f"{_where(lines, key, source)}unknown key {key!r}")
        try:
            kwargs[k] = _coerce(v, str(fields[k].type), key)
        except ConfigError as exc:
            raise ConfigError(f"{_where(lines, key, source)}{exc}") from None
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig, lines, source) -> None:
    def fail(key, msg):
        raise ConfigError(f"{_where(lines, key, source)}{msg}")

    if cfg.method not in METHODS:
        fail("method", f"method must be one of {METHODS}, got {cfg.method!r}")
    kind = cfg.dataset.kind
    if kind not in GENERATORS:
        fail("dataset.kind", f"dataset.kind must be one of {tuple(GENERATORS)}, got {kind!r}")
    params = inspect.signature(GENERATORS[kind]).parameters
    for k in cfg.dataset.args:
        if k not in params or k == "seed":
            fail(f"dataset.args.{k}", f"unknown key 'dataset.args.{k}' for dataset kind {kind!r}")
    try:
        GENERATORS[kind](seed=cfg.seed, **cfg.dataset.args)
    except (TypeError, ValueError) as exc:
        fail("dataset.args", f"dataset.args rejected by the {kind!r} generator: {exc}")
    if cfg.method == "param_distance" and cfg.federation.param_threshold is None:
        fail("federation.param_threshold", "method param_distance needs federation.param_threshold")
    try:
        cfg.federation_config()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def from_mapping(data: dict, lines: dict[str, int] | None = None, source: str = "<config>") -> ExperimentConfig:
    lines = lines or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for k, v in data.items():
        if k not in top:
            raise ConfigError(f"{_where(lines, k, source)}unknown key {k!r}")
        if k in _SECTIONS:
            kwargs[k] = _build_section(_SECTIONS[k], v, k, lines, source)
        else:
            try:
                kwargs[k] = _coerce(v, str(top[k].type), k)
            except ConfigError as exc:
                raise ConfigError(f"{_where(lines, k, source)}{exc}") from None
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg, lines, source)
    return cfg


def _parse(text: str, source: str) -> tuple[Any, dict[str, int]]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: malformed YAML ({getattr(exc, 'problem', exc)})") from None
    return data, _marks(node) if node is not None else {}


def set_dotted(data: dict, key: str, value) -> None:
    """Assign ``value`` at a dotted path, creating intermediate mappings."""
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"malformed key {key!r}")
    cur = data
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
        cur = nxt
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value`` with the value read as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"override {text!r}: cannot parse value") from None
    return key.strip(), value


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    extra: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Read a YAML file (or start from defaults), then apply overrides in order.

    ``extra`` holds already-parsed dotted assignments applied last (the CLI's
    ``--seed`` and ``--out``).
    """
    if path is None:
        data, lines, source = {}, {}, "<defaults>"
    else:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config ({exc.strerror})") from None
        data, lines = _parse(text, source)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{source}:1: top level must be a mapping")
    for ov in overrides:
        key, value = parse_override(ov)
        set_dotted(data, key, value)
        lines.pop(key, None)
    for key, value in (extra or {}).items():
        set_dotted(data, key, value)
        lines.pop(key, None)
    return from_mapping(data, lines, source)


def has_key(key: str) -> bool:
    """Whether a dotted key names a settable config field."""
    parts = key.split(".")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if len(parts) == 1:
        return parts[0] in top and parts[0] not in _SECTIONS
    if parts[0] not in _SECTIONS:
        return False
    names = {f.name for f in dataclasses.fields(_SECTIONS[parts[0]])}
    if parts[0] == "dataset" and parts[1] == "args":
        return len(parts) == 3
    return len(parts) == 2 and parts[1] in names


def dump_yaml(cfg: ExperimentConfig, include_output: bool = True) -> str:
    d = cfg.to_dict()
    if not include_output:
        d.pop("output")
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=False)
