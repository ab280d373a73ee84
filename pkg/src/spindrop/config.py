"""Experiment configuration: a sectioned TOML file with every field explicit.

Every field below has a default, and :func:`emit` always writes all of
them, so the effective configuration of a run is never hidden.

Grammar (TOML subset)::

    [model]    topology, input_shape, placement, targets, binary, activation, init_scale
    [dropout]  rho, lambda, T
    [train]    epochs, batch_size, lr, momentum, schedule, seed
    [data]     source ("mnist5k" | "idx" | "blobs"), path, limit
    [crossbar] strategy (1 | 2)
    [ood]      datasets, n, threshold, percentile, rule, seed
    [output]   dir
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from spindrop.errors import ConfigurationError


@dataclass
class ModelSection:
    topology: str = "c16k5,p2,c32k5,p2,fc128,fc10"
    input_shape: list = field(default_factory=lambda: [1, 28, 28])
    placement: str = "topology-wise"
    targets: list = field(default_factory=list)
    binary: bool = True
    activation: str = "sign"
    init_scale: float = 1e-3


@dataclass
class DropoutSection:
    rho: float = 0.15
    lam: float = 1e-6
    T: int = 20


@dataclass
class TrainSection:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"
    seed: int = 0


@dataclass
class DataSection:
    source: str = "mnist5k"
    path: str = ""
    limit: int = 0


@dataclass
class CrossbarSection:
    strategy: int = 1


@dataclass
class OODSection:
    datasets: list = field(default_factory=lambda: ["d1", "d2", "d3", "d4"])
    n: int = 500
    threshold: float = 0.9
    percentile: float = 10.0
    rule: str = "prose"
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/default"


SECTIONS = {
    "model": ModelSection,
    "dropout": DropoutSection,
    "train": TrainSection,
    "data": DataSection,
    "crossbar": CrossbarSection,
    "ood": OODSection,
    "output": OutputSection,
}

# TOML key -> dataclass attribute where the two differ ("lambda" is a keyword)
_RENAMES = {("dropout", "lambda"): "lam"}
_RENAMED_ATTRS = {(sec, attr) for (sec, _), attr in _RENAMES.items()}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    dropout: DropoutSection = field(default_factory=DropoutSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    crossbar: CrossbarSection = field(default_factory=CrossbarSection)
    ood: OODSection = field(default_factory=OODSection)
    output: OutputSection = field(default_factory=OutputSection)


def _coerce(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigurationError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
    return value


def parse(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config is not valid TOML: {exc}") from None
    cfg = ExperimentConfig()
    for name, table in doc.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{name}]")
        if not isinstance(table, dict):
            raise ConfigurationError(f"[{name}] must be a table")
        section = getattr(cfg, name)
        known = {f.name for f in fields(section)}
        for key, value in table.items():
            attr = _RENAMES.get((name, key), key)
            if attr not in known or (attr == key and (name, key) in _RENAMED_ATTRS):
                raise ConfigurationError(f"unknown key {key!r} in [{name}]")
            setattr(section, attr, _coerce(name, key, value, getattr(section, attr)))
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text)


def emit(cfg: ExperimentConfig) -> str:
    doc = {}
    for name in SECTIONS:
        table = asdict(getattr(cfg, name))
        for (sec, key), attr in _RENAMES.items():
            if sec == name:
                table = {(key if k == attr else k): v for k, v in table.items()}
        doc[name] = table
    return tomli_w.dumps(doc)


def validate(cfg: ExperimentConfig) -> None:
    m, d, t = cfg.model, cfg.dropout, cfg.train
    if m.placement not in ("layer-wise", "topology-wise"):
        raise ConfigurationError(f"[model] placement must be layer-wise or topology-wise, got {m.placement!r}")
    if m.activation not in ("sign", "tanh", "none"):
        raise ConfigurationError(f"[model] activation {m.activation!r} not supported")
    if len(m.input_shape) != 3 or min(m.input_shape) < 1:
        raise ConfigurationError(f"[model] input_shape must be [C, H, W], got {m.input_shape}")
    if not 0 <= d.rho < 1 or d.lam < 0 or d.T < 1:
        raise ConfigurationError("[dropout] needs 0 <= rho < 1, lambda >= 0, T >= 1")
    if t.epochs < 0 or t.batch_size < 1 or t.lr < 0 or not 0 <= t.momentum < 1:
        raise ConfigurationError("[train] needs epochs >= 0, batch_size >= 1, lr >= 0, 0 <= momentum < 1")
    if t.schedule not in ("cosine", "constant"):
        raise ConfigurationError(f"[train] schedule {t.schedule!r} not supported")
    if cfg.data.source not in ("mnist5k", "idx", "blobs"):
        raise ConfigurationError(f"[data] source {cfg.data.source!r} not supported")
    if cfg.data.source == "idx" and not cfg.data.path:
        raise ConfigurationError("[data] source = \"idx\" needs a path")
    if cfg.crossbar.strategy not in (1, 2):
        raise ConfigurationError("[crossbar] strategy must be 1 or 2")
    bad = [x for x in cfg.ood.datasets if x not in ("d1", "d2", "d3", "d4")]
    if bad:
        raise ConfigurationError(f"[ood] unknown datasets {bad}")
    if cfg.ood.rule not in ("prose", "formula"):
        raise ConfigurationError(f"[ood] rule {cfg.ood.rule!r} not supported")
