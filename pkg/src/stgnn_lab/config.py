"""Experiment configuration: a small ``key = value`` grammar under ``[section]`` headers.

Grammar::

    file     := line*
    line     := blank | comment | header | entry
    comment  := ws* ("#" | ";") any*
    header   := ws* "[" name "]" ws*
    entry    := ws* key ws* "=" ws* value ws*
    value    := scalar | scalar ("," ws* scalar)*      (lists only where the key is a list)

Empty values mean "unset" for optional keys.  Booleans accept true/false/yes/no/1/0.
Every key belongs to exactly one section; unknown sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .models import BACKBONES, SPATIAL_KINDS


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class DataSection:
    path: str | None = None           # unset: use the synthetic generator
    kind: str = "speed"
    resolution_minutes: int = 5
    synth_nodes: int = 20
    synth_days: int = 14
    synth_seed: int = 1
    noise_std: float = 2.0


@dataclass(frozen=True)
class GraphSection:
    path: str | None = None           # unset with synthetic data: generated sensor network
    format: str = "distances"         # distances | weights
    sigma: float | None = None        # unset: std of the listed distances
    epsilon: float = 0.1


@dataclass(frozen=True)
class SplitSection:
    policy: str = "fractional"        # fractional | days
    parts: tuple[float, ...] = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "attn"
    spatial: str = "gcn"
    input_steps: int = 12
    output_steps: int = 12
    horizons: tuple[int, ...] = (3, 6, 12)
    hidden: int = 64
    heads: int = 8
    head_dim: int = 8
    layers: int | None = None         # unset: 3, or 2 for graphs above 512 nodes
    gcn_inner: int = 64
    gcn_output_activation: str = "sigmoid"
    attention_slope: float = 0.2


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 32
    lr: float = 0.001
    patience: int = 10
    max_epochs: int = 200
    loss: str = "mae"
    clip_norm: float = 5.0
    window_stride: int = 1
    time_budget_s: float | None = None
    step_mode: str = "average"        # average over steps 1..H, or last step only
    seed: int = 1


@dataclass(frozen=True)
class OutputSection:
    dir: str = "results"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    graph: GraphSection = field(default_factory=GraphSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def with_model(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _field_types(section_cls) -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(section_cls)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(type_name: str, text: str) -> Any:
    optional = "None" in type_name
    if text == "":
        if optional:
            return None
        raise ValueError("value required")
    base = type_name.replace(" | None", "")
    if base == "str":
        return text
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "bool":
        return _parse_bool(text)
    if base.startswith("tuple[int"):
        return tuple(int(p) for p in text.split(","))
    if base.startswith("tuple[float"):
        return tuple(float(p) for p in text.split(","))
    raise TypeError(f"unsupported config type {type_name}")


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("malformed section header", line=lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if section is None:
            raise ConfigError("entry before any [section] header", key=key, line=lineno)
        types = _field_types(SECTIONS[section])
        if key not in types:
            raise ConfigError(f"unknown key in [{section}]", key=key, line=lineno)
        if key in values[section]:
            raise ConfigError("duplicate key", key=key, line=lineno)
        try:
            values[section][key] = _parse_value(types[key], val)
        except ValueError as exc:
            raise ConfigError(f"bad value {val!r}: {exc}", key=key, line=lineno) from None
        lines[(section, key)] = lineno
    sections = {name: dataclasses.replace(SECTIONS[name](), **vals) for name, vals in values.items()}
    cfg = ExperimentConfig(**sections)
    validate_config(cfg, lines)
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def validate_config(cfg: ExperimentConfig, lines: dict[tuple[str, str], int] | None = None) -> None:
    lines = lines or {}

    def fail(section: str, key: str, message: str):
        raise ConfigError(message, key=f"{section}.{key}", line=lines.get((section, key)))

    d, g, s, m, t = cfg.data, cfg.graph, cfg.split, cfg.model, cfg.train
    if d.kind not in ("speed", "flow"):
        fail("data", "kind", "kind must be speed or flow")
    if d.resolution_minutes <= 0 or 1440 % d.resolution_minutes:
        fail("data", "resolution_minutes", "resolution must divide one day")
    if d.synth_nodes < 2 or d.synth_days < 1 or d.noise_std < 0:
        fail("data", "synth_nodes", "synthetic data needs >= 2 nodes, >= 1 day and noise_std >= 0")
    if g.format not in ("distances", "weights"):
        fail("graph", "format", "format must be distances or weights")
    if g.sigma is not None and g.sigma <= 0:
        fail("graph", "sigma", "sigma must be positive")
    if not 0.0 <= g.epsilon < 1.0:
        fail("graph", "epsilon", "epsilon must lie in [0, 1)")
    if s.policy not in ("fractional", "days"):
        fail("split", "policy", "policy must be fractional or days")
    if len(s.parts) != 3:
        fail("split", "parts", "parts needs three values (train, val, test)")
    if m.backbone not in BACKBONES:
        fail("model", "backbone", f"backbone must be one of {BACKBONES}")
    if m.spatial not in SPATIAL_KINDS:
        fail("model", "spatial", f"spatial must be one of {SPATIAL_KINDS}")
    if m.backbone == "rnn" and m.spatial == "full-attn":
        fail("model", "spatial", "full-attn is only available with the attn backbone")
    for key in ("input_steps", "output_steps", "hidden", "heads", "head_dim", "gcn_inner"):
        if getattr(m, key) < 1:
            fail("model", key, "must be positive")
    if m.layers is not None and m.layers < 1:
        fail("model", "layers", "must be positive")
    # attention in the attn backbone and in GAT splits hidden into heads
    if (m.backbone == "attn" or m.spatial == "gat") and m.heads * m.head_dim != m.hidden:
        key = next((k for k in ("head_dim", "heads", "hidden") if ("model", k) in lines), "head_dim")
        fail("model", key, f"heads*head_dim = {m.heads * m.head_dim} must equal hidden = {m.hidden}")
    if not m.horizons or any(h < 1 or h > m.output_steps for h in m.horizons):
        fail("model", "horizons", f"horizons must lie in 1..{m.output_steps}")
    if m.gcn_output_activation not in ("identity", "sigmoid", "relu", "tanh"):
        fail("model", "gcn_output_activation", "unknown activation")
    if t.batch_size < 1:
        fail("train", "batch_size", "must be positive")
    if t.lr <= 0:
        fail("train", "lr", "must be positive")
    if t.patience < 1:
        fail("train", "patience", "must be positive")
    if t.max_epochs < 1:
        fail("train", "max_epochs", "must be positive")
    if t.loss not in ("mae", "mse"):
        fail("train", "loss", "loss must be mae or mse")
    if t.window_stride < 1:
        fail("train", "window_stride", "must be positive")
    if t.step_mode not in ("average", "last"):
        fail("train", "step_mode", "step_mode must be average or last")


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        out.append(f"[{f.name}]")
        for sf in dataclasses.fields(section):
            out.append(f"{sf.name} = {_format_value(getattr(section, sf.name))}")
        out.append("")
    return "\n".join(out)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:12]
