"""Run configuration and the flat dotted-key config file grammar.

A config file holds one ``key = value`` per line. Keys are dotted
(``train.iterations``), ``#`` starts a comment, values are double-quoted
strings, ``true``/``false``, or numbers. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .params import ModelConfig

SCHEDULE_1X = 5625


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = SCHEDULE_1X
    batch_size: int = 2
    base_lr: float = 1e-4
    warmup_iters: int = 100
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    stages: int = 3
    d: int = 64
    n_queries: int = 20
    image_size: int = 128
    dataset: str = ""
    lsj: bool = True
    checkpoint_every: int = 500
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.stages not in (1, 3):
            raise ConfigError(f"stages must be 1 or 3, got {self.stages}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n_queries=self.n_queries, stages=self.stages)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class EvalConfig:
    dataset: str = ""
    out: str = "report.json"
    # None sweeps the F1 gate with the IoU threshold
    f1_threshold: float | None = None
    workers: int = 1


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# dotted key -> (section, field)
KEYS: dict[str, tuple[str, str]] = {
    "model.d": ("train", "d"),
    "model.n_queries": ("train", "n_queries"),
    "model.stages": ("train", "stages"),
    "data.train": ("train", "dataset"),
    "data.image_size": ("train", "image_size"),
    "train.iterations": ("train", "iterations"),
    "train.batch_size": ("train", "batch_size"),
    "train.base_lr": ("train", "base_lr"),
    "train.warmup_iters": ("train", "warmup_iters"),
    "train.weight_decay": ("train", "weight_decay"),
    "train.clip_norm": ("train", "clip_norm"),
    "train.beta1": ("train", "beta1"),
    "train.beta2": ("train", "beta2"),
    "train.seed": ("train", "seed"),
    "train.lsj": ("train", "lsj"),
    "train.checkpoint_every": ("train", "checkpoint_every"),
    "train.out_dir": ("train", "out_dir"),
    "eval.dataset": ("eval", "dataset"),
    "eval.out": ("eval", "out"),
    "eval.f1_threshold": ("eval", "f1_threshold"),
    "eval.workers": ("eval", "workers"),
}

_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def parse_value(text: str, where: str):
    if text.startswith('"'):
        if len(text) < 2 or not text.endswith('"'):
            raise ConfigError(f"{where}: unterminated string")
        return text[1:-1].replace('\\"', '"')
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = _LINE.match(line)
        where = f"{source}:{lineno}"
        if not m:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = m.group(1), parse_value(m.group(2), where)
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(section, name: str, value, key: str):
    ftype = {f.name: f.type for f in dataclasses.fields(section)}[name]
    current = getattr(section, name)
    if isinstance(value, bool) or isinstance(current, bool) or ftype == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if "float" in str(ftype) and isinstance(value, (int, float)):
        return float(value)
    if ftype == "int":
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if ftype == "str" and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def build_config(values: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section_name, name = KEYS[key]
        section = getattr(cfg, section_name)
        setattr(section, name, _coerce(section, name, value, key))
    try:
        cfg.train = TrainConfig(**dataclasses.asdict(cfg.train))
    except TypeError as exc:  # pragma: no cover
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    values = {}
    if path is not None:
        values = parse_config_text(Path(path).read_text(), str(path))
    values.update(overrides or {})
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, name) in KEYS.items():
        value = getattr(getattr(cfg, section), name)
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
