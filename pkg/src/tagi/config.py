"""Run configuration: strict JSON loading and canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class SuiteConfig:
    seed: int = 0
    n_train_tasks: int = 8
    mode: str = "def"
    n_train_instances: int = 1000
    n_eval_instances: int = 100

    def __post_init__(self):
        if self.mode not in ("def", "def_2pos"):
            raise ConfigError("suite.mode must be 'def' or 'def_2pos'")


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    corpus_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        """Digest of everything that can change results; the output directory cannot."""
        d = self.to_dict()
        d["paths"].pop("out_dir")
        return _digest(d)

    @property
    def model_hash(self) -> str:
        return _digest(dataclasses.asdict(self.model))


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "suite": SuiteConfig, "paths": PathsConfig}


def _canon(x):
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {k: _canon(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_canon(v) for v in x]
    return x


def _digest(d: dict) -> str:
    blob = json.dumps(_canon(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in fields:
            raise ConfigError(f"unknown key '{path}.{k}'")
    kwargs = {}
    for k, v in data.items():
        want = fields[k].type
        default = getattr(cls(), k) if k in fields else None
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"'{path}.{k}' must be a boolean")
        if isinstance(default, int) and not isinstance(default, bool) and (
                isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"'{path}.{k}' must be an integer")
        if isinstance(default, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"'{path}.{k}' must be a number")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"'{path}.{k}' must be a string ({want})")
        kwargs[k] = float(v) if isinstance(default, float) else v
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for k in data:
        if k not in _SECTIONS:
            raise ConfigError(f"unknown key '{k}'")
    parts = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path: str | None, seed_env: bool = True) -> RunConfig:
    """Read a JSON config (defaults when ``path`` is None); TAGI_SEED overrides train.seed."""
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    cfg = config_from_dict(data)
    env = os.environ.get("TAGI_SEED")
    if seed_env and env is not None:
        try:
            cfg.train.seed = int(env)
        except ValueError:
            raise ConfigError(f"TAGI_SEED={env!r} is not an integer") from None
    return cfg
