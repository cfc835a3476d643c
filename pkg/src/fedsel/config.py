"""Experiment configuration and its flat ``key = value`` file format.

Example::

    # lines starting with '#' are comments
    dataset = mnist-subset
    sigma = 0.8
    selectors = random, dqre-scnet
    seeds = 0, 1, 2, 3, 4
    target_accuracy = 0.85

List values are comma separated. Empty values mean "default"/None.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .fed import FedConfig, PartitionConfig
from .rl import DQNConfig
from .selectors import SELECTOR_KINDS

DATASETS = ("mnist-subset", "fashion-subset", "cifar-subset", "blobs")
MODELS = ("mlp", "dqre-conv")


@dataclass
class ExperimentConfig:
    dataset: str = "mnist-subset"
    data_dir: str | None = None
    model: str = "mlp"
    hidden: int = 64
    # partition
    n_clients: int = 20
    sigma: float = 0.0
    # federation
    clients_per_round: int = 4
    local_epochs: int = 1
    local_lr: float = 0.05
    batch_size: int = 20
    target_accuracy: float = 0.9
    max_rounds: int = 200
    stop_at_target: bool = False
    workers: int = 1
    # selectors
    selectors: list = field(default_factory=lambda: ["random"])
    seeds: list = field(default_factory=lambda: [0])
    k_clusters: int | None = None
    bandwidth: float | None = None
    ensemble_size: int = 3
    train_steps_per_round: int = 4
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_rounds: int = 200
    sync_interval: int = 50
    replay_capacity: int = 2048
    replay_batch: int = 32
    q_lr: float = 0.01
    q_hidden: list = field(default_factory=lambda: [32, 32])
    # output
    output_dir: str = "out"
    record_runtime: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.selectors:
            raise ConfigError("selectors must be nonempty")
        for s in self.selectors:
            if s not in SELECTOR_KINDS:
                raise ConfigError(f"unknown selector {s!r}; expected one of {SELECTOR_KINDS}")
        if self.clients_per_round > self.n_clients:
            raise ConfigError("clients_per_round exceeds n_clients")
        if self.k_clusters is not None and not 1 <= self.k_clusters <= self.clients_per_round:
            raise ConfigError("k_clusters must lie in [1, clients_per_round]")
        try:
            self.partition(0)
            self.fed()
            self.dqn()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def partition(self, seed: int) -> PartitionConfig:
        return PartitionConfig(self.n_clients, self.sigma, seed)

    def fed(self) -> FedConfig:
        return FedConfig(self.clients_per_round, self.local_epochs, self.local_lr,
                         self.batch_size, self.target_accuracy, self.max_rounds)

    def dqn(self) -> DQNConfig:
        return DQNConfig(self.gamma, self.epsilon_start, self.epsilon_end,
                         self.epsilon_decay_rounds, self.sync_interval, self.replay_capacity,
                         self.replay_batch, self.q_lr, tuple(self.q_hidden))


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    text = typ.__name__ if isinstance(typ, type) else str(typ)
    if raw == "" and "None" in text:
        return None
    try:
        if text.startswith("list"):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return [int(x) for x in items] if key in ("seeds", "q_hidden") else items
        if "bool" in text:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in text:
            return int(raw)
        if "float" in text:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, hints[key])
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif v is None:
            v = ""
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
