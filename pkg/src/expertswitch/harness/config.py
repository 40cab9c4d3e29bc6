"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from ..drift import DetectorConfig
from ..nn import SgdConfig
from ..selection import PruneConfig
from .streams import ConfigError, StreamSpec

DEFAULT_MNIST_DIR = os.environ.get("EXPERTSWITCH_MNIST_DIR", "/root/data/mnist")


@dataclass
class ExperimentConfig:
    # stream
    kind: str = "split_mnist"
    base_kind: str = "split_synthetic"
    data_dir: Optional[str] = None
    task_classes: Optional[list] = None
    n_tasks: int = 5
    classes_per_task: int = 2
    order: Optional[list] = None
    epochs: int = 10
    batch_size: int = 128
    synthetic_dim: int = 20
    synthetic_separation: float = 4.0
    synthetic_noise: float = 1.0
    synthetic_label_noise: float = 0.0
    synthetic_train: int = 2560
    synthetic_test: int = 1000
    # training
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    # detection
    alpha: float = 0.2
    window_size: int = 100
    min_fill: Optional[int] = None
    rollback_on_switch: bool = True
    # buffers
    selector_capacity: int = 2500
    prune_capacity: int = 1000
    # selector and pruning
    selector_hidden: int = 256
    selector_epochs: int = 10
    expert_prune_rate: float = 0.98
    selector_prune_rate: float = 0.5
    retrain_epochs: int = 30
    retrain_lr: float = 0.1
    retrain_weight_decay: float = 1e-4
    retrain_momentum: float = 0.9
    # architecture: "auto" picks conv for image inputs and mlp otherwise
    expert_arch: str = "auto"
    expert_hidden: int = 100
    expert_channels: list = dataclasses.field(default_factory=lambda: [16, 32])
    expert_kernel: int = 3
    # run
    seed: int = 0
    out: str = "runs/default"
    eval_each_segment: bool = True
    save_buffers: bool = True

    def __post_init__(self):
        self.detector()
        self.sgd()
        self.prune()

    def stream_spec(self) -> StreamSpec:
        data_dir = self.data_dir
        needs_data = self.kind in ("split_mnist", "permuted_mnist") or (
            self.kind == "custom_sequence" and self.base_kind != "split_synthetic")
        if needs_data and not data_dir:
            data_dir = DEFAULT_MNIST_DIR
        return StreamSpec(
            kind=self.kind, task_classes=self.task_classes, n_tasks=self.n_tasks, order=self.order,
            base_kind=self.base_kind, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            data_dir=data_dir, classes_per_task=self.classes_per_task,
            synthetic_dim=self.synthetic_dim, synthetic_separation=self.synthetic_separation,
            synthetic_noise=self.synthetic_noise, synthetic_label_noise=self.synthetic_label_noise,
            synthetic_train=self.synthetic_train, synthetic_test=self.synthetic_test,
        )

    def detector(self) -> DetectorConfig:
        return DetectorConfig(alpha=self.alpha, window_size=self.window_size, min_fill=self.min_fill)

    def sgd(self) -> SgdConfig:
        return SgdConfig(learning_rate=self.lr, momentum=self.momentum, nesterov=self.nesterov,
                         weight_decay=self.weight_decay, batch_size=self.batch_size)

    def prune(self) -> PruneConfig:
        retrain = SgdConfig(learning_rate=self.retrain_lr, momentum=self.retrain_momentum,
                            nesterov=self.nesterov and self.retrain_momentum > 0,
                            weight_decay=self.retrain_weight_decay, batch_size=self.batch_size)
        return PruneConfig(self.expert_prune_rate, self.selector_prune_rate, self.retrain_epochs, retrain)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            key = ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = parse_value(key, raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


# short names from the hyperparameter table
ALIASES = {"Cs": "selector_capacity", "Cp": "prune_capacity", "W_th": "window_size", "Wth": "window_size"}

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}
_INT = {"n_tasks", "classes_per_task", "epochs", "batch_size", "synthetic_dim", "synthetic_train",
        "synthetic_test", "window_size", "min_fill", "selector_capacity", "prune_capacity", "selector_hidden",
        "selector_epochs", "retrain_epochs", "expert_hidden", "expert_kernel", "seed"}
_FLOAT = {"synthetic_separation", "synthetic_noise", "synthetic_label_noise", "lr", "momentum", "weight_decay",
          "alpha", "expert_prune_rate", "selector_prune_rate", "retrain_lr", "retrain_weight_decay",
          "retrain_momentum"}
_BOOLS = {"nesterov", "rollback_on_switch", "eval_each_segment", "save_buffers"}


def parse_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if raw.lower() in ("", "none", "null"):
        return None
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _BOOLS:
            return _BOOL[raw.lower()]
        if key in ("order", "expert_channels"):
            return [int(v) for v in raw.replace(",", " ").split()]
        if key == "task_classes":
            return [[int(v) for v in g.replace(",", " ").split()] for g in raw.split(";") if g.strip()]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return "; ".join(" ".join(str(v) for v in g) for g in value)
        return ",".join(str(v) for v in value)
    return str(value)
