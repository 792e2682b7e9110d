"""Experiment configuration: schema, defaults, validation, round-trip.

Configs are JSON files with a version field. Every default is either a
published training setting (learning rate 0.1, batch 64, 10 sampled
clients, Dirichlet 0.3, 3 labels per client, schedule exponents -2..1)
or a documented desk-scale choice (10 clients, 40 rounds, 2 local
epochs, width-4 model on a 2000-sample set). Unknown keys and violated
constraints raise ConfigError with the offending key path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

CONFIG_VERSION = 1

METHODS = ("fedbnn", "fedavg", "fedbnn_beta1_lambda1", "fedbnn_client_aux")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "fmnist_like_idx"   # fmnist_idx | fmnist_like_idx | synthetic
    images_path: str = ""           # fmnist_idx: explicit IDX pair
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    n_train: int = 2000             # generated kinds
    n_test: int = 600
    n_classes: int = 10
    image_hw: int = 28              # synthetic kind only (8 recommended)
    noise: float = 0.35


@dataclass
class PartitionConfig:
    scheme: str = "iid"
    dirichlet_alpha: float = 0.3
    labels_per_client: int = 3


@dataclass
class ModelConfig:
    arch: str = "cnn4"
    width: int = 4
    binarize: str = "middle"   # middle | all | none (none is forced for fedavg)


@dataclass
class FederationConfig:
    n_clients: int = 10
    n_clients_per_round: int = 5
    n_rounds: int = 40
    n_local_epochs: int = 2
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_start: int = 200
    lr_decay_count: int = 3
    n_rotation_iters: int = 3
    server_mix: str = "client_avg"  # client_avg | fixed
    server_alpha: float = 0.1       # used when server_mix == fixed
    server_beta: float = 0.1
    activations: str = "surrogate"  # backward slope: surrogate | ste
    soft_forward: bool = False      # True: forward F(.) instead of sign(.)
    client_mix_warm_start: bool = False  # reuse a client's last mixing state


@dataclass
class SurrogateConfig:
    t_min: float = -2.0
    t_max: float = 1.0


@dataclass
class ExperimentConfig:
    method: str = "fedbnn"
    seed: int = 0
    output_dir: str = "runs/out"
    jobs: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)


_SECTIONS = {"dataset": DatasetConfig, "partition": PartitionConfig,
             "model": ModelConfig, "federation": FederationConfig,
             "surrogate": SurrogateConfig}


def _apply(obj, data: dict, prefix: str):
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown key {prefix}{key}")
        cur = getattr(obj, key)
        if isinstance(cur, bool) and not isinstance(value, bool):
            raise ConfigError(f"{prefix}{key}: expected bool, got {value!r}")
        if isinstance(cur, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{prefix}{key}: expected number, got {value!r}")
        if isinstance(cur, str) and not isinstance(value, str):
            raise ConfigError(f"{prefix}{key}: expected string, got {value!r}")
        setattr(obj, key, value)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version}")
    cfg = ExperimentConfig()
    for section, cls in _SECTIONS.items():
        sub = data.pop(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{section}: expected an object")
        _apply(getattr(cfg, section), sub, f"{section}.")
    _apply(cfg, data, "")
    validate(cfg)
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {"version": CONFIG_VERSION}
    out.update(asdict(cfg))
    return out


def validate(cfg: ExperimentConfig) -> None:
    f = cfg.federation
    if cfg.method not in METHODS:
        raise ConfigError(f"method: {cfg.method!r} not one of {METHODS}")
    if f.n_clients_per_round > f.n_clients:
        raise ConfigError("federation.n_clients_per_round: exceeds n_clients")
    if f.n_clients_per_round < 1:
        raise ConfigError("federation.n_clients_per_round: must be >= 1")
    if f.n_local_epochs < 1:
        raise ConfigError("federation.n_local_epochs: must be >= 1")
    if f.n_rounds < 1:
        raise ConfigError("federation.n_rounds: must be >= 1")
    if f.lr <= 0:
        raise ConfigError("federation.lr: must be > 0")
    if f.batch_size < 2:
        raise ConfigError("federation.batch_size: must be >= 2")
    if f.n_rotation_iters < 1:
        raise ConfigError("federation.n_rotation_iters: must be >= 1")
    if f.server_mix not in ("client_avg", "fixed"):
        raise ConfigError("federation.server_mix: must be client_avg or fixed")
    if f.activations not in ("surrogate", "ste"):
        raise ConfigError("federation.activations: must be surrogate or ste")
    if cfg.dataset.kind not in ("fmnist_idx", "fmnist_like_idx", "synthetic"):
        raise ConfigError(f"dataset.kind: unknown kind {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "fmnist_idx" and not cfg.dataset.images_path:
        raise ConfigError("dataset.images_path: required for kind fmnist_idx")
    if cfg.partition.scheme not in ("iid", "dirichlet", "label_count"):
        raise ConfigError(f"partition.scheme: unknown {cfg.partition.scheme!r}")
    if cfg.partition.dirichlet_alpha <= 0:
        raise ConfigError("partition.dirichlet_alpha: must be > 0")
    if cfg.model.arch != "cnn4":
        raise ConfigError(f"model.arch: unknown {cfg.model.arch!r}")
    if cfg.model.binarize not in ("middle", "all", "none"):
        raise ConfigError("model.binarize: must be middle, all, or none")
    if cfg.model.width < 1:
        raise ConfigError("model.width: must be >= 1")
    if cfg.jobs < 1:
        raise ConfigError("jobs: must be >= 1")


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!r} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path!r}: top level must be an object")
    return from_dict(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)
