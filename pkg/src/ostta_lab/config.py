"""YAML experiment configuration.

Sections: `stream`, `adapt`, `pretrain`, `sweep`. Keys mirror the config
dataclasses field for field; any unknown key anywhere is a hard error so a
typo cannot silently fall back to a default.
"""

from dataclasses import dataclass, field, replace

import yaml

from .detectors import PartitionerSpec
from .harness import AdaptConfig, OptimizerSpec
from .losses import LossConfig
from .mathcore import ConfigError
from .stream import CorruptionSpec, StreamConfig


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 200
    lr: float = 0.1
    n_per_class: int = 64

    def __post_init__(self):
        if self.epochs < 0 or self.n_per_class < 1 or self.lr <= 0.0:
            raise ConfigError("invalid pretrain settings")


@dataclass(frozen=True)
class SweepSettings:
    gamma1_list: tuple = None
    gamma2_list: tuple = None
    tau_list: tuple = None


@dataclass(frozen=True)
class FullConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def with_seed(self, seed):
        return replace(self, stream=replace(self.stream, seed=int(seed)))


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _build_corruption(data):
    _check_keys(data, ("kind", "severity"), "stream.corruption")
    return CorruptionSpec(**data)


def _build_stream(data):
    allowed = (
        "K", "F", "d_in", "cluster_sigma", "batch_size", "ood_ratio",
        "unknown_classes", "corruption", "seed",
    )
    _check_keys(data, allowed, "stream")
    kwargs = dict(data)
    if "corruption" in kwargs:
        kwargs["corruption"] = _build_corruption(kwargs["corruption"])
    return StreamConfig(**kwargs)


def _build_partitioner(data):
    if isinstance(data, str):
        return PartitionerSpec(tag=data)
    _check_keys(data, ("tag", "score_kind", "threshold"), "adapt.partitioner")
    return PartitionerSpec(**data)


def _build_optimizer(data):
    if isinstance(data, str):
        return OptimizerSpec(kind=data)
    _check_keys(data, ("kind", "b1", "b2", "eps"), "adapt.optimizer")
    return OptimizerSpec(**data)


def _build_loss(data):
    _check_keys(data, ("beta1", "gamma1", "gamma2", "alpha", "tau"), "adapt.loss")
    return LossConfig(**data)


def _build_adapt(data):
    allowed = ("method", "partitioner", "loss", "lr", "optimizer", "batches_per_corruption")
    _check_keys(data, allowed, "adapt")
    kwargs = dict(data)
    if "partitioner" in kwargs:
        kwargs["partitioner"] = _build_partitioner(kwargs["partitioner"])
    if "optimizer" in kwargs:
        kwargs["optimizer"] = _build_optimizer(kwargs["optimizer"])
    if "loss" in kwargs:
        kwargs["loss"] = _build_loss(kwargs["loss"])
    return AdaptConfig(**kwargs)


def _build_pretrain(data):
    _check_keys(data, ("epochs", "lr", "n_per_class"), "pretrain")
    return PretrainSettings(**data)


def _build_sweep(data):
    _check_keys(data, ("gamma1_list", "gamma2_list", "tau_list"), "sweep")
    kwargs = {k: tuple(v) if v is not None else None for k, v in data.items()}
    return SweepSettings(**kwargs)


def parse_config(data):
    if data is None:
        data = {}
    _check_keys(data, ("stream", "adapt", "pretrain", "sweep"), "config")
    try:
        return FullConfig(
            stream=_build_stream(data.get("stream", {})),
            adapt=_build_adapt(data.get("adapt", {})),
            pretrain=_build_pretrain(data.get("pretrain", {})),
            sweep=_build_sweep(data.get("sweep", {})),
        )
    except TypeError as exc:  # wrong value shapes surface as TypeErrors
        raise ConfigError(str(exc)) from exc


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse {path}: {exc}") from exc
    return parse_config(data)
