"""Experiment configuration: YAML files, ``FEDCARE_`` environment overrides, dataclasses.

Environment variables address nested keys with double underscores, e.g.
``FEDCARE_TRAIN__ROUNDS=5`` or ``FEDCARE_ABLATIONS__M2_NO_PROJECTION=true``.
Values are parsed as YAML scalars.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .data import PartitionConfig
from .errors import ConfigError
from .generator import GenLossConfig
from .recovery import RecoveryConfig
from .unlearning import UnlearnConfig

ENV_PREFIX = "FEDCARE_"


@dataclass(frozen=True)
class SynthSource:
    classes: int = 10
    per_class: int = 200
    shape: tuple = (1, 8, 8)
    spread: float = 0.25
    center_range: tuple = (0.2, 0.8)


@dataclass(frozen=True)
class IdxSource:
    images: str = ""
    labels: str = ""
    test_images: Optional[str] = None  # None: carve the test split from the training files
    test_labels: Optional[str] = None
    classes: int = 10
    limit: Optional[int] = None  # keep at most this many training samples


@dataclass(frozen=True)
class DatasetConfig:
    synth: Optional[SynthSource] = None
    idx: Optional[IdxSource] = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if (self.synth is None) == (self.idx is None):
            raise ConfigError("dataset needs exactly one source: 'synth' or 'idx'")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    workers: int = 1
    recovery_lr: Optional[float] = None  # None: same as lr
    recovery_epochs: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 0 or self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0 or self.workers <= 0:
            raise ConfigError("train settings must be positive")


@dataclass(frozen=True)
class ForgetSection:
    granularity: str = "client"
    target_client: Union[int, str] = "largest"  # class mode: "largest" means most samples of the class
    instance_fraction: Optional[float] = None
    target_class: Optional[int] = None

    def __post_init__(self):
        if not (self.target_client == "largest" or isinstance(self.target_client, int)):
            raise ConfigError("forget.target_client must be an integer or 'largest'")


@dataclass(frozen=True)
class BackdoorSection:
    trigger_size: int = 3
    trigger_value: float = 1.0
    target_label: int = 0
    poison_fraction: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    calibration_fraction: float = 0.2
    holdout_fraction: float = 0.2  # share of the target client's data withheld as MIA non-members

    def __post_init__(self):
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("evaluation.holdout_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class AblationFlags:
    m1_batchnorm_generator: bool = False
    m2_no_projection: bool = False
    m3_plain_fedavg_recovery: bool = False
    m4_no_backbone_freeze: bool = False
    m5_no_server_filter: bool = False

    def active(self):
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synth=SynthSource()))
    model: dict = field(default_factory=lambda: {"kind": "cnn", "conv_channels": [8, 8], "hidden": 32})
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GenLossConfig = field(default_factory=GenLossConfig)
    forget: ForgetSection = field(default_factory=ForgetSection)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    backdoor: Optional[BackdoorSection] = None
    evaluation: EvalSection = field(default_factory=EvalSection)
    ablations: AblationFlags = field(default_factory=AblationFlags)
    retrain_oracle: bool = False
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def with_ablations(self, **flags):
        return dataclasses.replace(self, ablations=dataclasses.replace(self.ablations, **flags))


_NESTED = {
    ExperimentConfig: {"dataset": DatasetConfig, "partition": PartitionConfig, "train": TrainConfig,
                       "generator": GenLossConfig, "forget": ForgetSection, "unlearn": UnlearnConfig,
                       "recovery": RecoveryConfig, "backdoor": BackdoorSection, "evaluation": EvalSection,
                       "ablations": AblationFlags},
    DatasetConfig: {"synth": SynthSource, "idx": IdxSource},
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        path = f"{where}.{key}" if where else key
        if sub is not None:
            value = _build(sub, value, path)
        elif isinstance(value, list) and key != "model":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def env_overrides(environ=None) -> dict:
    """Nested dict built from ``FEDCARE_*`` variables."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or len(key) == len(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with a scalar override")
        node[path[-1]] = yaml.safe_load(raw) if raw != "" else None
    return out


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """File (optional) < environment < explicit ``overrides``."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = merge(data, env_overrides(environ))
    if overrides:
        data = merge(data, overrides)
    return from_dict(data)


def dump(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
