"""
Run configuration: flat YAML key/value files layered under CLI overrides.

Keys prefixed with `data_` configure the dataset, everything else the
training run. Precedence is defaults < config file < explicit overrides.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigurationError
from .losses import AFFINITY_MODES, CurriculumSchedule
from .model import ModelConfig
from .numerics import SgdConfig

logger = logging.getLogger("RunConfig")

LOSS_KINDS = ("sc", "psc", "mpsc", "ce-ce", "ce-only")
LOSS_ALIASES = {"ce": "ce-ce", "cece": "ce-ce"}
SAMPLER_ALIASES = {"class-balanced": "balanced", "cb": "balanced"}
DATA_SOURCES = ("synthetic", "cifar")


def _none_if_all(value: Any) -> Optional[int]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("all", "none", "")):
        return None
    return int(value)


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the desk-scale preset"""
    epochs: int = 60
    steps_per_epoch: int = 0
    batch_size_sc: int = 128
    batch_size_ce: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: Optional[List[int]] = None
    lr_milestone_fractions: List[float] = field(default_factory=lambda: [0.6, 0.8])
    lr_decay: float = 0.1
    alpha_schedule: str = "parabolic"
    loss: str = "sc"
    tau: float = 0.1
    prototypes_per_class: int = 1
    affinity_mode: str = "uniform"
    sc_sampler: str = "random"
    ce_sampler: str = "balanced"
    positives_per_anchor: Optional[int] = None
    view_noise: float = 0.1
    sc_reduction: str = "sum"
    grad_clip_norm: float = 0.0
    seed: int = 0
    two_stage: bool = False
    checkpoint_every: int = 1
    eval_every: int = 1
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 32
    projection_hidden: int = 32
    embedding_dim: int = 16

    def __post_init__(self):
        self.loss = LOSS_ALIASES.get(str(self.loss).lower(), str(self.loss).lower())
        self.sc_sampler = SAMPLER_ALIASES.get(self.sc_sampler, self.sc_sampler)
        self.ce_sampler = SAMPLER_ALIASES.get(self.ce_sampler, self.ce_sampler)
        self.positives_per_anchor = _none_if_all(self.positives_per_anchor)
        if self.lr_milestones is not None:
            self.lr_milestones = [int(m) for m in self.lr_milestones]
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.two_stage and self.epochs < 2:
            raise ConfigurationError("two-stage training needs at least 2 epochs")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.affinity_mode not in AFFINITY_MODES:
            raise ConfigurationError(f"unknown affinity_mode {self.affinity_mode!r}")
        for name in ("sc_sampler", "ce_sampler"):
            if getattr(self, name) not in ("random", "balanced"):
                raise ConfigurationError(f"{name} must be random or balanced")
        if self.sc_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"sc_reduction must be sum or mean, got {self.sc_reduction!r}")
        if self.batch_size_sc < 2 or self.batch_size_ce < 1:
            raise ConfigurationError("batch_size_sc must be >= 2 and batch_size_ce >= 1")
        if not self.grad_clip_norm >= 0.0:
            raise ConfigurationError(
                f"grad_clip_norm must be >= 0 (0 disables), got {self.grad_clip_norm}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigurationError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.loss == "psc" and self.prototypes_per_class != 1:
            raise ConfigurationError("psc uses one prototype per class; use mpsc for M > 1")
        if self.lr_milestones is not None:
            milestones = self.lr_milestones
            if any(b <= a for a, b in zip(milestones, milestones[1:])):
                raise ConfigurationError(f"lr_milestones must be strictly increasing: {milestones}")
            if milestones and (milestones[0] < 0 or milestones[-1] >= self.epochs):
                raise ConfigurationError(
                    f"lr_milestones must lie in [0, {self.epochs}): {milestones}")
        if any(not 0.0 < f < 1.0 for f in self.lr_milestone_fractions):
            raise ConfigurationError("lr_milestone_fractions must lie in (0, 1)")
        self.sgd()
        self.schedule()

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay)

    def schedule(self, epochs: Optional[int] = None) -> CurriculumSchedule:
        """The curriculum spans epoch 0 .. epochs-1 so alpha reaches both endpoints"""
        span = self.epochs if epochs is None else epochs
        return CurriculumSchedule.parse(self.alpha_schedule, max(span - 1, 1))

    def milestones(self, epochs: Optional[int] = None) -> List[int]:
        span = self.epochs if epochs is None else epochs
        if self.lr_milestones is not None and epochs is None:
            return list(self.lr_milestones)
        derived = {int(math.floor(f * span)) for f in self.lr_milestone_fractions}
        return sorted(m for m in derived if 0 < m < span)

    def learning_rate_at(self, epoch: int, epochs: Optional[int] = None) -> float:
        passed = sum(1 for m in self.milestones(epochs) if m <= epoch)
        return self.learning_rate * self.lr_decay ** passed

    def model_config(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, num_classes=num_classes,
                           hidden_dims=list(self.hidden_dims), feature_dim=self.feature_dim,
                           projection_hidden=self.projection_hidden,
                           embedding_dim=self.embedding_dim,
                           prototypes_per_class=self.prototypes_per_class)

    @property
    def uses_prototypes(self) -> bool:
        return self.loss in ("psc", "mpsc")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        return cls(**_known_keys(cls, values, "training"))


@dataclass
class DataConfig:
    """Dataset selection; the synthetic defaults are the desk benchmark"""
    source: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 16
    n_max: int = 500
    beta: float = 100.0
    class_sep: float = 3.0
    noise_std: float = 1.0
    test_per_class: int = 200
    train_paths: List[str] = field(default_factory=list)
    test_paths: List[str] = field(default_factory=list)
    seed: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.train_paths, str):
            self.train_paths = [self.train_paths]
        if isinstance(self.test_paths, str):
            self.test_paths = [self.test_paths]
        if self.source not in DATA_SOURCES:
            raise ConfigurationError(f"unknown data source {self.source!r}")
        if self.source == "cifar" and not self.train_paths:
            raise ConfigurationError("cifar data needs data_train_paths")
        if self.num_classes < 2:
            raise ConfigurationError("at least 2 classes are required")
        if not self.beta >= 1.0:
            raise ConfigurationError(f"beta must be >= 1, got {self.beta}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "DataConfig":
        return cls(**_known_keys(cls, values, "data"))


@dataclass
class ExperimentConfig:
    """A complete run: dataset plus training configuration"""
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def data_seed(self) -> int:
        return self.train.seed if self.data.seed is None else self.data.seed

    def to_flat_dict(self) -> Dict[str, Any]:
        flat = dict(self.train.to_dict())
        flat.update({f"data_{key}": value for key, value in self.data.to_dict().items()})
        return flat

    @classmethod
    def from_flat_dict(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        data_values = {k[len("data_"):]: v for k, v in values.items() if k.startswith("data_")}
        train_values = {k: v for k, v in values.items() if not k.startswith("data_")}
        return cls(DataConfig.from_dict(data_values), TrainConfig.from_dict(train_values))


def _known_keys(cls, values: Dict[str, Any], section: str) -> Dict[str, Any]:
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown {section} config key(s): {', '.join(unknown)}")
    return dict(values)


def read_flat_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            values = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigurationError(f"{path}: expected a key/value mapping")
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"{path}: config must be flat, nested key(s): {nested}")
    return values


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(read_flat_yaml(path))
        logger.info(f"loaded config {path} keys={sorted(values)}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_flat_dict(values)
