"""
Curriculum-driven dual-branch training.

Each step draws a feature-branch batch (two views per source sample) and a
classifier-branch batch independently, runs both through the shared backbone
in one forward pass, combines the branch losses with the epoch's alpha and
takes a single SGD step on the summed, pre-scaled gradients. A branch whose
weight is zero is skipped entirely, so alpha = 0 reduces to plain CE training.
"""

import json
import logging
import math
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import read_checkpoint, write_checkpoint
from .config import DataConfig, ExperimentConfig, TrainConfig
from .data import (Dataset, LongTailSpec, ScBatch, compose_sc_batch, load_cifar_batches,
                   make_sampler, subsample_longtail, synth_gaussian_longtail)
from .errors import CheckpointError, ConfigurationError, NonFiniteError
from .losses import (EmbeddingBatch, LogitsBatch, ce_loss, curriculum_alpha, mpsc_loss, psc_loss,
                     sc_loss)
from .metrics import EPOCH_COLUMNS, MetricsCollector, evaluate, sample_rss
from .model import HybridNetwork, ModelConfig, PrototypeBank
from .numerics import Matrix, ParamTensor, SgdMomentum, clip_gradient_norm, named_rng

logger = logging.getLogger("HybridTrainer")

STAGE_JOINT = "joint"
STAGE_FEATURE = "feature"
STAGE_CLASSIFIER = "classifier"


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    alpha: float
    lr: float
    contrastive_loss: Optional[float]
    ce_loss: Optional[float]
    total_loss: float
    train_top1: Optional[float] = None
    test_top1: Optional[float] = None


@dataclass
class RunReport:
    """Per-epoch traces plus final evaluation of one training run"""
    run_id: str
    loss: str
    seed: int
    schedule: str
    sc_reduction: str
    two_stage: bool
    config: Dict[str, Any]
    epochs: List[EpochRecord] = field(default_factory=list)
    data_config: Optional[Dict[str, Any]] = None
    final: Optional[Dict[str, Any]] = None
    per_class_acc: Optional[List[float]] = None
    wall_clock_seconds: float = 0.0
    environment: Dict[str, Any] = field(default_factory=dict)
    status: str = "running"

    def alpha_trace(self) -> List[float]:
        return [r.alpha for r in self.epochs]

    def lr_trace(self) -> List[float]:
        return [r.lr for r in self.epochs]

    def loss_trace(self) -> List[float]:
        return [r.total_loss for r in self.epochs]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunReport":
        values = dict(values)
        values["epochs"] = [EpochRecord(**r) for r in values.get("epochs", [])]
        return cls(**values)

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "RunReport":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.epochs], columns=EPOCH_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


@dataclass
class StagePlan:
    """A contiguous block of epochs sharing branch layout and LR schedule"""
    name: str
    start: int
    length: int


@dataclass
class StepResult:
    contrastive_loss: Optional[float]
    ce_loss: Optional[float]
    total_loss: float


class HybridTrainer:
    """Owns the optimizer, samplers and RNG streams of one run"""

    def __init__(self, model: HybridNetwork, prototypes: Optional[PrototypeBank], dataset: Dataset,
                 cfg: TrainConfig, test_set: Optional[Dataset] = None,
                 checkpoint_path: Optional[Union[str, Path]] = None,
                 data_config: Optional[DataConfig] = None):
        if dataset.size == 0:
            raise ConfigurationError("cannot train on an empty dataset")
        if dataset.num_classes != model.cfg.num_classes:
            raise ConfigurationError(
                f"dataset has {dataset.num_classes} classes, model expects {model.cfg.num_classes}")
        if cfg.uses_prototypes:
            if prototypes is None:
                prototypes = model.make_prototypes()
            if prototypes.per_class != cfg.prototypes_per_class:
                raise ConfigurationError(
                    f"prototype bank has M={prototypes.per_class}, config asks {cfg.prototypes_per_class}")
        self.model = model
        self.prototypes = prototypes
        self.dataset = dataset
        self.test_set = test_set
        self.cfg = cfg
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.data_config = data_config
        self.optimizer = SgdMomentum(cfg.sgd())
        self.sc_sampler = make_sampler(cfg.sc_sampler, dataset, named_rng(cfg.seed, "train.sampler.sc"))
        self.ce_sampler = make_sampler(cfg.ce_sampler, dataset, named_rng(cfg.seed, "train.sampler.ce"))
        self.view_rng = named_rng(cfg.seed, "train.views")
        self.steps_per_epoch = cfg.steps_per_epoch or math.ceil(dataset.size / cfg.batch_size_ce)
        self.next_epoch = 0
        self.report = RunReport(
            run_id=str(uuid.uuid4()), loss=cfg.loss, seed=cfg.seed,
            schedule=cfg.schedule().describe(), sc_reduction=cfg.sc_reduction,
            two_stage=cfg.two_stage, config=cfg.to_dict(),
            data_config=data_config.to_dict() if data_config else None)
        self.logger = logging.getLogger("HybridTrainer")

    # ---- schedule --------------------------------------------------------

    def stages(self) -> List[StagePlan]:
        if not self.cfg.two_stage:
            return [StagePlan(STAGE_JOINT, 0, self.cfg.epochs)]
        first = self.cfg.epochs // 2
        return [StagePlan(STAGE_FEATURE, 0, first),
                StagePlan(STAGE_CLASSIFIER, first, self.cfg.epochs - first)]

    def stage_of(self, epoch: int) -> StagePlan:
        for stage in self.stages():
            if stage.start <= epoch < stage.start + stage.length:
                return stage
        raise ConfigurationError(f"epoch {epoch} outside the run's {self.cfg.epochs} epochs")

    def alpha_at(self, epoch: int) -> float:
        stage = self.stage_of(epoch)
        if stage.name == STAGE_FEATURE:
            return 1.0
        if stage.name == STAGE_CLASSIFIER:
            return 0.0
        if self.cfg.loss == "ce-only":
            return 0.0
        return curriculum_alpha(self.cfg.schedule(), epoch)

    def learning_rate_at(self, epoch: int) -> float:
        stage = self.stage_of(epoch)
        if stage.name == STAGE_JOINT:
            return self.cfg.learning_rate_at(epoch)
        return self.cfg.learning_rate_at(epoch - stage.start, stage.length)

    def trainable_params(self, stage: str) -> List[ParamTensor]:
        groups = self.model.parameter_groups()
        feature_side: List[ParamTensor] = []
        if self.cfg.loss == "ce-ce":
            feature_side = groups["aux_classifier"]
        elif self.cfg.loss != "ce-only":
            feature_side = groups["projection"] + (self.prototypes.params() if self.prototypes else [])
        if stage == STAGE_FEATURE:
            return groups["backbone"] + feature_side
        if stage == STAGE_CLASSIFIER:
            return list(groups["classifier"])
        return groups["backbone"] + feature_side + groups["classifier"]

    # ---- one step ----------------------------------------------------------

    def _feature_branch(self, features: Matrix, labels: np.ndarray, view_ids: np.ndarray,
                        positive_mask: np.ndarray, alpha: float) -> Tuple[float, Matrix]:
        """Branch loss and the alpha-scaled gradient w.r.t. the backbone features"""
        cfg = self.cfg
        if cfg.loss == "ce-ce":
            value, grad_logits = ce_loss(LogitsBatch(self.model.forward_aux(features), labels))
            return value, self.model.backward_aux(alpha * grad_logits)
        z = self.model.forward_contrastive(features)
        batch = EmbeddingBatch(z, labels, view_ids, positive_mask)
        if cfg.loss == "sc":
            value, grad_z = sc_loss(batch, cfg.tau, cfg.sc_reduction)
        else:
            if cfg.loss == "psc":
                value, grad_z, grad_p = psc_loss(batch, self.prototypes.value, cfg.tau)
            else:
                value, grad_z, grad_p = mpsc_loss(batch, self.prototypes.value,
                                                  self.prototypes.per_class, cfg.tau,
                                                  cfg.affinity_mode)
            self.prototypes.param.accumulate(alpha * grad_p)
        return value, self.model.backward_contrastive(alpha * grad_z)

    def draw_batches(self, alpha: float) -> Tuple[Optional[ScBatch], Optional[np.ndarray]]:
        """Feature-branch batch and classifier-branch row ids; a branch with zero weight draws nothing"""
        cfg = self.cfg
        sc_batch = ce_rows = None
        if alpha > 0.0 and cfg.loss != "ce-only":
            sc_batch = compose_sc_batch(self.dataset, self.sc_sampler, cfg.batch_size_sc,
                                        cfg.view_noise, cfg.positives_per_anchor, self.view_rng)
        if alpha < 1.0:
            ce_rows = self.ce_sampler.draw(cfg.batch_size_ce)
        return sc_batch, ce_rows

    def train_step(self, epoch: int, step: int, alpha: float, lr: float, stage: str) -> StepResult:
        sc_batch, ce_rows = self.draw_batches(alpha)
        result = self.accumulate_gradients(alpha, sc_batch, ce_rows, stage)
        if not math.isfinite(result.total_loss):
            raise NonFiniteError(f"non-finite loss {result.total_loss} at epoch {epoch} step {step}",
                                 epoch=epoch, step=step)
        params = self.trainable_params(stage)
        if self.cfg.grad_clip_norm > 0.0:
            clip_gradient_norm(params, self.cfg.grad_clip_norm)
        try:
            self.optimizer.step(params, lr)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} at epoch {epoch} step {step}", parameter=exc.parameter,
                                 epoch=epoch, step=step) from exc
        if self.prototypes is not None and any(p is self.prototypes.param for p in params):
            self.prototypes.renormalize()
        return result

    def accumulate_gradients(self, alpha: float, sc_batch: Optional[ScBatch],
                             ce_rows: Optional[np.ndarray], stage: str = STAGE_JOINT) -> StepResult:
        """Zero all gradients, then one forward/backward of the alpha-weighted objective"""
        self.model.zero_grad()
        if self.prototypes is not None:
            self.prototypes.param.zero_grad()
        use_feature, use_ce = sc_batch is not None, ce_rows is not None
        if not (use_feature or use_ce):
            raise ConfigurationError("a training step needs at least one branch batch")
        blocks = []
        if use_feature:
            blocks.append(sc_batch.features)
        if use_ce:
            blocks.append(self.dataset.features[ce_rows])
        inputs = blocks[0] if len(blocks) == 1 else np.vstack(blocks)
        features = self.model.forward_features(inputs)
        n_sc = sc_batch.size if sc_batch is not None else 0

        grad_blocks = []
        contrastive_value = ce_value = None
        if use_feature:
            contrastive_value, grad_sc = self._feature_branch(
                features[:n_sc], sc_batch.labels, sc_batch.view_ids, sc_batch.positive_mask, alpha)
            grad_blocks.append(grad_sc)
        if use_ce:
            logits = self.model.forward_classifier(features[n_sc:])
            ce_value, grad_logits = ce_loss(LogitsBatch(logits, self.dataset.labels[ce_rows]))
            grad_blocks.append(self.model.backward_classifier((1.0 - alpha) * grad_logits))

        total = alpha * (contrastive_value or 0.0) + (1.0 - alpha) * (ce_value or 0.0)
        if stage != STAGE_CLASSIFIER:
            grad = grad_blocks[0] if len(grad_blocks) == 1 else np.vstack(grad_blocks)
            self.model.backward_features(grad)
        return StepResult(contrastive_value, ce_value, total)

    # ---- epochs ------------------------------------------------------------

    def run_epoch(self, epoch: int) -> EpochRecord:
        operation_id = str(uuid.uuid4())
        stage = self.stage_of(epoch)
        alpha = self.alpha_at(epoch)
        lr = self.learning_rate_at(epoch)
        self.logger.debug(f"BEGIN epoch operation_id={operation_id} parent_id={self.report.run_id} "
                          f"epoch={epoch} stage={stage.name} alpha={alpha:.6f} lr={lr:.6g}")
        results = [self.train_step(epoch, step, alpha, lr, stage.name)
                   for step in range(self.steps_per_epoch)]

        def mean_of(values: List[Optional[float]]) -> Optional[float]:
            present = [v for v in values if v is not None]
            return float(np.mean(present)) if present else None

        record = EpochRecord(
            epoch=epoch, stage=stage.name, alpha=alpha, lr=lr,
            contrastive_loss=mean_of([r.contrastive_loss for r in results]),
            ce_loss=mean_of([r.ce_loss for r in results]),
            total_loss=float(np.mean([r.total_loss for r in results])))
        if (epoch + 1) % self.cfg.eval_every == 0 or epoch == self.cfg.epochs - 1:
            record.train_top1 = self._top1(self.dataset)
            if self.test_set is not None:
                record.test_top1 = self._top1(self.test_set)
        sample_rss()
        self.logger.debug(f"END epoch operation_id={operation_id} epoch={epoch} "
                          f"total_loss={record.total_loss:.6f} status=success")
        return record

    def _top1(self, dataset: Dataset) -> float:
        logits = self.model.predict_logits(dataset.features)
        return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))

    def run(self, resume_from: Optional[Union[str, Path]] = None,
            stop_after: Optional[int] = None) -> RunReport:
        """Train to the end, or pause once `stop_after` epochs are complete"""
        operation_id = str(uuid.uuid4())
        if resume_from is not None:
            self.checkpoint_load(resume_from)
        end_epoch = self.cfg.epochs if stop_after is None else min(stop_after, self.cfg.epochs)
        self.logger.info(f"BEGIN train operation_id={operation_id} run_id={self.report.run_id} "
                         f"loss={self.cfg.loss} epochs={self.cfg.epochs} two_stage={self.cfg.two_stage} "
                         f"start_epoch={self.next_epoch} steps_per_epoch={self.steps_per_epoch}")
        start = time.time()
        try:
            for epoch in range(self.next_epoch, end_epoch):
                self.report.epochs.append(self.run_epoch(epoch))
                self.next_epoch = epoch + 1
                if self.checkpoint_path is not None and (
                        self.next_epoch % self.cfg.checkpoint_every == 0
                        or self.next_epoch == end_epoch):
                    self.checkpoint_save(self.checkpoint_path)
        except Exception as exc:
            self.report.status = "error"
            self.logger.info(f"END train operation_id={operation_id} status=error "
                             f"epoch={self.next_epoch} error={exc}")
            raise
        self.report.wall_clock_seconds += time.time() - start
        if self.next_epoch < self.cfg.epochs:
            self.report.status = "paused"
            self.logger.info(f"END train operation_id={operation_id} epoch={self.next_epoch} status=paused")
            return self.report
        if self.test_set is not None:
            final = evaluate(self.model, self.test_set, class_counts=self.dataset.counts())
            self.report.final = final.to_dict()
            self.report.per_class_acc = list(final.per_class_acc)
        self.report.environment = MetricsCollector.collect_environment()
        self.report.status = "success"
        self.logger.info(f"END train operation_id={operation_id} run_id={self.report.run_id} "
                         f"elapsed={time.time() - start:.3f}s status=success")
        return self.report

    # ---- persistence ---------------------------------------------------------

    def _all_params(self) -> List[ParamTensor]:
        params = self.model.params()
        if self.prototypes is not None:
            params = params + self.prototypes.params()
        return params

    def checkpoint_save(self, path: Union[str, Path]) -> Path:
        arrays = {f"param/{p.name}": p.value for p in self._all_params()}
        arrays.update({f"velocity/{name}": v for name, v in self.optimizer.state_dict().items()})
        meta = {
            "next_epoch": self.next_epoch,
            "config": self.cfg.to_dict(),
            "model_config": self.model.cfg.to_dict(),
            "sc_sampler": _jsonable(self.sc_sampler.state_dict()),
            "ce_sampler": _jsonable(self.ce_sampler.state_dict()),
            "view_rng": _jsonable(self.view_rng.bit_generator.state),
            "report": self.report.to_dict(),
        }
        return write_checkpoint(path, arrays, meta)

    def checkpoint_load(self, path: Union[str, Path]) -> None:
        """Validate everything first; nothing is applied unless the whole file checks out"""
        arrays, meta = read_checkpoint(path)
        for key in ("next_epoch", "config", "model_config", "sc_sampler", "ce_sampler",
                    "view_rng", "report"):
            if key not in meta:
                raise CheckpointError(f"{path}: missing {key}", field=key)
        if meta["config"] != _jsonable(self.cfg.to_dict()):
            raise CheckpointError(f"{path}: checkpoint was written by a different training config",
                                  field="config")
        if meta["model_config"] != _jsonable(self.model.cfg.to_dict()):
            raise CheckpointError(f"{path}: model configuration differs", field="model_config")
        params = self._all_params()
        for p in params:
            stored = arrays.get(f"param/{p.name}")
            if stored is None:
                raise CheckpointError(f"{path}: missing parameter {p.name}", field=f"param/{p.name}")
            if stored.shape != p.shape:
                raise CheckpointError(f"{path}: {p.name} has shape {stored.shape}, expected {p.shape}",
                                      field=f"param/{p.name}")
        names = {p.name for p in params}
        velocities = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
        unknown = sorted(set(velocities) - names)
        if unknown:
            raise CheckpointError(f"{path}: velocity for unknown parameter {unknown[0]}",
                                  field=f"velocity/{unknown[0]}")
        next_epoch = int(meta["next_epoch"])
        if not 0 <= next_epoch <= self.cfg.epochs:
            raise CheckpointError(f"{path}: epoch counter {next_epoch} out of range", field="next_epoch")
        report = RunReport.from_dict(meta["report"])

        for p in params:
            p.value = np.array(arrays[f"param/{p.name}"], dtype=np.float64)
            p.grad = np.zeros_like(p.value)
        self.optimizer.load_state_dict(velocities)
        self.sc_sampler.load_state_dict(meta["sc_sampler"])
        self.ce_sampler.load_state_dict(meta["ce_sampler"])
        self.view_rng.bit_generator.state = meta["view_rng"]
        self.report = report
        self.next_epoch = next_epoch
        self.logger.info(f"resumed from {path} at epoch {next_epoch}")


def _jsonable(value: Any) -> Any:
    """Round-trip through JSON so in-memory states compare equal to stored ones"""
    return json.loads(json.dumps(value))


def train(model: HybridNetwork, prototypes: Optional[PrototypeBank], dataset: Dataset,
          cfg: TrainConfig, test_set: Optional[Dataset] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          resume_from: Optional[Union[str, Path]] = None,
          data_config: Optional[DataConfig] = None) -> RunReport:
    trainer = HybridTrainer(model, prototypes, dataset, cfg, test_set, checkpoint_path, data_config)
    return trainer.run(resume_from)


def train_two_stage(model: HybridNetwork, prototypes: Optional[PrototypeBank], dataset: Dataset,
                    cfg: TrainConfig, test_set: Optional[Dataset] = None,
                    checkpoint_path: Optional[Union[str, Path]] = None,
                    resume_from: Optional[Union[str, Path]] = None,
                    data_config: Optional[DataConfig] = None) -> RunReport:
    """Features with the contrastive loss first, then a classifier on frozen features"""
    if not cfg.two_stage:
        raise ConfigurationError("train_two_stage needs two_stage: true in the config")
    if cfg.loss == "ce-only":
        raise ConfigurationError("two-stage training needs a feature-branch loss")
    return train(model, prototypes, dataset, cfg, test_set, checkpoint_path, resume_from, data_config)


def prepare_datasets(exp: ExperimentConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Build (long-tailed train set, balanced test set) from the data section"""
    data = exp.data
    spec = LongTailSpec(data.num_classes, data.n_max, data.beta)
    if data.source == "synthetic":
        return synth_gaussian_longtail(spec, data.input_dim, data.class_sep, exp.data_seed,
                                       data.test_per_class, data.noise_std)
    full = load_cifar_batches(data.train_paths, data.num_classes)
    train_set = subsample_longtail(full, spec, named_rng(exp.data_seed, "data.subsample"))
    test_set = load_cifar_batches(data.test_paths, data.num_classes) if data.test_paths else None
    return train_set, test_set


def run_training(exp: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                 resume_from: Optional[Union[str, Path]] = None) -> RunReport:
    """Data, model, training and artifacts for one configured run"""
    train_set, test_set = prepare_datasets(exp)
    model_cfg = exp.train.model_config(train_set.input_dim, train_set.num_classes)
    model = HybridNetwork(model_cfg, seed=exp.train.seed)
    prototypes = model.make_prototypes() if exp.train.uses_prototypes else None
    checkpoint_path = Path(out_dir) / "checkpoint.npz" if out_dir is not None else None
    runner = train_two_stage if exp.train.two_stage else train
    report = runner(model, prototypes, train_set, exp.train, test_set, checkpoint_path,
                    resume_from, exp.data)
    if out_dir is not None:
        MetricsCollector(out_dir).write_run(report)
    return report


def restore_from_checkpoint(path: Union[str, Path]) -> Tuple[HybridNetwork, Optional[PrototypeBank],
                                                             ExperimentConfig]:
    """Rebuild the network, prototype bank and experiment config stored in a checkpoint"""
    arrays, meta = read_checkpoint(path)
    try:
        train_cfg = TrainConfig.from_dict(meta["config"])
        data_values = (meta.get("report") or {}).get("data_config") or {}
        exp = ExperimentConfig(DataConfig.from_dict(data_values), train_cfg)
        model = HybridNetwork(ModelConfig(**meta["model_config"]), seed=train_cfg.seed)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete configuration ({exc})", field="config") from exc
    prototypes = model.make_prototypes() if train_cfg.uses_prototypes else None
    params = model.params() + (prototypes.params() if prototypes is not None else [])
    for p in params:
        stored = arrays.get(f"param/{p.name}")
        if stored is None or stored.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {p.name} missing or mis-shaped",
                                  field=f"param/{p.name}")
    for p in params:
        p.value = np.array(arrays[f"param/{p.name}"], dtype=np.float64)
    return model, prototypes, exp
