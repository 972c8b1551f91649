"""
Long-tailed datasets: class-count profiles, synthetic Gaussian mixtures,
CIFAR-10 binary ingestion, view perturbation and the samplers that feed the
contrastive and classifier branches.
"""

import logging
import math
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import BatchCompositionError, ConfigurationError, DataFormatError
from .numerics import Matrix, as_matrix, l2_normalize_rows, named_rng

logger = logging.getLogger("LongTailData")

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD_BYTES = 1 + CIFAR_IMAGE_BYTES
SAMPLER_KINDS = ("random", "balanced")

RngLike = Union[int, np.random.Generator]


def _as_rng(seed_or_rng: RngLike, stream: str) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return named_rng(int(seed_or_rng), stream)


@dataclass(frozen=True)
class LongTailSpec:
    """Exponential class-size profile: n_c = round(n_max * beta^(-c/(C-1)))"""
    num_classes: int
    n_max: int
    beta: float

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.n_max < 1:
            raise ConfigurationError(f"n_max must be >= 1, got {self.n_max}")
        if not self.beta >= 1.0:
            raise ConfigurationError(f"imbalance ratio beta must be >= 1, got {self.beta}")


def class_counts(spec: LongTailSpec) -> List[int]:
    if spec.num_classes == 1:
        return [spec.n_max]
    counts = []
    for c in range(spec.num_classes):
        exact = spec.n_max * spec.beta ** (-c / (spec.num_classes - 1))
        counts.append(int(math.floor(exact + 0.5)))
    if counts[-1] < 1:
        raise ConfigurationError(
            f"class {spec.num_classes - 1} would have {counts[-1]} samples "
            f"(n_max={spec.n_max}, beta={spec.beta})")
    return counts


@dataclass
class Dataset:
    """Immutable feature matrix with integer labels"""
    features: Matrix
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    _class_indices: Optional[List[np.ndarray]] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.features = np.array(as_matrix(self.features, "features"), dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ConfigurationError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels outside [0, {self.num_classes})")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_indices(self) -> List[np.ndarray]:
        if self._class_indices is None:
            self._class_indices = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]
        return self._class_indices

    def counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes,
                       name or self.name)

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write `label,f0..f{D-1}` with one row per sample"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.features, columns=[f"f{i}" for i in range(self.input_dim)])
        frame.insert(0, "label", self.labels)
        frame.to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], num_classes: Optional[int] = None,
                 name: Optional[str] = None) -> "Dataset":
        frame = pd.read_csv(path, float_precision="round_trip")
        if "label" not in frame.columns:
            raise DataFormatError(f"{path}: missing 'label' column")
        labels = frame.pop("label").to_numpy(dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 1
        return cls(frame.to_numpy(dtype=np.float64), labels, num_classes, name or Path(path).stem)


def synth_gaussian_longtail(spec: LongTailSpec, input_dim: int, class_sep: float, seed: int,
                            test_per_class: int = 200,
                            noise_std: float = 1.0) -> Tuple[Dataset, Dataset]:
    """Isotropic Gaussian per class with a seed-determined mean of norm class_sep.

    Returns (long-tailed train set, balanced test set).
    """
    if not class_sep > 0.0:
        raise ConfigurationError(f"class_sep must be positive, got {class_sep}")
    if input_dim < 1 or test_per_class < 0:
        raise ConfigurationError("input_dim must be positive and test_per_class non-negative")
    counts = class_counts(spec)
    rng = named_rng(seed, "data.synthetic")
    means = l2_normalize_rows(rng.normal(size=(spec.num_classes, input_dim)), "class mean") * class_sep

    def draw(per_class: Sequence[int]) -> Tuple[Matrix, np.ndarray]:
        blocks, labels = [], []
        for c, n in enumerate(per_class):
            blocks.append(means[c] + noise_std * rng.normal(size=(n, input_dim)))
            labels.append(np.full(n, c, dtype=np.int64))
        return np.vstack(blocks), np.concatenate(labels)

    train_x, train_y = draw(counts)
    test_x, test_y = draw([test_per_class] * spec.num_classes)
    train = Dataset(train_x, train_y, spec.num_classes, "synthetic-train")
    test = Dataset(test_x, test_y, spec.num_classes, "synthetic-test")
    logger.info(f"synthetic long-tail dataset seed={seed} counts={counts} test_per_class={test_per_class}")
    return train, test


def load_cifar_binary(path: Union[str, Path], num_classes: int = 10) -> Dataset:
    """Parse CIFAR-10 binary records: 1 label byte + 3072 pixel bytes, pixels scaled to [0, 1]"""
    operation_id = str(uuid.uuid4())
    path = Path(path)
    logger.info(f"BEGIN load_cifar_binary operation_id={operation_id} path={path}")
    start = time.time()
    raw = path.read_bytes()
    if not raw:
        raise DataFormatError(f"{path}: empty file", offset=0)
    remainder = len(raw) % CIFAR_RECORD_BYTES
    if remainder:
        offset = len(raw) - remainder
        raise DataFormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"({remainder} of {CIFAR_RECORD_BYTES} bytes)", offset=offset)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        offset = int(bad[0]) * CIFAR_RECORD_BYTES
        raise DataFormatError(
            f"{path}: label byte {int(labels[bad[0]])} >= {num_classes} at byte offset {offset}",
            offset=offset)
    features = records[:, 1:].astype(np.float64) / 255.0
    dataset = Dataset(features, labels, num_classes, path.stem)
    logger.info(f"END load_cifar_binary operation_id={operation_id} rows={dataset.size} "
                f"elapsed={time.time() - start:.3f}s")
    return dataset


def load_cifar_batches(paths: Sequence[Union[str, Path]], num_classes: int = 10) -> Dataset:
    parts = [load_cifar_binary(p, num_classes) for p in paths]
    if not parts:
        raise ConfigurationError("no CIFAR batch files given")
    return Dataset(np.vstack([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]), num_classes, "cifar")


def subsample_longtail(ds: Dataset, spec: LongTailSpec, seed: RngLike = 0) -> Dataset:
    """Keep the first n_c of a seeded shuffle of each class; row order is preserved"""
    if spec.num_classes != ds.num_classes:
        raise ConfigurationError(
            f"profile has {spec.num_classes} classes, dataset has {ds.num_classes}")
    rng = _as_rng(seed, "data.subsample")
    keep = []
    for c, n_c in enumerate(class_counts(spec)):
        available = ds.class_indices[c]
        if available.size < n_c:
            raise ConfigurationError(f"class {c} has {available.size} samples, {n_c} requested")
        keep.append(rng.permutation(available)[:n_c])
    return ds.subset(np.sort(np.concatenate(keep)), f"{ds.name}-lt{spec.beta:g}")


@dataclass
class ViewPair:
    """Two perturbed copies of every source row, stacked view 0 first"""
    features: Matrix
    view_ids: np.ndarray
    source_rows: np.ndarray


def make_views(x_rows: Matrix, noise_sigma: float, seed: RngLike = 0) -> ViewPair:
    """Additive Gaussian perturbation stands in for image augmentation"""
    if not noise_sigma >= 0.0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    x_rows = as_matrix(x_rows, "view source")
    rng = _as_rng(seed, "data.views")
    n = x_rows.shape[0]
    first = x_rows + noise_sigma * rng.normal(size=x_rows.shape)
    second = x_rows + noise_sigma * rng.normal(size=x_rows.shape)
    return ViewPair(np.vstack([first, second]),
                    np.repeat(np.array([0, 1], dtype=np.int64), n),
                    np.tile(np.arange(n, dtype=np.int64), 2))


class RandomSampler:
    """Uniform without replacement within an epoch; reshuffles when exhausted"""
    kind = "random"

    def __init__(self, dataset: Dataset, rng: np.random.Generator):
        if dataset.size == 0:
            raise ConfigurationError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def draw(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        taken = []
        needed = batch_size
        while needed:
            if self._cursor >= self._order.size:
                self._order = self.rng.permutation(self.dataset.size)
                self._cursor = 0
            chunk = self._order[self._cursor:self._cursor + needed]
            self._cursor += chunk.size
            needed -= chunk.size
            taken.append(chunk)
        return np.concatenate(taken)

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "rng": self.rng.bit_generator.state,
                "order": self._order.tolist(), "cursor": self._cursor}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._cursor = int(state["cursor"])


class ClassBalancedSampler:
    """Class drawn uniformly, then an instance uniformly within it (with replacement)"""
    kind = "balanced"

    def __init__(self, dataset: Dataset, rng: np.random.Generator):
        empty = [c for c, idx in enumerate(dataset.class_indices) if idx.size == 0]
        if empty:
            raise ConfigurationError(f"class-balanced sampling over empty class {empty[0]}")
        self.dataset = dataset
        self.rng = rng
        self._sizes = np.array([idx.size for idx in dataset.class_indices], dtype=np.int64)

    def draw(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        classes = self.rng.integers(0, self.dataset.num_classes, size=batch_size)
        offsets = self.rng.integers(0, self._sizes[classes])
        return np.array([self.dataset.class_indices[c][o] for c, o in zip(classes, offsets)],
                        dtype=np.int64)

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state["rng"]


Sampler = Union[RandomSampler, ClassBalancedSampler]


def make_sampler(kind: str, dataset: Dataset, seed: RngLike) -> Sampler:
    if kind == "random":
        return RandomSampler(dataset, _as_rng(seed, "sampler.random"))
    if kind == "balanced":
        return ClassBalancedSampler(dataset, _as_rng(seed, "sampler.balanced"))
    raise ConfigurationError(f"unknown sampler {kind!r}; expected one of {SAMPLER_KINDS}")


def sample_random(ds: Dataset, batch_size: int, seed: RngLike = 0) -> np.ndarray:
    return make_sampler("random", ds, seed).draw(batch_size)


def sample_class_balanced(ds: Dataset, batch_size: int, seed: RngLike = 0) -> np.ndarray:
    return make_sampler("balanced", ds, seed).draw(batch_size)


@dataclass
class ScBatch:
    """Two views per source sample plus the positive set of every anchor"""
    features: Matrix
    labels: np.ndarray
    view_ids: np.ndarray
    source_ids: np.ndarray
    positive_mask: np.ndarray

    def __post_init__(self):
        counts = self.positive_mask.sum(axis=1)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise BatchCompositionError(
                f"anchor {int(empty[0])} has no positive in the SC batch", anchor=int(empty[0]))

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def positive_counts(self) -> np.ndarray:
        return self.positive_mask.sum(axis=1)


def compose_sc_batch(ds: Dataset, sampler: Sampler, batch_size: int, noise_sigma: float,
                     positives_per_anchor: Optional[int] = None,
                     seed: RngLike = 0) -> ScBatch:
    """Draw batch_size // 2 sources, two views each.

    Every anchor's positives are the other same-class rows; with a finite cap
    the sibling view is always kept and the rest are a seeded random subset.
    """
    if batch_size < 2:
        raise ConfigurationError(f"an SC batch needs at least 2 rows, got {batch_size}")
    if positives_per_anchor is not None and positives_per_anchor < 1:
        raise ConfigurationError(f"positives_per_anchor must be >= 1, got {positives_per_anchor}")
    rng = _as_rng(seed, "data.sc_batch")
    n_sources = batch_size // 2
    sources = sampler.draw(n_sources)
    views = make_views(ds.features[sources], noise_sigma, rng)
    labels = ds.labels[sources][views.source_rows]
    n = labels.size

    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if positives_per_anchor is None:
        mask = same
    else:
        mask = np.zeros_like(same)
        for anchor in range(n):
            sibling = (anchor + n_sources) % n
            others = np.flatnonzero(same[anchor])
            others = others[others != sibling]
            chosen = rng.permutation(others)[:positives_per_anchor - 1]
            mask[anchor, sibling] = True
            mask[anchor, chosen] = True
    return ScBatch(views.features, labels, views.view_ids, sources[views.source_rows], mask)
