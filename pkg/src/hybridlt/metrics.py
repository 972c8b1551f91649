"""
Evaluation metrics and report writing.

EvalReport covers top-1, per-class and head/medium/tail accuracy plus two
feature-geometry diagnostics on the unit sphere. MetricsCollector writes run
artifacts (JSON report, per-epoch CSV, plot-data files) under one directory.
"""

import json
import logging
import os
import platform
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil

from .errors import ConfigurationError
from .numerics import NORM_EPSILON, Matrix, as_matrix

logger = logging.getLogger("MetricsCollector")

EPOCH_COLUMNS = ["epoch", "stage", "alpha", "lr", "contrastive_loss", "ce_loss", "total_loss",
                 "train_top1", "test_top1"]
PLOT_SERIES = {"alpha": "alpha", "lr": "lr", "train_top1": "train_top1", "test_top1": "test_top1"}

_peak_rss_bytes = 0


def sample_rss() -> int:
    """Current resident set size of this process; also raises the running peak"""
    global _peak_rss_bytes
    rss = psutil.Process(os.getpid()).memory_info().rss
    _peak_rss_bytes = max(_peak_rss_bytes, rss)
    return rss


def peak_rss() -> int:
    """Largest resident set size seen by sample_rss so far in this process"""
    return _peak_rss_bytes


@dataclass
class EvalReport:
    top1: float
    per_class_acc: List[float]
    per_class_count: List[int]
    head_acc: float
    medium_acc: float
    tail_acc: float
    intra_class_compactness: float
    inter_class_separability: float
    num_samples: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def shot_groups(class_counts: Sequence[int]) -> Tuple[List[int], List[int], List[int]]:
    """Split classes into head / medium / tail thirds by training count (ties by class id)"""
    num_classes = len(class_counts)
    order = sorted(range(num_classes), key=lambda c: (-class_counts[c], c))
    third = max(1, num_classes // 3)
    head, tail = order[:third], order[num_classes - third:]
    medium = order[third:num_classes - third]
    return sorted(head), sorted(medium), sorted(tail)


def feature_geometry(features: Matrix, labels: np.ndarray, num_classes: int) -> Tuple[float, float]:
    """(mean cosine to own class centroid, mean pairwise cosine distance between centroids)"""
    features = as_matrix(features, "features")
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    unit = np.where(norms > NORM_EPSILON, features / np.maximum(norms, NORM_EPSILON), 0.0)
    present = [c for c in range(num_classes) if np.any(labels == c)]
    centroids = np.zeros((num_classes, unit.shape[1]))
    for c in present:
        mean = unit[labels == c].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > NORM_EPSILON:
            centroids[c] = mean / norm
    compactness = float(np.mean(np.sum(unit * centroids[labels], axis=1)))
    if len(present) < 2:
        return compactness, 0.0
    cos = centroids[present] @ centroids[present].T
    upper = np.triu_indices(len(present), k=1)
    separability = float(np.mean(1.0 - cos[upper]))
    return compactness, separability


def evaluate_predictions(logits: Matrix, labels: np.ndarray, num_classes: int,
                         class_counts: Optional[Sequence[int]] = None,
                         geometry_features: Optional[Matrix] = None) -> EvalReport:
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigurationError("cannot evaluate on an empty test set")
    predictions = np.argmax(logits, axis=1)
    correct = predictions == labels
    per_class_count = np.bincount(labels, minlength=num_classes)
    per_class_correct = np.bincount(labels[correct], minlength=num_classes)
    per_class_acc = np.where(per_class_count > 0,
                             per_class_correct / np.maximum(per_class_count, 1), 0.0)
    counts = list(class_counts) if class_counts is not None else [num_classes - c for c in range(num_classes)]
    head, medium, tail = shot_groups(counts)

    def group_acc(group: List[int]) -> float:
        total = per_class_count[group].sum()
        return float(per_class_correct[group].sum() / total) if total else 0.0

    compactness, separability = (0.0, 0.0)
    if geometry_features is not None:
        compactness, separability = feature_geometry(geometry_features, labels, num_classes)
    return EvalReport(
        top1=float(correct.mean()),
        per_class_acc=[float(a) for a in per_class_acc],
        per_class_count=[int(n) for n in per_class_count],
        head_acc=group_acc(head),
        medium_acc=group_acc(medium),
        tail_acc=group_acc(tail),
        intra_class_compactness=compactness,
        inter_class_separability=separability,
        num_samples=int(labels.size),
    )


def evaluate(model, test_set, class_counts: Optional[Sequence[int]] = None,
             geometry_space: str = "features") -> EvalReport:
    """Argmax over classifier logits; geometry on normalized backbone features or embeddings"""
    if test_set.size == 0:
        raise ConfigurationError("cannot evaluate on an empty test set")
    features = model.forward_features(test_set.features)
    logits = model.forward_classifier(features)
    if geometry_space == "features":
        geometry = features
    elif geometry_space == "embedding":
        geometry = model.forward_contrastive(features)
    else:
        raise ConfigurationError(f"unknown geometry_space {geometry_space!r}")
    return evaluate_predictions(logits, test_set.labels, test_set.num_classes, class_counts, geometry)


class MetricsCollector:
    """Writes run artifacts below a single output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger("MetricsCollector")

    @staticmethod
    def collect_environment() -> Dict[str, Any]:
        """Host description; peak_rss_bytes is the running max over every RSS sample"""
        rss = sample_rss()
        return {
            "timestamp": datetime.now().isoformat(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "platform": platform.platform(),
            "cpu_count": psutil.cpu_count(logical=True),
            "rss_bytes": rss,
            "peak_rss_bytes": peak_rss(),
        }

    def write_json(self, payload: Dict[str, Any], filename: str) -> Path:
        path = self.out_dir / filename
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
        return path

    def write_run(self, report) -> Path:
        """report.json, epochs.csv and one `epoch,value` file per plotted series"""
        report_path = self.write_json(report.to_dict(), "report.json")
        frame = pd.DataFrame([asdict(record) for record in report.epochs], columns=EPOCH_COLUMNS)
        frame.to_csv(self.out_dir / "epochs.csv", index=False, float_format="%.17g")
        for filename, column in PLOT_SERIES.items():
            series = frame[["epoch", column]].dropna()
            series.to_csv(self.out_dir / f"{filename}.dat", index=False, header=["epoch", "value"],
                          float_format="%.17g")
        self.logger.info(f"run report written: {report_path}")
        return report_path

    def write_eval(self, report: EvalReport, filename: str = "eval.json") -> Path:
        path = self.write_json(report.to_dict(), filename)
        self.logger.info(f"eval report written: {path}")
        return path
