"""
Loss functions of the hybrid network and the curriculum that mixes them.

Every loss returns its value together with analytic gradients. Contrastive
gradients are returned in ambient coordinates; keeping z on the sphere is the
job of the normalization layer's backward pass.

PSC / MPSC note: the denominator runs over negative classes only, so the
positive prototype never appears there and the loss can go below zero.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import BatchCompositionError, ConfigurationError, ScheduleRangeError
from .numerics import Matrix, as_matrix

UNIT_NORM_TOLERANCE = 1e-6
AFFINITY_MODES = ("uniform", "softmax")
SCHEDULE_KINDS = ("parabolic", "linear", "constant")


def _as_labels(labels, n_rows: int, num_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise ConfigurationError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ConfigurationError("labels must be integer class ids")
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ConfigurationError(f"negative label {int(labels.min())}")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ConfigurationError(f"label {int(labels.max())} out of range for {num_classes} classes")
    return labels


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0 or not math.isfinite(tau):
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return tau


@dataclass
class EmbeddingBatch:
    """Unit-norm contrastive embeddings with class labels.

    `positive_mask[i, j]` marks j as a positive of anchor i. When omitted it is
    every other row sharing the anchor's label. `check_norms=False` lets the
    finite-difference oracle evaluate the losses off the sphere.
    """
    z: Matrix
    labels: np.ndarray
    view_ids: Optional[np.ndarray] = None
    positive_mask: Optional[np.ndarray] = None
    check_norms: bool = True

    def __post_init__(self):
        self.z = as_matrix(self.z, "z")
        n = self.z.shape[0]
        if n < 1:
            raise ConfigurationError("an embedding batch needs at least one row")
        self.labels = _as_labels(self.labels, n)
        if self.view_ids is not None:
            self.view_ids = np.asarray(self.view_ids, dtype=np.int64)
        if self.check_norms:
            norms = np.linalg.norm(self.z, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
            if bad.size:
                raise ConfigurationError(
                    f"embedding row {int(bad[0])} has norm {norms[bad[0]]:.9f}, expected 1")
        if self.positive_mask is not None:
            mask = np.asarray(self.positive_mask, dtype=bool)
            if mask.shape != (n, n):
                raise ConfigurationError(f"positive_mask shape {mask.shape} != {(n, n)}")
            if np.any(np.diag(mask)):
                raise ConfigurationError("an anchor cannot be its own positive")
            same = self.labels[:, None] == self.labels[None, :]
            if np.any(mask & ~same):
                raise ConfigurationError("positive_mask pairs rows of different classes")
            self.positive_mask = mask

    @property
    def size(self) -> int:
        return self.z.shape[0]

    def positives(self) -> np.ndarray:
        if self.positive_mask is not None:
            return self.positive_mask
        mask = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(mask, False)
        return mask


@dataclass
class LogitsBatch:
    s: Matrix
    labels: np.ndarray

    def __post_init__(self):
        self.s = as_matrix(self.s, "logits")
        if self.s.shape[0] < 1:
            raise ConfigurationError("a logits batch needs at least one row")
        self.labels = _as_labels(self.labels, self.s.shape[0], self.s.shape[1])


@dataclass(frozen=True)
class CurriculumSchedule:
    """Epoch -> alpha. kind is parabolic, linear or constant (with alpha0)."""
    kind: str = "parabolic"
    t_max: int = 200
    alpha0: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if int(self.t_max) < 1:
            raise ConfigurationError(f"t_max must be positive, got {self.t_max}")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigurationError(f"constant alpha must be in [0, 1], got {self.alpha0}")

    @classmethod
    def parse(cls, text: str, t_max: int) -> "CurriculumSchedule":
        """Parse 'parabolic', 'linear' or 'constant:X'"""
        text = str(text).strip().lower()
        if text.startswith("constant"):
            _, _, raw = text.partition(":")
            try:
                alpha0 = float(raw) if raw else 0.5
            except ValueError as exc:
                raise ConfigurationError(f"bad constant alpha in {text!r}") from exc
            return cls("constant", t_max, alpha0)
        return cls(text, t_max)

    def describe(self) -> str:
        return f"constant:{self.alpha0}" if self.kind == "constant" else self.kind


def curriculum_alpha(schedule: CurriculumSchedule, epoch: int) -> float:
    if epoch < 0 or epoch > schedule.t_max:
        raise ScheduleRangeError(f"epoch {epoch} outside [0, {schedule.t_max}]")
    if schedule.kind == "constant":
        return float(schedule.alpha0)
    ratio = epoch / schedule.t_max
    if schedule.kind == "parabolic":
        return 1.0 - ratio ** 2
    return 1.0 - ratio


def hybrid_loss(contrastive_loss: float, ce_loss_value: float, alpha: float) -> float:
    """alpha * L_contrastive + (1 - alpha) * L_CE"""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * contrastive_loss + (1.0 - alpha) * ce_loss_value


def ce_loss(batch: LogitsBatch) -> Tuple[float, Matrix]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / N"""
    s, labels = batch.s, batch.labels
    n = s.shape[0]
    rows = np.arange(n)
    shifted = s - s.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_prob[rows, labels].mean())
    grad = np.exp(log_prob)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sc_loss(batch: EmbeddingBatch, tau: float, reduction: str = "sum") -> Tuple[float, Matrix]:
    """Supervised contrastive loss summed over anchors.

    Per anchor: mean over its positives of -log(exp(z_i.z_j/tau) / sum_{k!=i} exp(z_i.z_k/tau)).
    reduction='mean' divides value and gradient by the batch size.
    """
    tau = _check_tau(tau)
    if reduction not in ("sum", "mean"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    z = batch.z
    n = z.shape[0]
    positives = batch.positives()
    counts = positives.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        anchor = int(empty[0])
        raise BatchCompositionError(
            f"anchor {anchor} (label {int(batch.labels[anchor])}) has no positive in the batch",
            anchor=anchor)

    sim = z @ z.T / tau
    off_diag = ~np.eye(n, dtype=bool)
    row_max = np.where(off_diag, sim, -np.inf).max(axis=1, keepdims=True)
    exp_sim = np.where(off_diag, np.exp(sim - row_max), 0.0)
    denom = exp_sim.sum(axis=1, keepdims=True)
    log_denom = (row_max + np.log(denom))[:, 0]

    pos_weight = positives / counts[:, None]
    per_anchor = log_denom - (pos_weight * sim).sum(axis=1)
    loss = float(per_anchor.sum())

    g_sim = exp_sim / denom - pos_weight
    grad_z = (g_sim + g_sim.T) @ z / tau
    if reduction == "mean":
        return loss / n, grad_z / n
    return loss, grad_z


def _psc_affinity_grad(s: Matrix, labels: np.ndarray) -> Tuple[np.ndarray, Matrix]:
    """Per-sample loss and d loss / d s for s = z.p / tau (positive gets -1)"""
    n = s.shape[0]
    rows = np.arange(n)
    is_pos = np.zeros_like(s, dtype=bool)
    is_pos[rows, labels] = True
    neg_max = np.where(is_pos, -np.inf, s).max(axis=1, keepdims=True)
    exp_neg = np.where(is_pos, 0.0, np.exp(s - neg_max))
    denom = exp_neg.sum(axis=1, keepdims=True)
    per_sample = (neg_max + np.log(denom))[:, 0] - s[rows, labels]
    g_s = exp_neg / denom
    g_s[rows, labels] = -1.0
    return per_sample, g_s


def _check_prototypes(prototypes: Matrix, batch: EmbeddingBatch, per_class: int) -> Tuple[Matrix, int]:
    prototypes = as_matrix(prototypes, "prototypes")
    if per_class < 1:
        raise ConfigurationError(f"prototypes per class must be >= 1, got {per_class}")
    if prototypes.shape[0] % per_class:
        raise ConfigurationError(
            f"{prototypes.shape[0]} prototype rows is not a multiple of M={per_class}")
    num_classes = prototypes.shape[0] // per_class
    if num_classes < 2:
        raise ConfigurationError("prototype losses need at least 2 classes (no negatives otherwise)")
    if prototypes.shape[1] != batch.z.shape[1]:
        raise ConfigurationError(
            f"prototype dim {prototypes.shape[1]} != embedding dim {batch.z.shape[1]}")
    if batch.labels.max() >= num_classes:
        raise ConfigurationError(
            f"label {int(batch.labels.max())} out of range for {num_classes} classes")
    return prototypes, num_classes


def psc_loss(batch: EmbeddingBatch, prototypes: Matrix, tau: float) -> Tuple[float, Matrix, Matrix]:
    """Prototypical supervised contrastive loss, mean over the batch.

    -z.p_y/tau + log sum_{j != y} exp(z.p_j/tau); returns (loss, grad_z, grad_prototypes).
    """
    tau = _check_tau(tau)
    prototypes, _ = _check_prototypes(prototypes, batch, 1)
    z = batch.z
    n = z.shape[0]
    s = z @ prototypes.T / tau
    per_sample, g_s = _psc_affinity_grad(s, batch.labels)
    g_s = g_s / n
    return float(per_sample.mean()), g_s @ prototypes / tau, g_s.T @ z / tau


def psc_affinity_gradients(batch: EmbeddingBatch, prototypes: Matrix,
                           tau: float) -> Tuple[np.ndarray, Matrix]:
    """Per-sample gradient of the PSC loss w.r.t. the cosine affinities z_i.p_j.

    Returns (positive, negative): positive[i] is the derivative w.r.t. the
    affinity to the own-class prototype and is always -1/tau; negative[i, c]
    is exp(s_c) / sum_{y != y_i} exp(s_y) / tau (zero in the own-class column).
    """
    tau = _check_tau(tau)
    prototypes, _ = _check_prototypes(prototypes, batch, 1)
    s = batch.z @ prototypes.T / tau
    _, g_s = _psc_affinity_grad(s, batch.labels)
    rows = np.arange(s.shape[0])
    positive = g_s[rows, batch.labels] / tau
    negative = g_s.copy()
    negative[rows, batch.labels] = 0.0
    return positive, negative / tau


def log_affinity_weights(own_scores: Matrix, mode: str) -> Matrix:
    """log w_{i,k}, computed in log space so tiny softmax weights stay finite"""
    if mode == "uniform":
        m = own_scores.shape[1]
        return np.full_like(own_scores, -np.log(m))
    if mode == "softmax":
        shifted = own_scores - own_scores.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    raise ConfigurationError(f"unknown affinity mode {mode!r}; expected one of {AFFINITY_MODES}")


def affinity_weights(own_scores: Matrix, mode: str) -> Matrix:
    """w_{i,k} over the M prototypes of the anchor's class; rows sum to one"""
    return np.exp(log_affinity_weights(own_scores, mode))


def mpsc_loss(batch: EmbeddingBatch, prototypes: Matrix, per_class: int, tau: float,
              affinity_mode: str = "uniform",
              weights: Optional[Matrix] = None) -> Tuple[float, Matrix, Matrix]:
    """Multi-prototype PSC loss, mean over the batch.

    Prototype row j*M + k is prototype k of class j. For anchor i:
    -(1/M) sum_k log[w_ik exp(s_{i,y,k}) / sum_{j != y} sum_m exp(s_{i,j,m})].
    w is treated as a constant in the backward pass; passing `weights`
    pins it explicitly (N x M) instead of deriving it from affinity_mode.
    """
    tau = _check_tau(tau)
    prototypes, num_classes = _check_prototypes(prototypes, batch, per_class)
    z, labels = batch.z, batch.labels
    n, m = z.shape[0], per_class
    rows = np.arange(n)

    s = z @ prototypes.T / tau
    own_cols = labels[:, None] * m + np.arange(m)[None, :]
    own = s[rows[:, None], own_cols]
    is_own = np.repeat(np.arange(num_classes), m)[None, :] == labels[:, None]

    neg_max = np.where(is_own, -np.inf, s).max(axis=1, keepdims=True)
    exp_neg = np.where(is_own, 0.0, np.exp(s - neg_max))
    denom = exp_neg.sum(axis=1, keepdims=True)
    log_denom = (neg_max + np.log(denom))[:, 0]

    if weights is None:
        log_weights = log_affinity_weights(own, affinity_mode)
    else:
        weights = as_matrix(weights, "weights")
        if weights.shape != own.shape:
            raise ConfigurationError(f"weights shape {weights.shape} != {own.shape}")
        if np.any(weights <= 0.0):
            raise ConfigurationError("affinity weights must be strictly positive")
        log_weights = np.log(weights)
    per_sample = -log_weights.mean(axis=1) - own.mean(axis=1) + log_denom

    g_s = exp_neg / denom
    g_s[rows[:, None], own_cols] = -1.0 / m
    g_s = g_s / n
    return float(per_sample.mean()), g_s @ prototypes / tau, g_s.T @ z / tau


def reference_sc_loss(z: Matrix, labels, tau: float,
                      positive_mask: Optional[np.ndarray] = None) -> float:
    """Literal double loop over the SC formula (summed over anchors)"""
    z = as_matrix(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        if positive_mask is None:
            positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        else:
            positives = [j for j in range(n) if positive_mask[i, j]]
        denominator = sum(math.exp(float(z[i] @ z[k]) / tau) for k in range(n) if k != i)
        term = 0.0
        for j in positives:
            term += -math.log(math.exp(float(z[i] @ z[j]) / tau) / denominator)
        total += term / len(positives)
    return total


def reference_psc_loss(z: Matrix, labels, prototypes: Matrix, tau: float) -> float:
    z, prototypes = as_matrix(z), as_matrix(prototypes)
    total = 0.0
    for i, y in enumerate(labels):
        denominator = sum(math.exp(float(z[i] @ prototypes[j]) / tau)
                          for j in range(prototypes.shape[0]) if j != y)
        total += -float(z[i] @ prototypes[y]) / tau + math.log(denominator)
    return total / z.shape[0]


def reference_mpsc_loss(z: Matrix, labels, prototypes: Matrix, per_class: int, tau: float,
                        affinity_mode: str = "uniform") -> float:
    z, prototypes = as_matrix(z), as_matrix(prototypes)
    num_classes = prototypes.shape[0] // per_class
    total = 0.0
    for i, y in enumerate(labels):
        own = [float(z[i] @ prototypes[y * per_class + k]) / tau for k in range(per_class)]
        if affinity_mode == "uniform":
            weights = [1.0 / per_class] * per_class
        else:
            top = max(own)
            exps = [math.exp(o - top) for o in own]
            weights = [e / sum(exps) for e in exps]
        denominator = 0.0
        for j in range(num_classes):
            if j == y:
                continue
            for m in range(per_class):
                denominator += math.exp(float(z[i] @ prototypes[j * per_class + m]) / tau)
        term = 0.0
        for k in range(per_class):
            term += math.log(weights[k] * math.exp(own[k]) / denominator)
        total += -term / per_class
    return total / z.shape[0]


def mpsc_affinity_weights(batch: EmbeddingBatch, prototypes: Matrix, per_class: int,
                          tau: float, affinity_mode: str = "uniform") -> Matrix:
    """The N x M affinity weights mpsc_loss would use at this point"""
    tau = _check_tau(tau)
    prototypes, _ = _check_prototypes(prototypes, batch, per_class)
    rows = np.arange(batch.size)
    own_cols = batch.labels[:, None] * per_class + np.arange(per_class)[None, :]
    s = batch.z @ prototypes.T / tau
    return affinity_weights(s[rows[:, None], own_cols], affinity_mode)
