"""
Finite-difference gradient suite.

Every analytic gradient (dense layer, ReLU, L2 normalization, CE, SC, PSC and
both MPSC affinity modes) is compared against central differences over many
small random instances. The contrastive losses are also compared against their
literal double-loop reference implementations.
"""

import logging
import time
import uuid
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .losses import (EmbeddingBatch, LogitsBatch, ce_loss, mpsc_affinity_weights, mpsc_loss,
                     psc_loss, reference_mpsc_loss, reference_psc_loss, reference_sc_loss, sc_loss)
from .numerics import (DEFAULT_FD_STEP, DenseLayer, L2Normalize, ReLU, finite_diff_gradient,
                       l2_normalize_rows, max_relative_error, named_rng)

logger = logging.getLogger("GradCheck")

DEFAULT_TOLERANCE = 1e-4
MAX_CLASSES = 5
MAX_ROWS = 16
MAX_DIM = 8


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_rel_error: float
    max_value_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.max_value_error <= self.tolerance

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["passed"] = self.passed
        return values


# One instance -> (max relative gradient error, |value - reference value|)
InstanceCheck = Callable[[np.random.Generator, float], Tuple[float, float]]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return l2_normalize_rows(rng.normal(size=(n, d)), "random row")


def _tau(rng: np.random.Generator) -> float:
    return float(rng.uniform(0.1, 1.0))


def _paired_labels(rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Two views per source, so every anchor has at least one positive"""
    sources = int(rng.integers(1, MAX_ROWS // 2 + 1))
    base = rng.integers(0, num_classes, size=sources)
    return np.concatenate([base, base])


def check_dense(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    n, d_in, d_out = (int(v) for v in rng.integers(1, MAX_DIM + 1, size=3))
    layer = DenseLayer("check", d_in, d_out, rng)
    layer.bias.value = rng.normal(size=(1, d_out))
    x = rng.normal(size=(n, d_in))
    probe = rng.normal(size=(n, d_out))
    layer.forward(x)
    grad_x = layer.backward(probe)

    def loss_of_input(values):
        return float(np.sum(layer.forward(values) * probe))

    def loss_of(param):
        def loss(values):
            saved = param.value
            param.value = values
            try:
                return float(np.sum(layer.forward(x) * probe))
            finally:
                param.value = saved
        return loss

    errors = [max_relative_error(grad_x, finite_diff_gradient(loss_of_input, x, h))]
    for param in layer.params():
        errors.append(max_relative_error(param.grad, finite_diff_gradient(loss_of(param), param.value, h)))
    return max(errors), 0.0


def check_relu(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    n, d = (int(v) for v in rng.integers(1, MAX_DIM + 1, size=2))
    # keep every input at least 0.1 away from the kink
    x = rng.choice([-1.0, 1.0], size=(n, d)) * rng.uniform(0.1, 2.0, size=(n, d))
    probe = rng.normal(size=(n, d))
    relu = ReLU("check")
    relu.forward(x)
    analytic = relu.backward(probe)
    numeric = finite_diff_gradient(lambda v: float(np.sum(ReLU().forward(v) * probe)), x, h)
    return max_relative_error(analytic, numeric), 0.0


def check_l2norm(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    n, d = (int(v) for v in rng.integers(1, MAX_DIM + 1, size=2))
    x = _unit_rows(rng, n, d) * rng.uniform(0.5, 2.0, size=(n, 1))
    probe = rng.normal(size=(n, d))
    layer = L2Normalize("check")
    layer.forward(x)
    analytic = layer.backward(probe)
    numeric = finite_diff_gradient(lambda v: float(np.sum(l2_normalize_rows(v) * probe)), x, h)
    return max_relative_error(analytic, numeric), 0.0


def check_ce(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    n = int(rng.integers(1, MAX_ROWS + 1))
    c = int(rng.integers(2, MAX_CLASSES + 1))
    logits = 2.0 * rng.normal(size=(n, c))
    labels = rng.integers(0, c, size=n)
    _, analytic = ce_loss(LogitsBatch(logits, labels))
    numeric = finite_diff_gradient(lambda s: ce_loss(LogitsBatch(s, labels))[0], logits, h)
    return max_relative_error(analytic, numeric), 0.0


def check_sc(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    c = int(rng.integers(2, MAX_CLASSES + 1))
    d = int(rng.integers(2, MAX_DIM + 1))
    labels = _paired_labels(rng, c)
    z = _unit_rows(rng, labels.size, d)
    tau = _tau(rng)
    value, analytic = sc_loss(EmbeddingBatch(z, labels), tau)
    numeric = finite_diff_gradient(
        lambda v: sc_loss(EmbeddingBatch(v, labels, check_norms=False), tau)[0], z, h)
    reference = reference_sc_loss(z, labels, tau)
    return max_relative_error(analytic, numeric), abs(value - reference) / max(abs(reference), 1.0)


def _prototype_instance(rng: np.random.Generator, per_class: int):
    c = int(rng.integers(2, MAX_CLASSES + 1))
    d = int(rng.integers(2, MAX_DIM + 1))
    n = int(rng.integers(1, MAX_ROWS + 1))
    labels = rng.integers(0, c, size=n)
    return labels, _unit_rows(rng, n, d), _unit_rows(rng, c * per_class, d), _tau(rng)


def check_psc(rng: np.random.Generator, h: float) -> Tuple[float, float]:
    labels, z, protos, tau = _prototype_instance(rng, 1)
    value, grad_z, grad_p = psc_loss(EmbeddingBatch(z, labels), protos, tau)
    num_z = finite_diff_gradient(
        lambda v: psc_loss(EmbeddingBatch(v, labels, check_norms=False), protos, tau)[0], z, h)
    num_p = finite_diff_gradient(
        lambda p: psc_loss(EmbeddingBatch(z, labels), p, tau)[0], protos, h)
    reference = reference_psc_loss(z, labels, protos, tau)
    error = max(max_relative_error(grad_z, num_z), max_relative_error(grad_p, num_p))
    return error, abs(value - reference) / max(abs(reference), 1.0)


def _mpsc_check(affinity_mode: str) -> InstanceCheck:
    def check(rng: np.random.Generator, h: float) -> Tuple[float, float]:
        per_class = int(rng.integers(1, 4))
        labels, z, protos, tau = _prototype_instance(rng, per_class)
        batch = EmbeddingBatch(z, labels)
        # the affinity weights are held constant, exactly as the backward pass treats them
        weights = mpsc_affinity_weights(batch, protos, per_class, tau, affinity_mode)
        value, grad_z, grad_p = mpsc_loss(batch, protos, per_class, tau, affinity_mode)
        num_z = finite_diff_gradient(
            lambda v: mpsc_loss(EmbeddingBatch(v, labels, check_norms=False), protos, per_class,
                                tau, weights=weights)[0], z, h)
        num_p = finite_diff_gradient(
            lambda p: mpsc_loss(batch, p, per_class, tau, weights=weights)[0], protos, h)
        reference = reference_mpsc_loss(z, labels, protos, per_class, tau, affinity_mode)
        error = max(max_relative_error(grad_z, num_z), max_relative_error(grad_p, num_p))
        return error, abs(value - reference) / max(abs(reference), 1.0)
    return check


CHECKS: Dict[str, InstanceCheck] = {
    "dense": check_dense,
    "relu": check_relu,
    "l2norm": check_l2norm,
    "ce": check_ce,
    "sc": check_sc,
    "psc": check_psc,
    "mpsc-uniform": _mpsc_check("uniform"),
    "mpsc-softmax": _mpsc_check("softmax"),
}


def run_gradcheck_suite(instances: int = 50, seed: int = 0, h: float = DEFAULT_FD_STEP,
                        tolerance: float = DEFAULT_TOLERANCE) -> List[GradcheckResult]:
    operation_id = str(uuid.uuid4())
    logger.info(f"BEGIN run_gradcheck_suite operation_id={operation_id} instances={instances} "
                f"seed={seed} h={h}")
    results = []
    for name, check in CHECKS.items():
        rng = named_rng(seed, f"gradcheck.{name}")
        start = time.time()
        worst_grad = worst_value = 0.0
        for _ in range(instances):
            grad_error, value_error = check(rng, h)
            worst_grad = max(worst_grad, grad_error)
            worst_value = max(worst_value, value_error)
        result = GradcheckResult(name, instances, worst_grad, worst_value, tolerance,
                                 time.time() - start)
        logger.info(f"gradcheck {name} max_rel_error={worst_grad:.3e} passed={result.passed}")
        results.append(result)
    status = "success" if all(r.passed for r in results) else "failed"
    logger.info(f"END run_gradcheck_suite operation_id={operation_id} status={status}")
    return results
