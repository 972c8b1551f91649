"""
Dense-matrix plumbing: parameters, hand-wired layers, SGD with momentum and
the central-difference gradient oracle every loss is checked against.

A Matrix is a 2-D float64 numpy array. All layers cache what their backward
pass needs; backward accumulates into ParamTensor.grad and never resets it.
"""

import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, NonFiniteError, StateError

Matrix = np.ndarray

NORM_EPSILON = 1e-12
DEFAULT_FD_STEP = 1e-4


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per (seed, stream name); stable regardless of creation order"""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])


def as_matrix(data: Any, name: str = "input") -> Matrix:
    """Coerce to a 2-D float64 array (1-D input becomes a single row)"""
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {matrix.shape}")
    return matrix


@dataclass
class ParamTensor:
    """A learnable value paired with its accumulated gradient"""
    name: str
    value: Matrix
    grad: Optional[Matrix] = None

    def __post_init__(self):
        self.value = np.array(as_matrix(self.value, self.name), dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(as_matrix(self.grad, self.name), dtype=np.float64)
            if self.grad.shape != self.value.shape:
                raise ConfigurationError(
                    f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, gradient: Matrix) -> None:
        if gradient.shape != self.value.shape:
            raise ConfigurationError(
                f"{self.name}: gradient shape {gradient.shape} != {self.value.shape}")
        self.grad += gradient


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyperparameters; defaults follow the long-tailed CIFAR recipe"""
    learning_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0.0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")


def dense_forward(inputs: Matrix, weights: ParamTensor, bias: ParamTensor) -> Matrix:
    """inputs @ W + b with the bias broadcast over rows"""
    inputs = as_matrix(inputs)
    d_in, d_out = weights.shape
    if inputs.shape[1] != d_in:
        raise ConfigurationError(
            f"{weights.name}: input width {inputs.shape[1]} != weight rows {d_in}")
    if bias.shape != (1, d_out):
        raise ConfigurationError(f"{bias.name}: bias shape {bias.shape} != (1, {d_out})")
    return inputs @ weights.value + bias.value


class DenseLayer:
    """Fully connected layer with He-normal weights.

    The bias starts at zero unless `bias_std` asks for a small Gaussian draw,
    taken after the weights so the weight values do not depend on it.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 rng: Optional[np.random.Generator] = None, bias_std: float = 0.0):
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"{name}: dimensions must be positive ({in_dim}, {out_dim})")
        if not bias_std >= 0.0:
            raise ConfigurationError(f"{name}: bias_std must be >= 0, got {bias_std}")
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_dim)
        self.name = name
        self.weights = ParamTensor(f"{name}.weight", rng.normal(0.0, scale, size=(in_dim, out_dim)))
        bias = rng.normal(0.0, bias_std, size=(1, out_dim)) if bias_std > 0.0 else np.zeros((1, out_dim))
        self.bias = ParamTensor(f"{name}.bias", bias)
        self._input: Optional[Matrix] = None

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def params(self) -> List[ParamTensor]:
        return [self.weights, self.bias]

    def forward(self, inputs: Matrix) -> Matrix:
        inputs = as_matrix(inputs, self.name)
        output = dense_forward(inputs, self.weights, self.bias)
        self._input = inputs
        return output

    def backward(self, upstream_grad: Matrix) -> Matrix:
        if self._input is None:
            raise StateError(f"{self.name}: backward called before forward")
        upstream_grad = as_matrix(upstream_grad, self.name)
        if upstream_grad.shape != (self._input.shape[0], self.out_dim):
            raise ConfigurationError(
                f"{self.name}: upstream shape {upstream_grad.shape} does not match forward output")
        self.weights.accumulate(self._input.T @ upstream_grad)
        self.bias.accumulate(upstream_grad.sum(axis=0, keepdims=True))
        return upstream_grad @ self.weights.value.T


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask: Optional[np.ndarray] = None

    def params(self) -> List[ParamTensor]:
        return []

    def forward(self, inputs: Matrix) -> Matrix:
        inputs = as_matrix(inputs, self.name)
        self._mask = inputs > 0.0
        return np.where(self._mask, inputs, 0.0)

    def backward(self, upstream_grad: Matrix) -> Matrix:
        if self._mask is None:
            raise StateError(f"{self.name}: backward called before forward")
        return np.where(self._mask, upstream_grad, 0.0)


def l2_normalize_rows(inputs: Matrix, what: str = "row") -> Matrix:
    """Project every row onto the unit sphere; near-zero rows are an error, never clamped"""
    inputs = as_matrix(inputs)
    norms = np.linalg.norm(inputs, axis=1, keepdims=True)
    degenerate = np.flatnonzero(norms[:, 0] < NORM_EPSILON)
    if degenerate.size:
        row = int(degenerate[0])
        raise DegenerateInputError(
            f"{what} {row} has norm {norms[row, 0]:.3e} < {NORM_EPSILON}", row=row)
    return inputs / norms


class L2Normalize:
    """Row-wise L2 normalization layer"""

    def __init__(self, name: str = "l2norm"):
        self.name = name
        self._norms: Optional[Matrix] = None
        self._output: Optional[Matrix] = None

    def params(self) -> List[ParamTensor]:
        return []

    def forward(self, inputs: Matrix) -> Matrix:
        inputs = as_matrix(inputs, self.name)
        output = l2_normalize_rows(inputs, what=f"{self.name} row")
        self._norms = np.linalg.norm(inputs, axis=1, keepdims=True)
        self._output = output
        return output

    def backward(self, upstream_grad: Matrix) -> Matrix:
        if self._output is None:
            raise StateError(f"{self.name}: backward called before forward")
        z = self._output
        radial = np.sum(upstream_grad * z, axis=1, keepdims=True)
        return (upstream_grad - radial * z) / self._norms


def sgd_step(params: Iterable[ParamTensor], cfg: SgdConfig, state: Dict[str, Matrix],
             learning_rate: Optional[float] = None) -> None:
    """v <- momentum*v + (grad + wd*value); value <- value - lr*v

    Weight decay enters the velocity. `state` maps parameter name to velocity
    and is filled with zeros on first sight of a parameter.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    params = list(params)
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {param.name}",
                                 parameter=param.name)
    for param in params:
        velocity = state.get(param.name)
        if velocity is None:
            velocity = np.zeros_like(param.value)
        velocity = cfg.momentum * velocity + (param.grad + cfg.weight_decay * param.value)
        state[param.name] = velocity
        param.value -= lr * velocity


def clip_gradient_norm(params: Iterable[ParamTensor], max_norm: float) -> float:
    """Rescale the gradients in place so their joint L2 norm is at most max_norm.

    Returns the norm before clipping. A non-finite norm is left untouched for
    sgd_step to report.
    """
    if not max_norm > 0.0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    params = list(params)
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if np.isfinite(total) and total > max_norm:
        factor = max_norm / total
        for param in params:
            param.grad *= factor
    return total


@dataclass
class SgdMomentum:
    """Stateful wrapper over sgd_step owning the velocity buffers"""
    cfg: SgdConfig
    velocity: Dict[str, Matrix] = field(default_factory=dict)

    def step(self, params: Iterable[ParamTensor], learning_rate: Optional[float] = None) -> None:
        sgd_step(params, self.cfg, self.velocity, learning_rate)

    def state_dict(self) -> Dict[str, Matrix]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state: Dict[str, Matrix]) -> None:
        self.velocity = {name: np.array(v, dtype=np.float64) for name, v in state.items()}


def finite_diff_gradient(loss_fn: Callable[[Matrix], float], point: Matrix,
                         h: float = DEFAULT_FD_STEP) -> Matrix:
    """Central differences (f(x+h e) - f(x-h e)) / 2h for every coordinate of point"""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        f_plus = float(loss_fn(x))
        x[idx] = original - h
        f_minus = float(loss_fn(x))
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_param_gradient(loss_fn: Callable[[], float], param: ParamTensor,
                               h: float = DEFAULT_FD_STEP) -> Matrix:
    """Oracle for a parameter living inside a model: perturbs param.value in place"""
    def evaluate(values: Matrix) -> float:
        saved = param.value
        param.value = values
        try:
            return loss_fn()
        finally:
            param.value = saved
    return finite_diff_gradient(evaluate, param.value, h)


def max_relative_error(analytic: Matrix, numeric: Matrix, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the largest magnitude present in either array"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ConfigurationError(f"shape mismatch {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)
