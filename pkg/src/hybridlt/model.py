"""
Two-branch hybrid network: shared MLP backbone, projection head with L2
normalization for the contrastive branch, linear classifier for the CE
branch, and the learnable prototype bank.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .numerics import (NORM_EPSILON, DenseLayer, L2Normalize, Matrix, ParamTensor, ReLU,
                       as_matrix, l2_normalize_rows, named_rng)

logger = logging.getLogger("HybridNetwork")


@dataclass
class ModelConfig:
    """Layer widths of the hybrid network"""
    input_dim: int = 16
    num_classes: int = 10
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 32
    projection_hidden: int = 32
    embedding_dim: int = 16
    prototypes_per_class: int = 1
    identity_backbone: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.prototypes_per_class < 1:
            raise ConfigurationError("prototypes_per_class must be >= 1")
        for name in ("input_dim", "feature_dim", "projection_hidden", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        self.hidden_dims = [int(width) for width in self.hidden_dims]
        if any(width < 1 for width in self.hidden_dims):
            raise ConfigurationError(f"hidden widths must be positive: {self.hidden_dims}")

    @property
    def representation_dim(self) -> int:
        return self.input_dim if self.identity_backbone else self.feature_dim

    def to_dict(self) -> Dict:
        return asdict(self)


PROJECTION_BIAS_STD = 0.01


class BackboneMlp:
    """Dense/ReLU stack input -> hidden... -> feature width; zero depth is the identity map.

    The feature layer itself is linear, so the representation is not clipped
    at zero before it reaches the two heads.
    """

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], output_dim: Optional[int],
                 rng: np.random.Generator):
        self.input_dim = input_dim
        self.layers: list = []
        if output_dim is None:
            if hidden_dims:
                raise ConfigurationError("an identity backbone cannot have hidden layers")
            self.output_dim = input_dim
            return
        widths = [input_dim, *hidden_dims, output_dim]
        last = len(widths) - 2
        for index, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(DenseLayer(f"backbone.{index}", d_in, d_out, rng))
            if index < last:
                self.layers.append(ReLU(f"backbone.relu{index}"))
        self.output_dim = output_dim

    @property
    def depth(self) -> int:
        return sum(isinstance(layer, DenseLayer) for layer in self.layers)

    def params(self) -> List[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, inputs: Matrix) -> Matrix:
        inputs = as_matrix(inputs, "backbone input")
        if inputs.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"backbone expects width {self.input_dim}, got {inputs.shape[1]}")
        out = inputs
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, upstream_grad: Matrix) -> Matrix:
        grad = upstream_grad
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class ProjectionHead:
    """Feature -> hidden -> embedding with ReLU in between, then L2 normalization.

    The output bias starts non-zero: a row whose hidden units are all inactive
    maps to that bias instead of the origin, which has no direction.
    """

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, rng: np.random.Generator):
        self.hidden = DenseLayer("projection.0", input_dim, hidden_dim, rng)
        self.relu = ReLU("projection.relu")
        self.output = DenseLayer("projection.1", hidden_dim, output_dim, rng,
                                 bias_std=PROJECTION_BIAS_STD)
        self.normalize = L2Normalize("projection.l2norm")

    def params(self) -> List[ParamTensor]:
        return self.hidden.params() + self.output.params()

    def forward(self, features: Matrix) -> Matrix:
        return self.normalize.forward(self.output.forward(self.relu.forward(self.hidden.forward(features))))

    def backward(self, upstream_grad: Matrix) -> Matrix:
        grad = self.normalize.backward(upstream_grad)
        return self.hidden.backward(self.relu.backward(self.output.backward(grad)))


class ClassifierHead:
    """A single linear layer from backbone features to class logits"""

    def __init__(self, name: str, input_dim: int, num_classes: int, rng: np.random.Generator):
        self.dense = DenseLayer(name, input_dim, num_classes, rng)

    @property
    def num_classes(self) -> int:
        return self.dense.out_dim

    def params(self) -> List[ParamTensor]:
        return self.dense.params()

    def forward(self, features: Matrix) -> Matrix:
        return self.dense.forward(features)

    def backward(self, upstream_grad: Matrix) -> Matrix:
        return self.dense.backward(upstream_grad)


class PrototypeBank:
    """C x M unit-norm prototypes stored as a (C*M) x embedding-width parameter.

    Row j*M + k is prototype k of class j.
    """

    def __init__(self, num_classes: int, per_class: int, dim: int,
                 rng: Optional[np.random.Generator] = None):
        if num_classes < 2:
            raise ConfigurationError(f"a prototype bank needs >= 2 classes, got {num_classes}")
        if per_class < 1:
            raise ConfigurationError(f"prototypes per class must be >= 1, got {per_class}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = num_classes
        self.per_class = per_class
        initial = l2_normalize_rows(rng.normal(size=(num_classes * per_class, dim)), "prototype")
        self.param = ParamTensor("prototypes", initial)

    @property
    def value(self) -> Matrix:
        return self.param.value

    @property
    def dim(self) -> int:
        return self.param.shape[1]

    def params(self) -> List[ParamTensor]:
        return [self.param]

    def class_prototypes(self, class_id: int) -> Matrix:
        start = class_id * self.per_class
        return self.param.value[start:start + self.per_class]

    def renormalize(self) -> None:
        renormalize_prototypes(self)


def renormalize_prototypes(bank: PrototypeBank) -> None:
    """Project every prototype back onto the unit sphere, keeping its direction"""
    norms = np.linalg.norm(bank.param.value, axis=1, keepdims=True)
    collapsed = np.flatnonzero(norms[:, 0] < NORM_EPSILON)
    if collapsed.size:
        row = int(collapsed[0])
        class_id, prototype_id = divmod(row, bank.per_class)
        logger.info(f"prototype collapse class_id={class_id} prototype_id={prototype_id}")
        raise DegenerateInputError(
            f"prototype {prototype_id} of class {class_id} collapsed (norm {norms[row, 0]:.3e})",
            row=row, class_id=class_id, prototype_id=prototype_id)
    bank.param.value = bank.param.value / norms


class HybridNetwork:
    """Shared backbone feeding a contrastive projection head and a classifier.

    `aux_classifier` replaces the projection head in the CE-CE baseline, where
    the feature branch is trained with cross-entropy instead of a contrastive loss.
    Every component draws its initialization from its own named stream, so the
    backbone and classifier start identical whatever the loss configuration.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        if cfg.identity_backbone:
            self.backbone = BackboneMlp(cfg.input_dim, [], None, named_rng(seed, "init.backbone"))
        else:
            self.backbone = BackboneMlp(cfg.input_dim, cfg.hidden_dims, cfg.feature_dim,
                                        named_rng(seed, "init.backbone"))
        rep_dim = cfg.representation_dim
        self.projection = ProjectionHead(rep_dim, cfg.projection_hidden, cfg.embedding_dim,
                                         named_rng(seed, "init.projection"))
        self.classifier = ClassifierHead("classifier", rep_dim, cfg.num_classes,
                                         named_rng(seed, "init.classifier"))
        self.aux_classifier = ClassifierHead("aux_classifier", rep_dim, cfg.num_classes,
                                             named_rng(seed, "init.aux_classifier"))

    def make_prototypes(self) -> PrototypeBank:
        return PrototypeBank(self.cfg.num_classes, self.cfg.prototypes_per_class,
                             self.cfg.embedding_dim, named_rng(self.seed, "init.prototypes"))

    def forward_features(self, inputs: Matrix) -> Matrix:
        return self.backbone.forward(inputs)

    def forward_contrastive(self, features: Matrix) -> Matrix:
        return self.projection.forward(features)

    def forward_classifier(self, features: Matrix) -> Matrix:
        return self.classifier.forward(features)

    def forward_aux(self, features: Matrix) -> Matrix:
        return self.aux_classifier.forward(features)

    def backward_features(self, upstream_grad: Matrix) -> Matrix:
        return self.backbone.backward(upstream_grad)

    def backward_contrastive(self, upstream_grad: Matrix) -> Matrix:
        return self.projection.backward(upstream_grad)

    def backward_classifier(self, upstream_grad: Matrix) -> Matrix:
        return self.classifier.backward(upstream_grad)

    def backward_aux(self, upstream_grad: Matrix) -> Matrix:
        return self.aux_classifier.backward(upstream_grad)

    def predict_logits(self, inputs: Matrix) -> Matrix:
        return self.forward_classifier(self.forward_features(inputs))

    def embed(self, inputs: Matrix) -> Matrix:
        return self.forward_contrastive(self.forward_features(inputs))

    def parameter_groups(self) -> Dict[str, List[ParamTensor]]:
        return {
            "backbone": self.backbone.params(),
            "projection": self.projection.params(),
            "classifier": self.classifier.params(),
            "aux_classifier": self.aux_classifier.params(),
        }

    def params(self) -> List[ParamTensor]:
        return [p for group in self.parameter_groups().values() for p in group]

    def named_params(self) -> Dict[str, ParamTensor]:
        return {p.name: p for p in self.params()}

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()
