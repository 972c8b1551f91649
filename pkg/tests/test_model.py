import numpy as np
import pytest

from hybridlt.errors import ConfigurationError, DegenerateInputError
from hybridlt.losses import EmbeddingBatch, LogitsBatch, ce_loss, psc_loss
from hybridlt.model import HybridNetwork, ModelConfig, PrototypeBank, renormalize_prototypes
from hybridlt.numerics import (DenseLayer, SgdConfig, SgdMomentum, finite_diff_param_gradient,
                               max_relative_error)

TOY = dict(input_dim=2, num_classes=4, hidden_dims=[16], feature_dim=8,
           projection_hidden=8, embedding_dim=4)


class TestBackbone:
    def test_identity_backbone(self, rng):
        net = HybridNetwork(ModelConfig(input_dim=5, num_classes=3, hidden_dims=[],
                                        identity_backbone=True))
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(net.forward_features(x), x)
        assert net.backbone.depth == 0
        assert net.cfg.representation_dim == 5
        assert net.classifier.dense.in_dim == 5

    def test_same_seed_same_initialization(self):
        a = HybridNetwork(ModelConfig(**TOY), seed=3)
        b = HybridNetwork(ModelConfig(**TOY), seed=3)
        for name, param in a.named_params().items():
            np.testing.assert_array_equal(param.value, b.named_params()[name].value)

    def test_backbone_independent_of_prototype_count(self):
        a = HybridNetwork(ModelConfig(**TOY, prototypes_per_class=1), seed=5)
        b = HybridNetwork(ModelConfig(**TOY, prototypes_per_class=3), seed=5)
        for pa, pb in zip(a.backbone.params(), b.backbone.params()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_wrong_input_width(self, rng):
        net = HybridNetwork(ModelConfig(**TOY))
        with pytest.raises(ConfigurationError):
            net.forward_features(rng.normal(size=(3, 7)))

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(num_classes=1)


class TestHeads:
    def test_contrastive_rows_are_unit(self, rng):
        net = HybridNetwork(ModelConfig(**TOY), seed=1)
        z = net.embed(rng.normal(size=(32, 2)))
        assert z.shape == (32, 4)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)

    def test_zero_weight_classifier_returns_bias(self, rng):
        net = HybridNetwork(ModelConfig(**TOY), seed=1)
        net.classifier.dense.weights.value = np.zeros_like(net.classifier.dense.weights.value)
        net.classifier.dense.bias.value = np.array([[0.5, -1.0, 2.0, 0.0]])
        logits = net.predict_logits(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(logits, np.tile([[0.5, -1.0, 2.0, 0.0]], (3, 1)))

    def test_parameter_groups_are_disjoint(self):
        net = HybridNetwork(ModelConfig(**TOY))
        names = [p.name for group in net.parameter_groups().values() for p in group]
        assert len(names) == len(set(names))
        assert set(net.parameter_groups()) == {"backbone", "projection", "classifier", "aux_classifier"}

    @pytest.mark.parametrize("seed", range(20))
    def test_embeddings_never_collapse(self, seed, tiny_data):
        train, test = tiny_data
        net = HybridNetwork(ModelConfig(input_dim=4, num_classes=3, hidden_dims=[8], feature_dim=6,
                                        projection_hidden=6, embedding_dim=4), seed=seed)
        for inputs in (train.features, test.features, np.zeros((2, 4))):
            z = net.embed(inputs)
            np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)

    def test_feature_layer_is_linear(self, rng):
        net = HybridNetwork(ModelConfig(**TOY), seed=2)
        assert isinstance(net.backbone.layers[-1], DenseLayer)
        assert np.any(net.forward_features(rng.normal(size=(32, 2))) < 0.0)

    def test_dead_projection_row_maps_to_bias(self):
        net = HybridNetwork(ModelConfig(**TOY), seed=4)
        bias = net.projection.output.bias.value
        assert np.linalg.norm(bias) > 0.0
        net.projection.hidden.bias.value = np.full_like(net.projection.hidden.bias.value, -1e6)
        z = net.embed(np.zeros((3, 2)))
        np.testing.assert_allclose(z, np.tile(bias / np.linalg.norm(bias), (3, 1)))


class TestPrototypeBank:
    def test_initial_rows_are_unit(self):
        bank = PrototypeBank(5, 2, 3, np.random.default_rng(0))
        assert bank.value.shape == (10, 3)
        np.testing.assert_allclose(np.linalg.norm(bank.value, axis=1), 1.0)

    def test_class_rows_are_contiguous(self):
        bank = PrototypeBank(3, 2, 4, np.random.default_rng(1))
        np.testing.assert_array_equal(bank.class_prototypes(2), bank.value[4:6])

    def test_renormalize_keeps_direction(self):
        bank = PrototypeBank(2, 1, 3)
        bank.param.value = np.array([[0.0, 2.0, 0.0], [0.6, 0.8, 0.0]])
        renormalize_prototypes(bank)
        np.testing.assert_array_equal(bank.value[0], [0.0, 1.0, 0.0])

    def test_collapse_names_class_and_prototype(self):
        bank = PrototypeBank(2, 2, 3)
        values = bank.value.copy()
        values[3] = 0.0
        bank.param.value = values
        with pytest.raises(DegenerateInputError) as info:
            bank.renormalize()
        assert (info.value.class_id, info.value.prototype_id) == (1, 1)

    def test_norms_stay_unit_under_sgd(self, rng):
        bank = PrototypeBank(3, 1, 4, rng)
        optimizer = SgdMomentum(SgdConfig(learning_rate=0.2, momentum=0.9, weight_decay=1e-4))
        z = rng.normal(size=(12, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = np.arange(12) % 3
        for _ in range(100):
            bank.param.zero_grad()
            _, _, grad_p = psc_loss(EmbeddingBatch(z, labels), bank.value, 0.1)
            bank.param.accumulate(grad_p)
            optimizer.step(bank.params())
            bank.renormalize()
        np.testing.assert_allclose(np.linalg.norm(bank.value, axis=1), 1.0, atol=1e-9)


class TestEndToEndGradient:
    """Backprop through both heads of a 2-16-8-4 network against central differences"""

    def _loss(self, net, bank, x, labels):
        features = net.forward_features(x)
        ce, _ = ce_loss(LogitsBatch(net.forward_classifier(features), labels))
        psc, _, _ = psc_loss(EmbeddingBatch(net.forward_contrastive(features), labels), bank.value, 0.5)
        return 0.3 * psc + 0.7 * ce

    def test_every_parameter_matches_finite_differences(self, rng):
        net = HybridNetwork(ModelConfig(**TOY), seed=11)
        bank = net.make_prototypes()
        x = rng.normal(size=(6, 2))
        labels = np.array([0, 1, 2, 3, 1, 2])

        net.zero_grad()
        features = net.forward_features(x)
        _, g_logits = ce_loss(LogitsBatch(net.forward_classifier(features), labels))
        _, g_z, g_p = psc_loss(EmbeddingBatch(net.forward_contrastive(features), labels), bank.value, 0.5)
        g_features = net.backward_classifier(0.7 * g_logits) + net.backward_contrastive(0.3 * g_z)
        net.backward_features(g_features)

        for param in net.parameter_groups()["backbone"] + net.parameter_groups()["projection"] \
                + net.parameter_groups()["classifier"]:
            analytic = param.grad.copy()
            numeric = finite_diff_param_gradient(lambda: self._loss(net, bank, x, labels), param, h=1e-6)
            assert max_relative_error(analytic, numeric) <= 1e-5, param.name

        numeric_p = finite_diff_param_gradient(lambda: self._loss(net, bank, x, labels), bank.param,
                                               h=1e-6)
        assert max_relative_error(0.3 * g_p, numeric_p) <= 1e-5
