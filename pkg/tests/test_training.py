import json
import logging
from pathlib import Path

import numpy as np
import pytest

from hybridlt.checkpoint import read_checkpoint
from hybridlt.config import load_experiment_config
from hybridlt.errors import CheckpointError, ConfigurationError, NonFiniteError
from hybridlt.model import HybridNetwork
from hybridlt.training import (STAGE_CLASSIFIER, STAGE_FEATURE, STAGE_JOINT, HybridTrainer,
                               RunReport, train, train_two_stage)


def build(cfg, dataset, **kwargs):
    model = HybridNetwork(cfg.model_config(dataset.input_dim, dataset.num_classes), seed=cfg.seed)
    return HybridTrainer(model, None, dataset, cfg, **kwargs)


def snapshot(params):
    return {p.name: p.value.copy() for p in params}


def assert_same(before, params):
    for p in params:
        np.testing.assert_array_equal(p.value, before[p.name], err_msg=p.name)


class TestCurriculumRun:
    """Alpha and learning-rate traces"""

    def test_parabolic_alpha_trace(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        report = build(make_train_config(epochs=5, loss="psc"), train_set).run()
        assert report.alpha_trace() == pytest.approx([1.0, 1 - 1 / 16, 0.75, 1 - 9 / 16, 0.0])
        assert report.status == "success"

    def test_step_learning_rate(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        cfg = make_train_config(epochs=5, loss="sc", lr_milestones=[2, 4])
        report = build(cfg, train_set).run()
        assert report.lr_trace() == pytest.approx([0.05, 0.05, 0.005, 0.005, 0.0005])

    def test_ce_only_alpha_is_zero(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        report = build(make_train_config(loss="ce-only"), train_set).run()
        assert set(report.alpha_trace()) == {0.0}
        assert all(r.contrastive_loss is None for r in report.epochs)

    def test_same_seed_same_run(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        a = build(make_train_config(loss="mpsc", prototypes_per_class=2), train_set)
        b = build(make_train_config(loss="mpsc", prototypes_per_class=2), train_set)
        assert a.run().loss_trace() == b.run().loss_trace()
        assert_same(snapshot(a.model.params()), b.model.params())

    def test_epoch_records_and_evaluation(self, tiny_data, make_train_config):
        train_set, test_set = tiny_data
        report = build(make_train_config(loss="ce-ce", eval_every=2), train_set, test_set=test_set).run()
        assert [r.epoch for r in report.epochs] == [0, 1, 2, 3]
        assert report.epochs[0].test_top1 is None
        assert report.epochs[1].test_top1 is not None
        assert report.final["num_samples"] == test_set.size
        assert len(report.per_class_acc) == 3
        assert "cpu_count" in report.environment


class TestBranchEquivalence:
    def test_alpha_zero_matches_ce_only(self, tiny_data, make_train_config):
        """a curriculum pinned at zero is plain CE training on the classifier batch"""
        train_set, _ = tiny_data
        hybrid = build(make_train_config(loss="sc", alpha_schedule="constant:0"), train_set)
        plain = build(make_train_config(loss="ce-only"), train_set)
        hybrid.run()
        plain.run()
        groups = ("backbone", "classifier")
        for group in groups:
            assert_same(snapshot(plain.model.parameter_groups()[group]),
                        hybrid.model.parameter_groups()[group])

    def test_zero_learning_rate_changes_nothing(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss="sc", learning_rate=0.0), train_set)
        before = snapshot(trainer.model.params())
        trainer.run()
        assert_same(before, trainer.model.params())

    @pytest.mark.parametrize("loss", ["sc", "psc", "ce-ce"])
    def test_gradient_is_sum_of_branches(self, tiny_data, make_train_config, loss):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss=loss), train_set)
        alpha = 0.3
        sc_batch, ce_rows = trainer.draw_batches(alpha)
        params = trainer._all_params()

        trainer.accumulate_gradients(alpha, sc_batch, ce_rows)
        joint = {p.name: p.grad.copy() for p in params}
        trainer.accumulate_gradients(alpha, sc_batch, None)
        feature = {p.name: p.grad.copy() for p in params}
        trainer.accumulate_gradients(alpha, None, ce_rows)
        classifier = {p.name: p.grad.copy() for p in params}
        trainer.accumulate_gradients(1.0, sc_batch, None)
        unscaled = {p.name: p.grad.copy() for p in params}

        for name in joint:
            np.testing.assert_allclose(joint[name], feature[name] + classifier[name],
                                       rtol=1e-9, atol=1e-10, err_msg=name)
            np.testing.assert_allclose(feature[name], alpha * unscaled[name],
                                       rtol=1e-9, atol=1e-10, err_msg=name)

    def test_zero_weight_branch_draws_nothing(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss="psc"), train_set)
        sc_batch, ce_rows = trainer.draw_batches(1.0)
        assert sc_batch is not None and ce_rows is None
        sc_batch, ce_rows = trainer.draw_batches(0.0)
        assert sc_batch is None and ce_rows is not None

    def test_contrastive_step_moves_classifier_outputs(self, tiny_data, make_train_config):
        """the classifier sees the feature-branch update through the shared backbone"""
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss="sc", weight_decay=0.0), train_set)
        inputs = train_set.features[:12]
        classifier = trainer.model.parameter_groups()["classifier"]
        logits_before = trainer.model.predict_logits(inputs)
        classifier_before = snapshot(classifier)
        trainer.train_step(0, 0, 1.0, 0.05, STAGE_JOINT)
        for p in classifier:
            assert not np.any(p.grad), p.name
        assert_same(classifier_before, classifier)
        assert not np.allclose(trainer.model.predict_logits(inputs), logits_before)

    @pytest.mark.parametrize("loss, per_class", [("sc", 1), ("psc", 1), ("mpsc", 2)])
    def test_each_branch_leaves_the_other_head_untouched(self, tiny_data, make_train_config, loss,
                                                         per_class):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss=loss, prototypes_per_class=per_class), train_set)
        groups = trainer.model.parameter_groups()
        sc_batch, _ = trainer.draw_batches(1.0)
        _, ce_rows = trainer.draw_batches(0.0)

        trainer.accumulate_gradients(0.0, None, ce_rows)
        for p in groups["projection"] + (trainer.prototypes.params() if trainer.prototypes else []):
            assert not np.any(p.grad), p.name
        assert any(np.any(p.grad) for p in groups["backbone"])

        trainer.accumulate_gradients(1.0, sc_batch, None)
        for p in groups["classifier"]:
            assert not np.any(p.grad), p.name
        assert any(np.any(p.grad) for p in groups["projection"])


class TestStepClipping:
    """grad_clip_norm bounds the SGD step of the whole trainable set"""

    def test_step_is_capped(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="sc", grad_clip_norm=1e-3, momentum=0.0, weight_decay=0.0)
        trainer = build(cfg, train_set)
        params = trainer.trainable_params(STAGE_JOINT)
        before = snapshot(params)
        trainer.train_step(0, 0, 0.5, 0.1, STAGE_JOINT)
        grad_norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
        step_norm = np.sqrt(sum(float(np.sum((p.value - before[p.name]) ** 2)) for p in params))
        assert grad_norm == pytest.approx(1e-3)
        assert step_norm == pytest.approx(0.1 * 1e-3)

    def test_loose_bound_changes_nothing(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        clipped = build(make_train_config(loss="psc", grad_clip_norm=1e6), train_set)
        plain = build(make_train_config(loss="psc"), train_set)
        clipped.run()
        plain.run()
        assert_same(snapshot(plain.model.params()), clipped.model.params())

    def test_negative_rejected(self, make_train_config):
        with pytest.raises(ConfigurationError):
            make_train_config(grad_clip_norm=-1.0)

    def test_desk_preset_averages_and_clips(self):
        exp = load_experiment_config(Path(__file__).parent.parent / "config" / "desk.yml")
        assert exp.train.sc_reduction == "mean"
        assert exp.train.grad_clip_norm == 5.0


class TestTwoStage:
    """Feature stage at alpha 1, then the classifier on frozen features"""

    def test_stages_and_freezing(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss="psc", two_stage=True), train_set)
        assert [s.name for s in trainer.stages()] == [STAGE_FEATURE, STAGE_CLASSIFIER]
        groups = trainer.model.parameter_groups()

        classifier_before = snapshot(groups["classifier"])
        report = trainer.run(stop_after=2)
        assert report.status == "paused"
        assert_same(classifier_before, groups["classifier"])

        frozen = snapshot(groups["backbone"] + groups["projection"] + trainer.prototypes.params())
        report = trainer.run()
        assert_same(frozen, groups["backbone"] + groups["projection"] + trainer.prototypes.params())
        assert any(not np.array_equal(p.value, classifier_before[p.name]) for p in groups["classifier"])

        assert report.alpha_trace() == [1.0, 1.0, 0.0, 0.0]
        assert report.lr_trace() == pytest.approx([0.05, 0.005, 0.05, 0.005])
        assert [r.ce_loss is None for r in report.epochs] == [True, True, False, False]
        assert [r.contrastive_loss is None for r in report.epochs] == [False, False, True, True]

    def test_requires_two_stage_config(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="sc")
        model = HybridNetwork(cfg.model_config(4, 3), seed=cfg.seed)
        with pytest.raises(ConfigurationError):
            train_two_stage(model, None, train_set, cfg)

    def test_ce_only_has_no_feature_stage(self, tiny_data, make_train_config):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="ce-only", two_stage=True)
        model = HybridNetwork(cfg.model_config(4, 3), seed=cfg.seed)
        with pytest.raises(ConfigurationError):
            train_two_stage(model, None, train_set, cfg)


class TestCheckpoints:
    def test_resume_reproduces_uninterrupted_run(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="psc", sc_sampler="random", ce_sampler="balanced")
        full = build(cfg, train_set)
        full_report = full.run()

        paused = build(cfg, train_set, checkpoint_path=tmp_path / "ckpt.npz")
        assert paused.run(stop_after=2).status == "paused"

        resumed = build(cfg, train_set)
        report = resumed.run(resume_from=tmp_path / "ckpt.npz")
        assert report.loss_trace() == full_report.loss_trace()
        assert report.alpha_trace() == full_report.alpha_trace()
        assert_same(snapshot(full.model.params()), resumed.model.params())
        assert_same(snapshot(full.prototypes.params()), resumed.prototypes.params())

    def test_save_load_round_trip(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="mpsc", prototypes_per_class=2)
        trained = build(cfg, train_set)
        trained.run(stop_after=2)
        trained.checkpoint_save(tmp_path / "ckpt.npz")

        fresh = build(cfg, train_set)
        fresh.checkpoint_load(tmp_path / "ckpt.npz")
        assert fresh.next_epoch == 2
        assert_same(snapshot(trained._all_params()), fresh._all_params())
        saved, loaded = trained.optimizer.state_dict(), fresh.optimizer.state_dict()
        assert saved.keys() == loaded.keys()
        for name in saved:
            np.testing.assert_array_equal(saved[name], loaded[name])
        assert fresh.report.alpha_trace() == trained.report.alpha_trace()

    def test_truncated_checkpoint_applies_nothing(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="sc")
        path = tmp_path / "ckpt.npz"
        build(cfg, train_set, checkpoint_path=path).run(stop_after=1)
        path.write_bytes(path.read_bytes()[:200])

        fresh = build(cfg, train_set)
        before = snapshot(fresh.model.params())
        with pytest.raises(CheckpointError):
            fresh.checkpoint_load(path)
        assert_same(before, fresh.model.params())
        assert fresh.next_epoch == 0

    def test_version_mismatch(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        cfg = make_train_config(loss="sc")
        path = tmp_path / "ckpt.npz"
        build(cfg, train_set, checkpoint_path=path).run(stop_after=1)
        with np.load(path) as archive:
            arrays = {key: archive[key] for key in archive.files}
        meta = json.loads(str(arrays["meta"]))
        meta["version"] = 99
        arrays["meta"] = np.array(json.dumps(meta))
        np.savez(path, **arrays)
        with pytest.raises(CheckpointError) as info:
            build(cfg, train_set).checkpoint_load(path)
        assert info.value.field == "version"

    def test_different_config_rejected(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        path = tmp_path / "ckpt.npz"
        build(make_train_config(loss="sc"), train_set, checkpoint_path=path).run(stop_after=1)
        with pytest.raises(CheckpointError) as info:
            build(make_train_config(loss="sc", tau=0.5), train_set).checkpoint_load(path)
        assert info.value.field == "config"

    def test_non_finite_loss_keeps_last_checkpoint(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        path = tmp_path / "ckpt.npz"
        trainer = build(make_train_config(loss="ce-only"), train_set, checkpoint_path=path)
        trainer.run(stop_after=1)
        trainer.model.classifier.dense.bias.value[0, 0] = np.nan
        with pytest.raises(NonFiniteError) as info:
            trainer.run()
        assert (info.value.epoch, info.value.step) == (1, 0)
        assert trainer.report.status == "error"
        _, meta = read_checkpoint(path)
        assert meta["next_epoch"] == 1

    def test_raised_failure_is_not_logged_as_error(self, tiny_data, make_train_config, caplog):
        train_set, _ = tiny_data
        trainer = build(make_train_config(loss="ce-only"), train_set)
        trainer.model.classifier.dense.bias.value[0, 0] = np.nan
        with caplog.at_level(logging.INFO):
            with pytest.raises(NonFiniteError):
                trainer.run()
        assert not [r for r in caplog.records if r.levelno >= logging.ERROR]
        assert any("status=error" in r.getMessage() for r in caplog.records)

    def test_report_round_trip(self, tiny_data, make_train_config, tmp_path):
        train_set, _ = tiny_data
        model_cfg = make_train_config(loss="sc", epochs=2)
        model = HybridNetwork(model_cfg.model_config(4, 3), seed=0)
        report = train(model, None, train_set, model_cfg)
        loaded = RunReport.from_json(report.to_json(tmp_path / "report.json"))
        assert loaded.loss_trace() == report.loss_trace()
        assert list(report.to_frame().columns)[:4] == ["epoch", "stage", "alpha", "lr"]
