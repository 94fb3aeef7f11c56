"""Training loops: schedules, determinism, freeze contracts, joint mode."""

import numpy as np
import pytest

from flowadapt.backbone import Backbone
from flowadapt.data import generate_source
from flowadapt.errors import ConfigError, ShapeError
from flowadapt.flow import FlowModel
from flowadapt.tensor import Tensor
from flowadapt.train import (SGD, TrainConfig, cosine_lr, schedule_lr, step_lr,
                             train_flow, train_joint, train_source)


def param_bytes(model):
    return b"".join(p.data.tobytes() for _, p in sorted(model.named_parameters().items()))


def stats_bytes(backbone):
    return b"".join(v.tobytes() for _, v in sorted(backbone.named_stats().items()))


def small_task(seed=0, n=600, k=3, dim=6):
    return generate_source(k, dim, n, seed=seed, split="train")


def small_backbone(seed=0, k=3, dim=6):
    return Backbone(dim, k, widths=(8, 6, 6), seed=seed)


class TestSchedules:
    def test_step_schedule_formula(self):
        assert step_lr(0.1, (25, 40), 0.1, 0) == 0.1
        assert step_lr(0.1, (25, 40), 0.1, 24) == 0.1
        np.testing.assert_allclose(step_lr(0.1, (25, 40), 0.1, 25), 0.01)
        np.testing.assert_allclose(step_lr(0.1, (25, 40), 0.1, 40), 0.001)
        np.testing.assert_allclose(step_lr(0.1, (25, 40), 0.1, 49), 0.001)

    def test_cosine_endpoints(self):
        assert cosine_lr(0.1, 50, 0) == 0.1
        np.testing.assert_allclose(cosine_lr(0.1, 50, 50), 0.0, atol=1e-18)
        np.testing.assert_allclose(cosine_lr(0.1, 50, 25), 0.05)

    def test_schedule_dispatch(self):
        cfg = TrainConfig(epochs=10, schedule="cosine", milestones=(), seed=0)
        assert schedule_lr(cfg, 0) == cfg.lr0
        cfg2 = TrainConfig(epochs=10, schedule="step", milestones=(5,), seed=0)
        np.testing.assert_allclose(schedule_lr(cfg2, 7), cfg2.lr0 * cfg2.factor)

    def test_config_validation_lists_problems(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig(epochs=10, milestones=(8, 3), lr0=-1.0, schedule="warp")
        msg = str(exc.value)
        assert "milestones" in msg and "lr0" in msg and "schedule" in msg


class TestSGD:
    def test_plain_step(self):
        from flowadapt import tensor as T

        p = T.parameter([1.0, 2.0])
        p.grad = np.array([0.5, -0.5])
        opt = SGD([p], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_momentum_accumulates_velocity(self):
        from flowadapt import tensor as T

        p = T.parameter([0.0])
        opt = SGD([p], lr=1.0, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()   # v=1, p=-1
        p.grad = np.array([1.0])
        opt.step()   # v=1.5, p=-2.5
        np.testing.assert_allclose(p.data, [-2.5])

    def test_zero_grad(self):
        from flowadapt import tensor as T

        p = T.parameter([1.0])
        p.grad = np.array([3.0])
        SGD([p], lr=0.1).zero_grad()
        assert p.grad is None


class TestTrainSource:
    def test_separable_blobs_reach_99(self):
        # 2 classes, separation 6 sigma: a linear oracle exceeds 0.99
        ds = generate_source(2, 2, 2000, seed=1, mean_distance=6.0)
        bb = Backbone(2, 2, widths=(8, 6, 6), seed=1)
        _, history = train_source(bb, ds, TrainConfig(epochs=50, seed=1))
        acc = (bb.predict(ds.inputs) == ds.labels).mean()
        assert acc >= 0.99
        assert np.isfinite(history).all()
        assert history[-1] < history[0]

    def test_zero_epochs_leaves_parameters_unchanged(self):
        ds = small_task()
        bb = small_backbone()
        before = param_bytes(bb)
        _, history = train_source(bb, ds, TrainConfig(epochs=0, milestones=(), seed=0))
        assert param_bytes(bb) == before
        assert history == []

    def test_same_seed_bitwise_identical(self):
        ds = small_task()
        runs = []
        for _ in range(2):
            bb = small_backbone()
            train_source(bb, ds, TrainConfig(epochs=3, milestones=(), seed=4))
            runs.append(param_bytes(bb) + stats_bytes(bb))
        assert runs[0] == runs[1]

    def test_labels_out_of_range_rejected(self):
        ds = small_task(k=3)
        bb = Backbone(6, 2, widths=(8, 6, 6), seed=0)
        with pytest.raises(ValueError):
            train_source(bb, ds, TrainConfig(epochs=1, milestones=(), seed=0))


class TestTrainFlow:
    def setup_method(self):
        self.ds = small_task()
        self.bb = small_backbone()
        train_source(self.bb, self.ds, TrainConfig(epochs=8, milestones=(), seed=0))

    def test_improves_heldout_log_prob_over_identity_init(self):
        held = generate_source(3, 6, 400, seed=0, split="test")
        self.bb.set_mode("eval")
        feats = self.bb.extract_features(held.inputs).detach()
        untrained = FlowModel(self.bb.feature_dim, seed=2)
        before = untrained.log_prob(feats).data.mean()
        flow = FlowModel(self.bb.feature_dim, seed=2)
        train_flow(flow, self.bb, self.ds,
                   TrainConfig(epochs=8, lr0=0.05, momentum=0.0, milestones=(), seed=2))
        self.bb.set_mode("eval")
        feats2 = self.bb.extract_features(held.inputs).detach()
        after = flow.log_prob(feats2).data.mean()
        assert after > before

    def test_extractor_and_head_weights_bitwise_frozen(self):
        flow = FlowModel(self.bb.feature_dim, seed=3)
        before = param_bytes(self.bb)
        train_flow(flow, self.bb, self.ds,
                   TrainConfig(epochs=2, lr0=0.05, momentum=0.0, milestones=(), seed=3))
        assert param_bytes(self.bb) == before

    def test_bn_stats_update_flag(self):
        flow = FlowModel(self.bb.feature_dim, seed=3)
        before = stats_bytes(self.bb)
        train_flow(flow, self.bb, self.ds,
                   TrainConfig(epochs=1, lr0=0.05, momentum=0.0, milestones=(),
                               seed=3, bn_stats_update=False))
        assert stats_bytes(self.bb) == before
        train_flow(flow, self.bb, self.ds,
                   TrainConfig(epochs=1, lr0=0.05, momentum=0.0, milestones=(),
                               seed=3, bn_stats_update=True))
        assert stats_bytes(self.bb) != before

    def test_dim_mismatch_rejected(self):
        flow = FlowModel(self.bb.feature_dim + 1, seed=0)
        with pytest.raises(ShapeError):
            train_flow(flow, self.bb, self.ds,
                       TrainConfig(epochs=1, milestones=(), seed=0))

    def test_divergence_aborts_with_location(self):
        from flowadapt.errors import TrainingDiverged

        flow = FlowModel(self.bb.feature_dim, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged) as exc:
                # hot enough to blow up the conditioners on this small task
                train_flow(flow, self.bb, self.ds,
                           TrainConfig(epochs=10, lr0=5.0, momentum=0.0,
                                       milestones=(), seed=0))
        assert exc.value.phase == "flow"
        assert "epoch" in str(exc.value) and "batch" in str(exc.value)


class TestTrainJoint:
    def test_beta_zero_matches_source_training_bitwise(self):
        ds = small_task()
        solo = small_backbone(seed=5)
        cfg = TrainConfig(epochs=3, milestones=(), seed=5)
        train_source(solo, ds, cfg)

        joint_bb = small_backbone(seed=5)
        flow = FlowModel(joint_bb.feature_dim, seed=5)
        jcfg = TrainConfig(epochs=3, milestones=(), seed=5, beta=0.0, flow_lr0=0.05)
        flow_before = param_bytes(flow)
        train_joint(joint_bb, flow, ds, jcfg)
        assert param_bytes(joint_bb) == param_bytes(solo)
        assert stats_bytes(joint_bb) == stats_bytes(solo)
        # the flow still learned from the evolving features
        assert param_bytes(flow) != flow_before

    def test_combined_loss_identity(self):
        ds = small_task()
        bb = small_backbone(seed=6)
        flow = FlowModel(bb.feature_dim, seed=6)
        jcfg = TrainConfig(epochs=2, milestones=(), seed=6, beta=0.01, flow_lr0=0.05)
        _, _, history = train_joint(bb, flow, ds, jcfg)
        for row in history:
            np.testing.assert_allclose(row["joint"], row["cls"] + 0.01 * row["uns"],
                                       rtol=1e-12)

    def test_head_gets_no_density_gradient(self):
        """With a constant zero classification signal, beta routes density
        gradients into the extractor but never the head."""
        ds = small_task()
        bb = small_backbone(seed=7)
        flow = FlowModel(bb.feature_dim, seed=7)
        head_before = bb.head.w.data.copy()
        stage1_before = bb.stages[0].linear.w.data.copy()
        # one epoch with lr applied only via beta path: freeze cls by lr trick is
        # convoluted; instead verify gradient routing directly on one batch
        from flowadapt import nn
        from flowadapt.tensor import backward

        bb.set_mode("train")
        logits, feats = bb.forward_full(ds.inputs[:32])
        loss = flow.nll_loss(feats) * 0.01
        backward(loss)
        assert bb.head.w.grad is None
        assert bb.stages[0].linear.w.grad is not None
        assert np.any(bb.stages[0].linear.w.grad != 0)
        np.testing.assert_array_equal(bb.head.w.data, head_before)
        np.testing.assert_array_equal(bb.stages[0].linear.w.data, stage1_before)

    def test_beta_presets_supported(self):
        ds = small_task(n=300)
        for beta in (0.01, 0.001):
            bb = small_backbone(seed=8)
            flow = FlowModel(bb.feature_dim, seed=8)
            jcfg = TrainConfig(epochs=1, milestones=(), seed=8, beta=beta,
                               flow_lr0=0.05)
            _, _, history = train_joint(bb, flow, ds, jcfg)
            assert np.isfinite(history[0]["joint"])

    def test_deterministic(self):
        ds = small_task()
        outs = []
        for _ in range(2):
            bb = small_backbone(seed=9)
            flow = FlowModel(bb.feature_dim, seed=9)
            train_joint(bb, flow, ds,
                        TrainConfig(epochs=2, milestones=(), seed=9, beta=0.01,
                                    flow_lr0=0.05))
            outs.append(param_bytes(bb) + param_bytes(flow))
        assert outs[0] == outs[1]
