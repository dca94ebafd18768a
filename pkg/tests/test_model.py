"""Assembled model: ablation wiring, fusion, losses, and training step
behavior."""

import numpy as np
import pytest

import pnpnet.tensor as T
from pnpnet.model import (NumericError, PnPConfig, build_model, dice_loss,
                          fuse_tokens, one_hot, predict_labels, total_loss,
                          train_step)
from pnpnet.nn import ConfigError
from pnpnet.optim import AdamW

DESK = dict(channels=(4, 8, 8, 8), blocks=(1, 1, 1, 1), center_dim=8,
            atlas_size=6)


def small_model(seed=0, **kw):
    return build_model(PnPConfig(**{**DESK, **kw}), seed)


def small_case(seed=0):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(32, 32, 32)).astype(np.float32)
    label = np.zeros((32, 32, 32), dtype=np.uint8)
    label[8:24, 8:16, 8:24] = 1
    label[8:24, 16:24, 8:24] = 2
    return image, label


class TestConfig:
    def test_class_count_validated(self):
        with pytest.raises(ConfigError):
            PnPConfig(n_classes=1)

    def test_negative_center_weight_rejected(self):
        with pytest.raises(ConfigError):
            PnPConfig(lambda_cc=-0.1)


class TestAblationWiring:
    def test_full_model_outputs(self):
        m = small_model()
        image, label = small_case()
        out = m.forward(image, labels=label)
        assert out.logits.shape == (3, 32, 32, 32)
        assert out.t_pull.shape == (9, 32, 32, 32)
        assert out.c_hat.shape == (3, 8)
        assert out.c_gt.shape == (3, 8)
        assert [e.shape for e in out.mask_embeddings] == \
            [(3, 16, 16, 16), (3, 8, 8, 8), (3, 4, 4, 4)]

    def test_baseline_has_no_pull_outputs(self):
        m = small_model(enable_sdm=False, enable_ccm=False)
        out = m.forward(small_case()[0])
        assert out.logits.shape == (3, 32, 32, 32)
        assert out.t_pull is None and out.c_hat is None

    def test_sdm_only_has_no_centers(self):
        m = small_model(enable_ccm=False)
        out = m.forward(small_case()[0])
        assert out.c_hat is None
        assert len(m.eid_modules()) == 6

    def test_ccm_only_has_no_kernels(self):
        m = small_model(enable_sdm=False)
        assert m.eid_modules() == {}
        assert m.forward(small_case()[0]).c_hat is not None

    def test_mask_embedding_channel_sums(self):
        m = small_model()
        out = m.forward(small_case()[0])
        for e in out.mask_embeddings:
            np.testing.assert_allclose(e.data.sum(axis=0), 1.0, atol=1e-5)


class TestFusion:
    def test_zero_push_scales_pull(self):
        pull = T.Tensor(np.random.default_rng(0).normal(size=(2, 2, 2, 2)))
        push = T.Tensor(np.zeros((2, 2, 2, 2)))
        np.testing.assert_allclose(fuse_tokens(pull, push).data,
                                   1.5 * pull.data, atol=1e-12)

    def test_gate_saturation(self):
        pull = T.Tensor(np.ones((1, 1, 1, 1)))
        hi = fuse_tokens(pull, T.Tensor(np.full((1, 1, 1, 1), 50.0)))
        lo = fuse_tokens(pull, T.Tensor(np.full((1, 1, 1, 1), -50.0)))
        assert hi.data.item() == pytest.approx(2.0, abs=1e-9)
        assert lo.data.item() == pytest.approx(1.0, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.DimensionError):
            fuse_tokens(T.Tensor(np.zeros((2, 2, 2, 2))),
                        T.Tensor(np.zeros((3, 2, 2, 2))))


class TestLosses:
    def test_dice_loss_perfect_prediction_near_zero(self):
        label = np.random.default_rng(1).integers(0, 3, size=(4, 4, 4))
        oh = one_hot(label, 3)
        logits = T.Tensor((oh * 40.0 - 20.0).astype(np.float64))
        assert float(dice_loss(logits, oh).data) <= 1e-6

    def test_dice_loss_closed_form(self):
        # two voxels, two classes: p = softmax([0,0]) = 0.5 everywhere,
        # gt puts both voxels in class 0
        logits = T.Tensor(np.zeros((2, 1, 1, 2)))
        oh = np.zeros((2, 1, 1, 2))
        oh[0] = 1.0
        eps = 1e-5
        d0 = (2 * 1.0 + eps) / (1.0 + 2.0 + eps)
        d1 = (2 * 0.0 + eps) / (1.0 + 0.0 + eps)
        want = 1.0 - 0.5 * (d0 + d1)
        assert float(dice_loss(logits, oh).data) == pytest.approx(want, rel=1e-9)

    def test_total_is_component_sum(self):
        m = small_model()
        image, label = small_case()
        out = m.forward(image, labels=label)
        total, d, c, cc = total_loss(out, label, m.config.lambda_cc)
        assert float(total.data) == pytest.approx(
            float(d.data) + float(c.data) + 0.1 * float(cc.data), rel=1e-6)

    def test_center_component_zero_without_ccm(self):
        m = small_model(enable_ccm=False)
        image, label = small_case()
        out = m.forward(image, labels=label)
        _, _, _, cc = total_loss(out, label, m.config.lambda_cc)
        assert float(cc.data) == 0.0

    def test_one_hot_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot(np.array([[3]]), 3)


class TestTrainStep:
    def test_deterministic_given_seed(self):
        image, label = small_case()
        vals = []
        for _ in range(2):
            m = small_model(seed=5)
            opt = AdamW(m.parameters())
            vals.append([train_step(m, opt, image, label) for _ in range(2)])
        assert vals[0] == vals[1]

    def test_zero_lr_keeps_parameters(self):
        image, label = small_case()
        m = small_model(seed=6)
        before = {k: p.data.copy() for k, p in m.parameters().items()}
        opt = AdamW(m.parameters(), lr=0.0, weight_decay=0.0)
        train_step(m, opt, image, label)
        for k, p in m.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_loss_decreases_on_repeated_sample(self):
        image, label = small_case()
        m = small_model(seed=7, enable_ccm=False)
        opt = AdamW(m.parameters(), lr=1e-3)
        first = train_step(m, opt, image, label)[0]
        for _ in range(8):
            last = train_step(m, opt, image, label)[0]
        assert last < first

    def test_constraints_hold_after_steps(self):
        image, label = small_case()
        m = small_model(seed=8)
        opt = AdamW(m.parameters(), lr=1e-2, weight_decay=1e-2)
        for _ in range(3):
            train_step(m, opt, image, label)
        m.assert_eid_constraints()

    def test_non_finite_loss_raises(self):
        image, label = small_case()
        m = small_model(seed=9)
        m.head.w.data[...] = np.nan
        opt = AdamW(m.parameters())
        with pytest.raises(NumericError):
            train_step(m, opt, image, label)

    def test_predict_labels_shape_and_range(self):
        m = small_model(seed=10)
        pred = predict_labels(m, small_case()[0])
        assert pred.shape == (32, 32, 32)
        assert pred.max() < 3
