"""Network blocks: shape contracts, reductions under zero weights,
attention oracles, and parameter registry rules."""

import numpy as np
import pytest

import pnpnet.tensor as T
from pnpnet.nn import (AttentionBlock, ConfigError, DecoderStage, Encoder,
                       EncoderSpec, Module, PointwiseConv, RegistryError,
                       ResidualBlock, build_module)


def tt(x):
    return T.Tensor(np.asarray(x, dtype=np.float32))


class TestEncoder:
    def test_desk_scale_skip_shapes(self):
        enc = build_module(Encoder(EncoderSpec((8, 16, 32, 64), (1, 1, 1, 1), "group")), 0)
        skips = enc(tt(np.zeros((1, 32, 32, 32))))
        shapes = [s.shape for s in skips]
        assert shapes == [(8, 16, 16, 16), (16, 8, 8, 8),
                          (32, 4, 4, 4), (64, 2, 2, 2)]

    def test_paper_scale_channels_accepted(self):
        spec = EncoderSpec((16, 64, 256, 512), (1, 2, 3, 5), "group")
        assert spec.channels == (16, 64, 256, 512)

    def test_all_zero_weights_give_zero_skips(self):
        enc = build_module(Encoder(EncoderSpec((4, 8, 8, 8), (1, 1, 1, 1), "group")), 0)
        for p in enc.parameters().values():
            p.data[...] = 0.0
        skips = enc(tt(np.random.default_rng(0).normal(size=(1, 32, 32, 32))))
        for s in skips:
            np.testing.assert_array_equal(s.data, 0.0)

    def test_indivisible_extent_rejected(self):
        enc = build_module(Encoder(EncoderSpec((4, 8, 8, 8), (1, 1, 1, 1), "group")), 0)
        with pytest.raises(T.DimensionError):
            enc(tt(np.zeros((1, 24, 32, 32))))

    def test_spec_length_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            EncoderSpec((8, 16), (1, 1, 1), "group")


class TestResidualBlock:
    def test_zero_weights_reduce_to_identity_shortcut(self):
        blk = build_module(ResidualBlock(3, 3, "group"), 0)
        for p in blk.parameters().values():
            p.data[...] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 4, 4, 4)).astype(np.float32)
        out = blk(tt(x))
        # relu(0 + x) after the residual add
        np.testing.assert_allclose(out.data, np.maximum(x, 0.0), atol=1e-6)

    def test_channel_change_uses_projection(self):
        blk = build_module(ResidualBlock(3, 5, "group"), 0)
        out = blk(tt(np.zeros((3, 4, 4, 4))))
        assert out.shape == (5, 4, 4, 4)


class TestDecoderStage:
    def test_output_matches_skip_resolution(self):
        st = build_module(DecoderStage(8, 4, 4, "group"), 0)
        out = st(tt(np.zeros((8, 2, 2, 2))), tt(np.zeros((4, 4, 4, 4))))
        assert out.shape == (4, 4, 4, 4)

    def test_zero_inputs_zero_output(self):
        st = build_module(DecoderStage(8, 4, 4, "group"), 0)
        for p in st.parameters().values():
            p.data[...] = 0.0
        out = st(tt(np.zeros((8, 2, 2, 2))), tt(np.zeros((4, 4, 4, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_resolution_mismatch_rejected(self):
        st = build_module(DecoderStage(8, 4, 4, "group"), 0)
        with pytest.raises(T.DimensionError):
            st(tt(np.zeros((8, 3, 3, 3))), tt(np.zeros((4, 4, 4, 4))))

    def test_gradient_reaches_both_inputs(self):
        st = build_module(DecoderStage(4, 3, 3, "group"), 0, dtype=np.float64)

        def f(xs):
            return T.reduce_sum(T.square(st(xs[0], xs[1])))

        rng = np.random.default_rng(2)
        deep = rng.normal(size=(4, 2, 2, 2))
        skip = rng.normal(size=(3, 4, 4, 4))
        assert T.grad_check(f, [deep, skip]) <= 1e-4


def brute_force_attention(block, x):
    """Direct formula evaluation with numpy only."""
    def ln(v, g, b):
        mu = v.mean(axis=-1, keepdims=True)
        sd = np.sqrt(v.var(axis=-1, keepdims=True) + 1e-5)
        return (v - mu) / sd * g + b

    p = {k: t.data.astype(np.float64) for k, t in block.parameters().items()}
    h = ln(x, p["ln1.gamma"], p["ln1.beta"])
    q, k, v = h @ p["wq"], h @ p["wk"], h @ p["wv"]
    d = x.shape[1]
    scores = q @ k.T / np.sqrt(d)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    x = x + (w @ v) @ p["wo"]
    h2 = ln(x, p["ln2.gamma"], p["ln2.beta"])
    from scipy.special import erf
    m = h2 @ p["mlp1"] + p["mlp1.b"]
    m = m * 0.5 * (1.0 + erf(m / np.sqrt(2.0)))
    return x + m @ p["mlp2"] + p["mlp2.b"]


class TestAttentionBlock:
    def test_matches_brute_force_formula(self):
        block = build_module(AttentionBlock(8, heads=1), 5, dtype=np.float64)
        x = np.random.default_rng(5).normal(size=(3, 8))
        out = block(T.Tensor(x.copy()))
        np.testing.assert_allclose(out.data, brute_force_attention(block, x),
                                   atol=1e-6)

    def test_permutation_equivariance(self):
        block = build_module(AttentionBlock(8, heads=2), 6)
        x = np.random.default_rng(6).normal(size=(5, 8)).astype(np.float32)
        perm = np.random.default_rng(7).permutation(5)
        out = block(tt(x)).data
        out_p = block(tt(x[perm])).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-6)

    def test_identical_tokens_stay_identical(self):
        block = build_module(AttentionBlock(8), 8)
        x = np.tile(np.random.default_rng(8).normal(size=(1, 8)), (4, 1))
        out = block(tt(x)).data
        np.testing.assert_allclose(out, np.tile(out[:1], (4, 1)), atol=1e-6)

    def test_single_token(self):
        block = build_module(AttentionBlock(8), 9, dtype=np.float64)
        x = np.random.default_rng(9).normal(size=(1, 8))
        np.testing.assert_allclose(block(T.Tensor(x.copy())).data,
                                   brute_force_attention(block, x), atol=1e-6)

    def test_bad_head_split_rejected(self):
        with pytest.raises(ConfigError):
            AttentionBlock(8, heads=3)


class TestRegistry:
    def test_same_seed_identical_parameters(self):
        a = build_module(PointwiseConv(4, 8), 3)
        b = build_module(PointwiseConv(4, 8), 3)
        for k in a.parameters():
            np.testing.assert_array_equal(a.parameters()[k].data,
                                          b.parameters()[k].data)

    def test_fan_in_bound(self):
        enc = build_module(Encoder(EncoderSpec((4, 8, 8, 8), (1, 1, 1, 1), "group")), 4)
        for name, p in enc.parameters().items():
            if p.data.ndim > 1:
                fan_in = int(np.prod(p.data.shape[1:]))
                assert np.abs(p.data).max() <= 1.0 / np.sqrt(fan_in) + 1e-7, name

    def test_duplicate_name_rejected(self):
        class Bad(Module):
            def build(self):
                self.param("w", (2,))
                self.param("w", (2,))
                return self

        with pytest.raises(RegistryError):
            build_module(Bad(), 0)

    def test_full_model_names_unique(self):
        from pnpnet.model import PnPConfig, build_model
        model = build_model(PnPConfig(channels=(4, 8, 8, 8)), 0)
        names = list(model.parameters())
        assert len(names) == len(set(names))
