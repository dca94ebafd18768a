"""Reusable network blocks: residual conv units, the encoder skeleton,
token self-attention, and deterministic parameter initialization."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RegistryError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class Module:
    """Tree of submodules with uniquely named parameters.

    Parameters are created through self.param() during construction. Each
    draw is seeded by (tree seed, hash of the parameter's qualified name),
    so the whole tree is a pure function of the seed and a given parameter's
    init does not depend on which sibling modules exist.
    """

    def __init__(self):
        self._params = {}
        self._children = {}
        self._seed = None
        self._path = ""
        self._dtype = np.float32

    def _setup(self, seed, dtype, path=""):
        self._seed = seed
        self._path = path
        self._dtype = dtype

    def child(self, name, module):
        if name in self._children or name in self._params:
            raise RegistryError("duplicate module name %r" % name)
        module._setup(self._seed, self._dtype, self._path + name + ".")
        self._children[name] = module
        return module

    def param(self, name, shape, fan_in=None, init="uniform", value=None):
        if name in self._params or name in self._children:
            raise RegistryError("duplicate parameter name %r" % name)
        if value is not None:
            data = np.asarray(value, dtype=self._dtype)
            if data.shape != tuple(shape):
                raise RegistryError("explicit value shape %r != %r" % (data.shape, shape))
        elif init == "zeros":
            data = np.zeros(shape, dtype=self._dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self._dtype)
        else:
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(1, fan_in))
            rng = np.random.default_rng([self._seed,
                                         _name_key(self._path + name)])
            data = rng.uniform(-bound, bound, size=shape).astype(self._dtype)
        p = Tensor(data, requires_grad=True)
        p.name = name
        self._params[name] = p
        return p

    def parameters(self, prefix=""):
        """Flat dict of hierarchical name -> Tensor."""
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            sub = child.parameters(prefix + name + ".")
            for k in sub:
                if k in out:
                    raise RegistryError("duplicate parameter name %r" % k)
            out.update(sub)
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def _name_key(name):
    """64-bit FNV-1a of a qualified parameter name, as an RNG seed word."""
    h = 0xCBF29CE484222325
    for byte in name.encode():
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def build_module(module, seed, dtype=np.float32):
    """Seed a module tree and build its parameters.

    Same seed -> bit-identical parameters; each parameter's draw depends
    only on (seed, qualified name), not on construction order.
    """
    module._setup(seed, dtype)
    return module.build()


class ChannelNorm(Module):
    """Normalization with per-channel affine. kind='group' normalizes over the
    whole tensor (single group); kind='batch' normalizes each channel over
    its spatial extent (batch statistics degenerate at batch size 1)."""

    def __init__(self, channels, kind="group"):
        super().__init__()
        if kind not in ("group", "batch"):
            raise ConfigError("norm kind must be 'group' or 'batch'")
        self.kind = kind
        self.channels = channels

    def build(self):
        self.gamma = self.param("gamma", (self.channels,), init="ones")
        self.beta = self.param("beta", (self.channels,), init="zeros")
        return self

    def __call__(self, x):
        if self.kind == "group":
            return T.group_norm(x, self.gamma, self.beta)
        return T.instance_norm(x, self.gamma, self.beta)


class ConvLayer(Module):
    def __init__(self, cin, cout, stride=1, bias=True):
        super().__init__()
        self.cin, self.cout, self.stride, self.use_bias = cin, cout, stride, bias

    def build(self):
        self.w = self.param("w", (self.cout, self.cin, 3, 3, 3))
        self.b = self.param("b", (self.cout,), init="zeros") if self.use_bias else None
        return self

    def __call__(self, x):
        return T.conv3d(x, self.w, self.b, stride=self.stride, pad=1)


class PointwiseConv(Module):
    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.cin, self.cout, self.use_bias = cin, cout, bias

    def build(self):
        self.w = self.param("w", (self.cout, self.cin))
        self.b = self.param("b", (self.cout,), init="zeros") if self.use_bias else None
        return self

    def __call__(self, x):
        return T.conv1x1(x, self.w, self.b)


class ResidualBlock(Module):
    """conv-norm-relu twice with identity (or pointwise projection) shortcut."""

    def __init__(self, cin, cout, norm="group"):
        super().__init__()
        self.cin, self.cout, self.norm_kind = cin, cout, norm

    def build(self):
        self.conv1 = self.child("conv1", ConvLayer(self.cin, self.cout)).build()
        self.n1 = self.child("n1", ChannelNorm(self.cout, self.norm_kind)).build()
        self.conv2 = self.child("conv2", ConvLayer(self.cout, self.cout)).build()
        self.n2 = self.child("n2", ChannelNorm(self.cout, self.norm_kind)).build()
        if self.cin != self.cout:
            self.proj = self.child("proj", PointwiseConv(self.cin, self.cout, bias=False)).build()
        else:
            self.proj = None
        return self

    def __call__(self, x):
        y = T.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        shortcut = self.proj(x) if self.proj is not None else x
        return T.relu(T.add(y, shortcut))


class EncoderSpec:
    def __init__(self, channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), norm="group"):
        channels, blocks = tuple(channels), tuple(blocks)
        if len(channels) != len(blocks):
            raise ConfigError("channels and blocks must have equal length")
        if any(c <= 0 for c in channels):
            raise ConfigError("channels must be strictly positive")
        self.channels = channels
        self.blocks = blocks
        self.norm = norm
        self.scales = tuple(2 ** (i + 1) for i in range(len(channels)))


class Encoder(Module):
    """Stride-2 downsampling stages emitting skip features at 1/2 .. 1/16."""

    def __init__(self, spec: EncoderSpec, in_channels=1):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels

    def build(self):
        cin = self.in_channels
        self.stages = []
        for i, (c, nblocks) in enumerate(zip(self.spec.channels, self.spec.blocks)):
            down = self.child("stage%d.down" % i, ConvLayer(cin, c, stride=2)).build()
            blocks = [self.child("stage%d.block%d" % (i, j),
                                 ResidualBlock(c, c, self.spec.norm)).build()
                      for j in range(nblocks)]
            self.stages.append((down, blocks))
            cin = c
        return self

    def __call__(self, x):
        if x.data.ndim != 4:
            raise T.DimensionError("encoder expects (C,D,H,W) input")
        divisor = self.spec.scales[-1]
        for n in x.shape[1:]:
            if n % divisor != 0:
                raise T.DimensionError(
                    "encoder input extents must be divisible by %d, got %r"
                    % (divisor, x.shape[1:]))
        skips = []
        h = x
        for down, blocks in self.stages:
            h = down(h)
            for blk in blocks:
                h = blk(h)
            skips.append(h)
        return skips


class DecoderStage(Module):
    """Upsample-concatenate-convolve fusion of a deep feature with a skip."""

    def __init__(self, deep_channels, skip_channels, out_channels, norm="group"):
        super().__init__()
        self.deep_channels, self.skip_channels = deep_channels, skip_channels
        self.out_channels, self.norm_kind = out_channels, norm

    def build(self):
        self.block = self.child(
            "block", ResidualBlock(self.deep_channels + self.skip_channels,
                                   self.out_channels, self.norm_kind)).build()
        return self

    def __call__(self, deep, skip):
        up = T.upsample_trilinear(deep, 2)
        if up.shape[1:] != skip.shape[1:]:
            raise T.DimensionError(
                "decoder stage: upsampled deep %r does not match skip %r"
                % (up.shape[1:], skip.shape[1:]))
        return self.block(T.concat_channels([up, skip]))


class AttentionBlock(Module):
    """Pre-norm token self-attention + MLP over an (N, D) token matrix."""

    def __init__(self, dim, heads=1, mlp_ratio=4):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError("token dim %d not divisible by %d heads" % (dim, heads))
        self.dim, self.heads, self.mlp_ratio = dim, heads, mlp_ratio

    def build(self):
        d = self.dim
        self.wq = self.param("wq", (d, d))
        self.wk = self.param("wk", (d, d))
        self.wv = self.param("wv", (d, d))
        self.wo = self.param("wo", (d, d))
        self.ln1_g = self.param("ln1.gamma", (d,), init="ones")
        self.ln1_b = self.param("ln1.beta", (d,), init="zeros")
        self.ln2_g = self.param("ln2.gamma", (d,), init="ones")
        self.ln2_b = self.param("ln2.beta", (d,), init="zeros")
        hidden = d * self.mlp_ratio
        self.mlp1 = self.param("mlp1", (d, hidden))
        self.mlp1_b = self.param("mlp1.b", (hidden,), init="zeros")
        self.mlp2 = self.param("mlp2", (hidden, d))
        self.mlp2_b = self.param("mlp2.b", (d,), init="zeros")
        return self

    def __call__(self, tokens):
        n, d = tokens.shape
        h = T.layer_norm(tokens, self.ln1_g, self.ln1_b)
        q = T.matmul(h, self.wq)
        k = T.matmul(h, self.wk)
        v = T.matmul(h, self.wv)
        dh = d // self.heads
        # heads select disjoint slices of the feature axis
        attn_parts = []
        for i in range(self.heads):
            sel = np.zeros((d, dh), dtype=q.dtype)
            sel[i * dh:(i + 1) * dh, :] = np.eye(dh, dtype=q.dtype)
            sel_t = T.as_tensor(sel)
            qi, ki, vi = T.matmul(q, sel_t), T.matmul(k, sel_t), T.matmul(v, sel_t)
            scores = T.scale(T.matmul(qi, T.transpose(ki)), 1.0 / np.sqrt(dh))
            weights = T.softmax_axis(scores, axis=1)
            attn_parts.append(T.matmul(weights, vi))
        attn = attn_parts[0] if self.heads == 1 else _concat_cols(attn_parts)
        tokens = T.add(tokens, T.matmul(attn, self.wo))
        h2 = T.layer_norm(tokens, self.ln2_g, self.ln2_b)
        m = T.gelu(T.add(T.matmul(h2, self.mlp1), _row(self.mlp1_b, n)))
        m = T.add(T.matmul(m, self.mlp2), _row(self.mlp2_b, n))
        return T.add(tokens, m)


def _row(bias, nrows):
    """Broadcast a (H,) bias over nrows rows of a matmul output."""
    ones = T.as_tensor(np.ones((nrows, 1), dtype=bias.dtype))
    return T.matmul(ones, T.reshape(bias, (1, bias.size)))


def _concat_cols(parts):
    # column-axis concat via transpose + channel concat on (D_i, N)
    return T.transpose(T.concat_channels([T.transpose(p) for p in parts]))
