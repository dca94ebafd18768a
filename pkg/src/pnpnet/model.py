"""Full pull-push segmentation model: encoder, SDM-refined convolutional
decoder, chained clustering modules, token fusion, losses and the
training step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ccm import CenterAtlas, ClassClusterModule, center_loss, pseudo_centers
from .nn import (ConfigError, DecoderStage, Encoder, EncoderSpec, Module,
                 PointwiseConv, ResidualBlock, build_module)
from .sdm import SdmParams, check_eid_kernel, sdm_iterate


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class PnPConfig:
    n_classes: int = 3
    channels: tuple = (8, 16, 32, 64)
    blocks: tuple = (1, 1, 1, 1)
    norm: str = "group"
    center_dim: int = 32
    atlas_size: int = 12
    heads: int = 1
    sdm_iters: int = 1
    lambda_cc: float = 0.1
    enable_sdm: bool = True
    enable_ccm: bool = True
    normalize_pseudo_centers: bool = True
    normalize_center_update: bool = True

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.lambda_cc < 0:
            raise ConfigError("lambda_cc must be >= 0")
        self.channels = tuple(self.channels)
        self.blocks = tuple(self.blocks)


@dataclass
class ForwardOutputs:
    logits: T.Tensor
    t_push: T.Tensor | None = None
    t_pull: T.Tensor | None = None
    c_hat: T.Tensor | None = None
    c_gt: np.ndarray | None = None
    mask_embeddings: list = field(default_factory=list)


def fuse_tokens(t_pull, t_push):
    """Sigmoid-gated fusion: pull + pull * sigma(push)."""
    if t_pull.shape != t_push.shape:
        raise T.DimensionError("fuse_tokens: %r vs %r" % (t_pull.shape, t_push.shape))
    return T.add(t_pull, T.mul(t_pull, T.sigmoid(t_push)))


def one_hot(labels, n_classes, dtype=np.float32):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label index out of range [0, %d)" % n_classes)
    out = np.zeros((n_classes,) + labels.shape, dtype=dtype)
    flat = out.reshape(n_classes, -1)
    flat[labels.reshape(-1), np.arange(labels.size)] = 1.0
    return out


class PnPNet(Module):
    def __init__(self, config: PnPConfig):
        super().__init__()
        self.config = config

    def build(self):
        cfg = self.config
        c0, c1, c2, c3 = cfg.channels
        spec = EncoderSpec(cfg.channels, cfg.blocks, cfg.norm)
        self.encoder = self.child("encoder", Encoder(spec)).build()

        if cfg.enable_sdm:
            self.sdm3 = self.child("sdm3", SdmParams(c2, c3)).build()
            self.sdm2 = self.child("sdm2", SdmParams(c1, c2)).build()
            self.sdm1 = self.child("sdm1", SdmParams(c0, c1)).build()
        self.dec3 = self.child("dec3", DecoderStage(c3, c2, c2, cfg.norm)).build()
        self.dec2 = self.child("dec2", DecoderStage(c2, c1, c1, cfg.norm)).build()
        self.dec1 = self.child("dec1", DecoderStage(c1, c0, c0, cfg.norm)).build()
        self.final_block = self.child("final", ResidualBlock(c0, c0, cfg.norm)).build()

        n = cfg.n_classes
        if cfg.enable_ccm:
            self.atlas = self.child(
                "atlas", CenterAtlas(n, cfg.atlas_size, cfg.center_dim)).build()
            self.ccm8 = self.child(
                "ccm8", ClassClusterModule(n, cfg.center_dim, c2, cfg.heads)).build()
            self.ccm4 = self.child(
                "ccm4", ClassClusterModule(n, cfg.center_dim, c1, cfg.heads)).build()
            self.ccm2 = self.child(
                "ccm2", ClassClusterModule(n, cfg.center_dim, c0, cfg.heads)).build()
            # per-class pushing masks; tiled across the three embedding
            # scales for fusion so every scale is gated by the same mask
            self.push_proj = self.child("push_proj", PointwiseConv(c0, n)).build()
            # fused tokens are bounded ([0, 2] per channel), so the head gets
            # a hidden GELU layer for enough gain to emit sharp logits
            self.head_hidden = self.child("head_hidden",
                                          PointwiseConv(3 * n, 8 * n)).build()
            self.head = self.child("head", PointwiseConv(8 * n, n)).build()
        else:
            self.head = self.child("head", PointwiseConv(c0, n)).build()
        return self

    def _decode(self, skips):
        cfg = self.config
        s1, s2, s3, s4 = skips
        if cfg.enable_sdm:
            s3 = sdm_iterate(s3, s4, self.sdm3, cfg.sdm_iters)
        d3 = self.dec3(s4, s3)
        if cfg.enable_sdm:
            s2 = sdm_iterate(s2, d3, self.sdm2, cfg.sdm_iters)
        d2 = self.dec2(d3, s2)
        if cfg.enable_sdm:
            s1 = sdm_iterate(s1, d2, self.sdm1, cfg.sdm_iters)
        d1 = self.dec1(d2, s1)
        return self.final_block(T.upsample_trilinear(d1, 2))

    def forward(self, image, labels=None):
        cfg = self.config
        if isinstance(image, T.Tensor):
            x = image
        else:
            arr = np.asarray(image, dtype=self._dtype)
            if arr.ndim == 3:
                arr = arr[None]
            x = T.Tensor(arr)
        skips = self.encoder(x)
        push_feat = self._decode(skips)

        if not cfg.enable_ccm:
            logits = self.head(push_feat)
            return ForwardOutputs(logits=logits, t_push=push_feat)

        s1, s2, s3, _ = skips
        centers = self.atlas.cluster()
        norm = cfg.normalize_center_update
        m3, centers = self.ccm8(centers, s3, normalize=norm)
        m2, centers = self.ccm4(centers, s2, normalize=norm)
        m1, centers = self.ccm2(centers, s1, normalize=norm)
        t_pull = T.concat_channels([
            T.upsample_trilinear(m1, 2),
            T.upsample_trilinear(m2, 4),
            T.upsample_trilinear(m3, 8),
        ])
        t_push = self.push_proj(push_feat)
        t_f = fuse_tokens(t_pull, T.concat_channels([t_push, t_push, t_push]))
        logits = self.head(T.gelu(self.head_hidden(t_f)))

        c_gt = None
        if labels is not None:
            labels = np.asarray(labels)
            # supervision target lives in the finest CCM's value space
            o_half = one_hot(labels[::2, ::2, ::2], cfg.n_classes)
            v_half = self.ccm2.value(s1).detach()
            c_gt = pseudo_centers(o_half, v_half,
                                  normalize=cfg.normalize_pseudo_centers)
        return ForwardOutputs(logits=logits, t_push=t_push, t_pull=t_pull,
                              c_hat=centers, c_gt=c_gt,
                              mask_embeddings=[m1, m2, m3])

    def eid_kernels(self):
        """name -> effective edge-constrained kernel stack (numpy)."""
        out = {}
        if self.config.enable_sdm:
            for sname, sdm in (("sdm3", self.sdm3), ("sdm2", self.sdm2),
                               ("sdm1", self.sdm1)):
                out[sname + ".alpha"] = sdm.alpha.effective().data
                out[sname + ".beta"] = sdm.beta.effective().data
        return out

    def eid_modules(self):
        if not self.config.enable_sdm:
            return {}
        out = {}
        for sname, sdm in (("sdm3", self.sdm3), ("sdm2", self.sdm2),
                           ("sdm1", self.sdm1)):
            out[sname + ".alpha"] = sdm.alpha
            out[sname + ".beta"] = sdm.beta
        return out

    def project_eid(self):
        """Rewrite pinned corner slots after an optimizer step."""
        for kern in self.eid_modules().values():
            kern.project()

    def assert_eid_constraints(self):
        for name, kern in self.eid_modules().items():
            check_eid_kernel(kern.free.data)
            check_eid_kernel(kern.effective().data)


def dice_loss(logits, labels_one_hot, eps=1e-5):
    """Soft Dice over channel-softmaxed logits, averaged over classes."""
    n = logits.shape[0]
    o = T.as_tensor(np.asarray(labels_one_hot, dtype=logits.dtype))
    if o.shape != logits.shape:
        raise T.DimensionError("dice_loss: %r vs %r" % (o.shape, logits.shape))
    p = T.softmax_axis(logits, axis=0)
    p2 = T.reshape(p, (n, p.size // n))
    o2 = T.reshape(o, (n, o.size // n))
    inter = T.reduce_sum(T.mul(p2, o2), axes=(1,))
    denom = T.add(T.reduce_sum(p2, axes=(1,)), T.reduce_sum(o2, axes=(1,)))
    eps_t = T.as_tensor(np.asarray(eps, dtype=logits.dtype))
    per_class = T.div(T.add(T.scale(inter, 2.0), eps_t), T.add(denom, eps_t))
    return T.sub(T.as_tensor(np.asarray(1.0, dtype=logits.dtype)),
                 T.mean(per_class))


def total_loss(outputs: ForwardOutputs, labels, lambda_cc):
    """(total, dice, ce, center) scalar tensors; center is the raw value."""
    labels = np.asarray(labels)
    oh = one_hot(labels, outputs.logits.shape[0], dtype=outputs.logits.dtype)
    l_dice = dice_loss(outputs.logits, oh)
    l_ce = T.cross_entropy_logits(outputs.logits, labels)
    if outputs.c_hat is not None and outputs.c_gt is not None:
        l_cc = center_loss(outputs.c_gt, outputs.c_hat)
    else:
        l_cc = T.as_tensor(np.asarray(0.0, dtype=outputs.logits.dtype))
    total = T.add(T.add(l_dice, l_ce), T.scale(l_cc, lambda_cc))
    return total, l_dice, l_ce, l_cc


def train_step(model: PnPNet, optimizer, image, labels, lr_scale=1.0):
    """Forward, backward, optimizer step, constraint re-assertion.

    Returns (total, dice, ce, center) as floats."""
    optimizer.zero_grad()
    outputs = model.forward(image, labels=labels)
    total, l_dice, l_ce, l_cc = total_loss(outputs, labels, model.config.lambda_cc)
    vals = tuple(float(t.data) for t in (total, l_dice, l_ce, l_cc))
    if not np.isfinite(vals[0]):
        stats = outputs.logits.data
        raise NumericError(
            "non-finite loss %r; logits min=%g max=%g mean=%g"
            % (vals, np.nanmin(stats), np.nanmax(stats), np.nanmean(stats)))
    total.backward()
    optimizer.step(lr_scale)
    model.project_eid()
    model.assert_eid_constraints()
    return vals


def build_model(config: PnPConfig, seed, dtype=np.float32) -> PnPNet:
    return build_module(PnPNet(config), seed, dtype)


def predict_labels(model: PnPNet, image):
    out = model.forward(image)
    return np.argmax(out.logits.data, axis=0).astype(np.uint8)
