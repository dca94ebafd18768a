"""Pulling branch: center atlas, class-clustering update of centers and
mask embeddings, and the pseudo-center supervision target."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import AttentionBlock, ConfigError, Module, PointwiseConv


class CenterAtlas(Module):
    """Overcomplete bank of reference centers merged into N class centers.

    The merge mixes along the center axis: C_init = W2 . gelu(W1 . A),
    A (n_refs x dim), W1 (n_refs x n_refs), W2 (n_classes x n_refs).
    """

    def __init__(self, n_classes, n_refs=50, dim=192):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if n_refs <= n_classes:
            raise ConfigError("atlas size %d must exceed class count %d"
                              % (n_refs, n_classes))
        self.n_classes, self.n_refs, self.dim = n_classes, n_refs, dim

    def build(self):
        self.atlas = self.param("atlas", (self.n_refs, self.dim), fan_in=self.dim)
        self.w1 = self.param("w1", (self.n_refs, self.n_refs))
        self.w2 = self.param("w2", (self.n_classes, self.n_refs))
        return self

    def cluster(self):
        """Merge the atlas into (n_classes, dim) initial centers."""
        hidden = T.gelu(T.matmul(self.w1, self.atlas))
        return T.matmul(self.w2, hidden)


def atlas_init(seed, n_refs, dim, n_classes, dtype=np.float32):
    from .nn import build_module
    return build_module(CenterAtlas(n_classes, n_refs, dim), seed, dtype)


def cluster_update(q_c, k_f, v_f):
    """Soft-assignment center update given token queries and voxel keys/values.

    q_c: (N, D) center queries; k_f, v_f: (D, h, w, l) transformed features.
    Returns (mask_logits, mask_embeddings, updated_centers):
      mask logits   M(n, xyz) = sum_i q_c(n,i) k_f(i,xyz)
      embeddings    channel softmax of M (sums to 1 per voxel)
      centers       q_c + M_hat . v_f^T   (soft K-means increment)
    """
    n, dim = q_c.shape
    spatial = k_f.shape[1:]
    m = int(np.prod(spatial))
    k2 = T.reshape(k_f, (dim, m))
    v2 = T.reshape(v_f, (dim, m))
    logits = T.matmul(q_c, k2)                      # (N, M)
    m_hat = T.softmax_axis(logits, axis=0)
    increment = T.matmul(m_hat, T.transpose(v2))    # (N, D)
    centers = T.add(q_c, increment)
    return (T.reshape(logits, (n,) + spatial),
            T.reshape(m_hat, (n,) + spatial),
            centers)


class ClassClusterModule(Module):
    """One clustering step at a given feature scale.

    Centers pass through a token self-attention block, skip features are
    projected to key/value maps, and the soft voxel assignment produces the
    mask embeddings plus the residual center update.
    """

    def __init__(self, n_classes, dim, skip_channels, heads=1):
        super().__init__()
        self.n_classes, self.dim, self.skip_channels = n_classes, dim, skip_channels
        self.heads = heads

    def build(self):
        self.attn = self.child("attn", AttentionBlock(self.dim, self.heads)).build()
        self.key = self.child("key", PointwiseConv(self.skip_channels, self.dim,
                                                   bias=False)).build()
        # hotter assignment logits at init: default-scale keys leave the
        # class softmax near-uniform for most of a short training run
        self.key.w.data *= 4.0
        self.value = self.child("value", PointwiseConv(self.skip_channels, self.dim,
                                                       bias=False)).build()
        return self

    def __call__(self, centers, skip, normalize=True):
        q_c = self.attn(centers)
        k_f = self.key(skip)
        v_f = self.value(skip)
        _, m_hat, updated = cluster_update(q_c, k_f, v_f)
        if normalize:
            # rescale the raw voxel-sum increment by each class's soft
            # assignment mass so center magnitudes stay volume-independent
            n = m_hat.shape[0]
            mass = T.reduce_sum(T.reshape(m_hat, (n, m_hat.size // n)),
                                axes=(1,), keepdims=True)
            eps = T.as_tensor(np.asarray(1e-6, dtype=m_hat.data.dtype))
            ones = T.as_tensor(np.ones((1, q_c.shape[1]), dtype=m_hat.data.dtype))
            denom = T.matmul(T.add(mass, eps), ones)
            inc = T.div(T.sub(updated, q_c), denom)
            updated = T.add(q_c, inc)
        return m_hat, updated


def pseudo_centers(one_hot, features, eps=1e-6, normalize=True):
    """Per-class target centers from ground truth and raw encoder features.

    one_hot: (N, ...) 0/1 mask, one-hot over classes per voxel;
    features: (D, ...) feature map at the same resolution.
    Returns a detached (N, D) numpy array: per-class mean feature vectors
    (count-normalized; classes with no voxels get zero rows). normalize=False
    keeps the raw weighted sum.
    """
    o = np.asarray(one_hot.data if isinstance(one_hot, T.Tensor) else one_hot,
                   dtype=np.float64)
    f = np.asarray(features.data if isinstance(features, T.Tensor) else features,
                   dtype=np.float64)
    if o.shape[1:] != f.shape[1:]:
        raise T.DimensionError("pseudo_centers: %r vs %r" % (o.shape, f.shape))
    o2 = o.reshape(o.shape[0], -1)
    if not (np.all((o2 == 0) | (o2 == 1)) and np.allclose(o2.sum(axis=0), 1.0)):
        raise ValueError("pseudo_centers: mask is not one-hot over classes")
    f2 = f.reshape(f.shape[0], -1)
    sums = o2 @ f2.T                                  # (N, D)
    if not normalize:
        return sums
    counts = o2.sum(axis=1, keepdims=True)
    return sums / (counts + eps)


def center_loss(c_gt, c_hat):
    """Squared L2 distance between target and updated centers.

    c_gt is a plain array (supervision signal, no gradient)."""
    target = T.as_tensor(np.asarray(c_gt, dtype=c_hat.dtype))
    if target.shape != c_hat.shape:
        raise T.DimensionError("center_loss: %r vs %r" % (target.shape, c_hat.shape))
    return T.reduce_sum(T.square(T.sub(c_hat, target)))
