"""Pushing branch: edge-constrained differential kernels and the semantic
difference refinement of skip features.

The 3x3x3 differential kernel has its 8 cube corners hard-pinned to
alternating +1/-1 (every cube edge joins opposite signs), and the other
19 positions learnable. The pinning is realized by masking: the stored
parameter only contributes at non-corner positions, so optimizer steps can
never move the corners.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, PointwiseConv


class ConstraintError(RuntimeError):
    pass


def build_eid_template():
    """(fixed, free_mask): corner parity pattern and the 19-slot mask.

    Corner (i,j,k), i,j,k in {0,2}, gets +1 when (i+j+k)/2 is even and -1
    when odd, so all 12 cube edges join a (+1, -1) pair.
    """
    fixed = np.zeros((3, 3, 3), dtype=np.float64)
    free = np.ones((3, 3, 3), dtype=np.float64)
    for i in (0, 2):
        for j in (0, 2):
            for k in (0, 2):
                fixed[i, j, k] = 1.0 if (i + j + k) // 2 % 2 == 0 else -1.0
                free[i, j, k] = 0.0
    return fixed, free


def corner_indices():
    return [(i, j, k) for i in (0, 2) for j in (0, 2) for k in (0, 2)]


def edge_pairs():
    """The 12 cube edges as corner index pairs."""
    corners = corner_indices()
    pairs = []
    for a in corners:
        for b in corners:
            if a < b and sum(abs(x - y) for x, y in zip(a, b)) == 2:
                pairs.append((a, b))
    return pairs


def check_eid_kernel(kernel):
    """Validate corner values and edge sign alternation of a (..,3,3,3) stack."""
    fixed, _ = build_eid_template()
    k = np.asarray(kernel)
    for idx in corner_indices():
        vals = k[(Ellipsis,) + idx]
        want = fixed[idx]
        if not np.all(vals == want):
            raise ConstraintError("corner %r is %r, expected %r" % (idx, vals, want))
    for a, b in edge_pairs():
        if not np.all(k[(Ellipsis,) + a] * k[(Ellipsis,) + b] == -1.0):
            raise ConstraintError("edge %r-%r does not join opposite signs" % (a, b))


class EidKernel(Module):
    """Depthwise stack of edge-constrained 3x3x3 kernels (one per channel)."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels

    def build(self):
        fixed, free = build_eid_template()
        # learnable entries start at zero except the center, which starts at
        # the differential value -1; corner slots carry the pinned +/-1 values
        # so the stored parameter is itself a valid constrained kernel
        init = np.broadcast_to(fixed, (self.channels, 3, 3, 3)).copy()
        init[:, 1, 1, 1] = -1.0
        self.free = self.param("free", (self.channels, 3, 3, 3), value=init)
        self._fixed = T.as_tensor(np.broadcast_to(fixed, init.shape).astype(self._dtype).copy())
        self._mask = T.as_tensor(np.broadcast_to(free, init.shape).astype(self._dtype).copy())
        return self

    def effective(self):
        """Kernel actually applied: masked free entries plus pinned corners.

        Corner slots of the stored parameter are multiplied by zero, so no
        gradient ever reaches them; project() additionally rewrites them in
        place to undo drift from weight decay or direct edits.
        """
        return T.add(T.mul(self.free, self._mask), self._fixed)

    def project(self):
        self.free.data[...] = (self.free.data * self._mask.data
                               + self._fixed.data)

    def __call__(self, x):
        return eid_conv(x, self)


def eid_conv(x, kernel: EidKernel):
    eff = kernel.effective()
    check_eid_kernel(eff.data)
    return T.depthwise_conv3d(x, eff)


class SdmParams(Module):
    """Parameters of one semantic-difference refinement at a given scale.

    alpha/beta: edge-constrained depthwise kernels for the guidance and skip
    features; h: pointwise projection of the squared guidance differential;
    omega: vanilla 3x3x3 mixing kernel; lambda_r/nu_r: learnable residual
    weights (start 1.0 / 0.1).
    """

    def __init__(self, channels, guide_channels):
        super().__init__()
        self.channels = channels
        self.guide_channels = guide_channels

    def build(self):
        c = self.channels
        self.proj_g = self.child("proj_g", PointwiseConv(self.guide_channels, c,
                                                         bias=False)).build()
        self.alpha = self.child("alpha", EidKernel(c)).build()
        self.beta = self.child("beta", EidKernel(c)).build()
        self.h = self.child("h", PointwiseConv(c, c, bias=False)).build()
        # small gain keeps the refinement branch near-identity at init: the
        # squared edge response is large-amplitude, and an untrained guidance
        # product otherwise drowns the skip it is meant to refine
        self.h.w.data *= 0.05
        self.omega = self.param("omega", (c, c, 3, 3, 3))
        self.lambda_r = self.param("lambda_r", (1,), value=np.array([1.0]))
        self.nu_r = self.param("nu_r", (1,), value=np.array([0.1]))
        return self


def sdm_forward(f, g, params: SdmParams, upsample_guide=True):
    """One diffusion-style refinement step of skip feature f.

    g is the precedent (deeper) decoder feature; when upsample_guide is set
    it is trilinearly upsampled to f's resolution. The guidance map is the
    pointwise-projected square of g's edge response; it multiplies f's
    differential feature, a vanilla conv mixes the product, and the result
    is blended with f through the learnable residual weights.
    """
    if upsample_guide:
        g = T.upsample_trilinear(g, 2)
    if g.shape[1:] != f.shape[1:]:
        raise T.DimensionError("sdm_forward: guide %r vs skip %r" % (g.shape, f.shape))
    gp = params.proj_g(g)
    sq = T.square(eid_conv(gp, params.alpha))
    assert np.all(sq.data >= 0.0)
    s = params.h(sq)
    df = eid_conv(f, params.beta)
    f_hat = T.conv3d(T.mul(s, df), params.omega, bias=None, stride=1, pad=1)
    return T.add(T.mul(f, params.lambda_r), T.mul(f_hat, params.nu_r))


def sdm_iterate(f0, g, params: SdmParams, iters, upsample_guide=True):
    """Apply the refinement `iters` times with the guidance held fixed."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if upsample_guide:
        g = T.upsample_trilinear(g, 2)
    f = f0
    for _ in range(iters):
        f = sdm_forward(f, g, params, upsample_guide=False)
    return f


def sdm_reference(f, g_up, params: SdmParams):
    """Literal neighborhood-sum evaluation of one refinement step.

    Triple loops over voxels and explicit gathers over the 27-neighborhood;
    shares only the parameter values with sdm_forward, none of the
    convolution machinery. Independent oracle for tests.
    """
    fd = f.data.astype(np.float64)
    gd = g_up.data.astype(np.float64)
    c, d, h, w = fd.shape
    gp = np.einsum("oc,cdhw->odhw", params.proj_g.w.data.astype(np.float64), gd)
    alpha = params.alpha.effective().data.astype(np.float64)
    beta = params.beta.effective().data.astype(np.float64)
    omega = params.omega.data.astype(np.float64)
    hW = params.h.w.data.astype(np.float64)

    def neighborhood_sum(vol, kern):
        out = np.zeros_like(vol)
        for ci in range(vol.shape[0]):
            for z in range(d):
                for y in range(h):
                    for x in range(w):
                        acc = 0.0
                        for dz in (-1, 0, 1):
                            for dy in (-1, 0, 1):
                                for dx in (-1, 0, 1):
                                    zz, yy, xx = z + dz, y + dy, x + dx
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < w:
                                        acc += (kern[ci, dz + 1, dy + 1, dx + 1]
                                                * vol[ci, zz, yy, xx])
                        out[ci, z, y, x] = acc
        return out

    sq = neighborhood_sum(gp, alpha) ** 2
    s = np.einsum("oc,cdhw->odhw", hW, sq)
    df = neighborhood_sum(fd, beta)
    prod = s * df
    f_hat = np.zeros_like(fd)
    for co in range(c):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    acc = 0.0
                    for ci in range(c):
                        for dz in (-1, 0, 1):
                            for dy in (-1, 0, 1):
                                for dx in (-1, 0, 1):
                                    zz, yy, xx = z + dz, y + dy, x + dx
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < w:
                                        acc += (omega[co, ci, dz + 1, dy + 1, dx + 1]
                                                * prod[ci, zz, yy, xx])
                    f_hat[co, z, y, x] = acc
    lam = float(params.lambda_r.data[0])
    nu = float(params.nu_r.data[0])
    return lam * fd + nu * f_hat
