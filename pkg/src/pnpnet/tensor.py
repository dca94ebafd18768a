"""Dense tensor engine with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation graph needs: elementwise
arithmetic, matmul, 3x3x3 / pointwise / depthwise convolution, softmax,
normalization, trilinear upsampling, channel concat and reductions.

Conventions (fixed, relied on by the rest of the package):
  * convolution is cross-correlation (no kernel flip)
  * upsampling is align-corners-false with border clamping
  * backward() accumulates into existing .grad buffers; call zero_grad()
    between steps
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

# When True, every forward op asserts its output is finite.
DEBUG_CHECKS = False

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (e.g. non-scalar backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self.name = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse-mode sweep from a scalar node.

        Gradients accumulate into .grad; repeated sweeps keep accumulating
        until zero_grad() is called on the leaves.
        """
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                # leaf
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return self

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype, self.requires_grad)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return list(reversed(order))


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the graph only if some parent needs it."""
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in forward op output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Reduce a gradient back to `shape` (only scalar broadcast is supported)."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


def _check_binary(a, b, op):
    if a.data.size != 1 and b.data.size != 1 and a.shape != b.shape:
        raise DimensionError("%s: shape mismatch %r vs %r" % (op, a.shape, b.shape))


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a):
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / shape ops

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: inner extents %d vs %d" % (a.shape[1], b.shape[0]))
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_channels(xs):
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    spatial = xs[0].shape[1:]
    for x in xs:
        if x.shape[1:] != spatial:
            raise DimensionError("concat_channels: spatial mismatch %r vs %r"
                                 % (x.shape[1:], spatial))
    sizes = [x.shape[0] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(np.concatenate([x.data for x in xs], axis=0), tuple(xs), bwd)


def reduce_sum(a, axes=None, keepdims=False):
    if axes is None:
        out = np.asarray(a.data.sum())
        return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axes = tuple(axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), bwd)


def mean(a):
    return scale(reduce_sum(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# softmax / normalization

def softmax_axis(a, axis):
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError("softmax_axis: axis %d out of range" % axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm: affine parameters must have shape (%d,)" % d)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bwd)


def group_norm(x, gamma, beta, eps=1e-5):
    """Single-group normalization over the whole (C, ...) tensor with a
    per-channel affine. Degenerates gracefully at batch size 1, unlike
    batch statistics."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("group_norm: affine parameters must have shape (%d,)" % c)
    mu = x.data.mean()
    var = x.data.var()
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    gshape = (c,) + (1,) * (x.data.ndim - 1)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bwd(g):
        dgamma = (g * xhat).reshape(c, -1).sum(axis=1)
        dbeta = g.reshape(c, -1).sum(axis=1)
        dxhat = g * gamma.data.reshape(gshape)
        dx = (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean()) / std
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bwd)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Normalize each channel of (C, ...) over its spatial extent."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("instance_norm: affine parameters must have shape (%d,)" % c)
    axes = tuple(range(1, x.data.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    gshape = (c,) + (1,) * (x.data.ndim - 1)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bwd(g):
        dgamma = (g * xhat).reshape(c, -1).sum(axis=1)
        dbeta = g.reshape(c, -1).sum(axis=1)
        dxhat = g * gamma.data.reshape(gshape)
        dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) / std
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution

_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def conv3d(x, w, bias=None, stride=1, pad=1):
    """Cross-correlation of (Cin,D,H,W) with (Cout,Cin,3,3,3), zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise DimensionError("conv3d expects x (Cin,D,H,W) and w (Cout,Cin,3,3,3)")
    cin, d, h, wd = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if (kd, kh, kw) != (3, 3, 3):
        raise DimensionError("conv3d kernel spatial size is fixed at 3")
    if cin_w != cin:
        raise DimensionError("conv3d: input channels %d vs kernel %d" % (cin, cin_w))
    if pad not in (0, 1) or stride not in (1, 2):
        raise DimensionError("conv3d: pad must be 0/1 and stride 1/2")
    for n in (d, h, wd):
        if (n + 2 * pad - 3) // stride + 1 < 1:
            raise DimensionError("conv3d: empty output extent for input %r" % (x.shape,))
    do = (d + 2 * pad - 3) // stride + 1
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (wd + 2 * pad - 3) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    m = do * ho * wo
    col = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(cin * 27, m)
    w2 = w.data.reshape(cout, cin * 27)
    out = (w2 @ col).reshape(cout, do, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(cout, 1, 1, 1)

    def bwd(g):
        g2 = g.reshape(cout, m)
        dw = (g2 @ col.T).reshape(w.shape)
        dcol = (w2.T @ g2).reshape(cin, 3, 3, 3, do, ho, wo)
        dxp = np.zeros_like(xp)
        for i, j, k in _OFFSETS:
            dxp[:, i:i + stride * do:stride,
                j:j + stride * ho:stride,
                k:k + stride * wo:stride] += dcol[:, i, j, k]
        dx = dxp[:, pad:pad + d, pad:pad + h, pad:pad + wd] if pad else dxp
        if bias is not None:
            return (dx, dw, g2.sum(axis=1))
        return (dx, dw)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bwd)


def conv1x1(x, w, bias=None):
    """Pointwise channel mixing: x (Cin, ...), w (Cout, Cin)."""
    cin = x.shape[0]
    cout, cin_w = w.shape
    if cin_w != cin:
        raise DimensionError("conv1x1: input channels %d vs kernel %d" % (cin, cin_w))
    spatial = x.shape[1:]
    x2 = x.data.reshape(cin, -1)
    out = (w.data @ x2).reshape((cout,) + spatial)
    if bias is not None:
        out = out + bias.data.reshape((cout,) + (1,) * len(spatial))

    def bwd(g):
        g2 = g.reshape(cout, -1)
        dx = (w.data.T @ g2).reshape(x.shape)
        dw = g2 @ x2.T
        if bias is not None:
            return (dx, dw, g2.sum(axis=1))
        return (dx, dw)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bwd)


def depthwise_conv3d(x, w):
    """Per-channel 3x3x3 cross-correlation with pad=1: x (C,D,H,W), w (C,3,3,3)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1:] != (3, 3, 3):
        raise DimensionError("depthwise_conv3d expects x (C,D,H,W) and w (C,3,3,3)")
    if x.shape[0] != w.shape[0]:
        raise DimensionError("depthwise_conv3d: channel mismatch %d vs %d"
                             % (x.shape[0], w.shape[0]))
    c, d, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    out = np.einsum("cdhwijk,cijk->cdhw", win, w.data, optimize=True)

    def bwd(g):
        dw = np.einsum("cdhw,cdhwijk->cijk", g, win, optimize=True)
        dxp = np.zeros_like(xp)
        for i, j, k in _OFFSETS:
            dxp[:, i:i + d, j:j + h, k:k + wd] += g * w.data[:, i, j, k][:, None, None, None]
        return (dxp[:, 1:1 + d, 1:1 + h, 1:1 + wd], dw)

    return _make(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# trilinear upsampling

def _linear_axis_coeffs(n, factor):
    out = np.arange(n * factor)
    src = (out + 0.5) / factor - 0.5
    t0 = np.floor(src)
    w1 = src - t0
    i0 = np.clip(t0, 0, n - 1).astype(np.intp)
    i1 = np.clip(t0 + 1, 0, n - 1).astype(np.intp)
    return i0, i1, w1


def upsample_trilinear(x, factor):
    """Align-corners-false interpolation of (C,D,H,W) by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    coeffs = [_linear_axis_coeffs(n, factor) for n in x.shape[1:]]

    y = x.data
    for ax, (i0, i1, w1) in enumerate(coeffs, start=1):
        wshape = [1] * y.ndim
        wshape[ax] = len(w1)
        w1b = w1.reshape(wshape)
        y = np.take(y, i0, axis=ax) * (1.0 - w1b) + np.take(y, i1, axis=ax) * w1b

    def bwd(g):
        for ax in range(len(coeffs), 0, -1):
            i0, i1, w1 = coeffs[ax - 1]
            wshape = [1] * g.ndim
            wshape[ax] = len(w1)
            w1b = w1.reshape(wshape)
            n = x.shape[ax]
            gm = np.moveaxis(g, ax, 0)
            acc = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
            w1m = np.moveaxis(np.broadcast_to(w1b, g.shape), ax, 0)
            np.add.at(acc, i0, gm * (1.0 - w1m))
            np.add.at(acc, i1, gm * w1m)
            g = np.moveaxis(acc, 0, ax)
        return (g,)

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

def cross_entropy_logits(logits, labels):
    """Voxel-mean cross-entropy; logits (N, ...), labels integer array (...)."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise DimensionError("cross_entropy: label shape %r vs logits %r"
                             % (labels.shape, logits.shape))
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError("cross_entropy: label index out of range [0, %d)" % n)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=0, keepdims=True))
    lsm = z - logsumexp
    flat_labels = labels.reshape(-1)
    v = flat_labels.size
    picked = lsm.reshape(n, -1)[flat_labels, np.arange(v)]
    loss = np.asarray(-picked.mean())

    def bwd(g):
        p = np.exp(lsm)
        p = p.reshape(n, -1)
        p[flat_labels, np.arange(v)] -= 1.0
        return (float(g) / v * p.reshape(logits.shape),)

    return _make(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(f, xs, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f takes a list of Tensors and returns a scalar Tensor. Inputs are
    promoted to float64 so the finite differences are trustworthy.
    """
    leaves = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x,
                                dtype=np.float64), requires_grad=True)
              for x in xs]
    loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite analytic loss")
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(leaves).data)
            flat[i] = orig - h
            fm = float(f(leaves).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite finite-difference probe")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def grad_check_entries(f, params, entries, h=1e-4):
    """Spot-check selected (param, flat_index) entries of a larger graph.

    params is a dict name -> Tensor (float64). entries is a list of
    (name, flat_index). Returns max relative error over the entries.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for name, idx in entries:
        p = params[name]
        analytic = 0.0 if p.grad is None else p.grad.reshape(-1)[idx]
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        fp = float(f().data)
        flat[idx] = orig - h
        fm = float(f().data)
        flat[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
