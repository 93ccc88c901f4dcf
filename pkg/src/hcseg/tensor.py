"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its inputs and a closure that maps the
output gradient to input gradients.  ``backward`` replays those records in
reverse topological order, visiting each node once.

The op set is deliberately small: what the clustering backbone, the decoding
chain, the two segmentation heads and the losses need, plus a few fused
kernels (conv, layer norm, softmax) whose closed-form backward is both faster
and tighter than composing primitives.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

DEBUG = os.environ.get("HCSEG_DEBUG", "") not in ("", "0")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    pass


class Tensor:
    """N-dimensional float64 array that optionally tracks gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out._op = op
        out._consumed = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from {op}")
        return out

    # --- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._result(self.data, (), None, "detach")

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # --- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, accumulate=False):
        backward(self, accumulate=accumulate)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- backward ----------------------------------------------------------------

def backward(loss, accumulate=False):
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``.

    Leaf gradients accumulate across calls on different graphs; replaying the
    same graph twice raises unless ``accumulate=True``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor requiring grad")
    if loss._consumed and not accumulate:
        raise RuntimeError("backward already ran on this graph; pass accumulate=True to add again")
    loss._consumed = True

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                          "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b),
                          lambda g: (_unbroadcast(g / bd, ad.shape),
                                     _unbroadcast(-g * out / bd, bd.shape)),
                          "div")


def power(a, p):
    ad = a.data
    return Tensor._result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a):
    ad = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return Tensor._result(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),), "silu")


def tabs(a):
    """Absolute value; the subgradient at 0 is 0."""
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clamp_min(a, lo):
    ad = a.data
    keep = ad > lo
    return Tensor._result(np.where(keep, ad, lo), (a,), lambda g: (g * keep,), "clamp_min")


def clamp(a, lo, hi):
    ad = a.data
    keep = (ad > lo) & (ad < hi)
    return Tensor._result(np.clip(ad, lo, hi), (a,), lambda g: (g * keep,), "clamp")


# --- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                          lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    n = len(ts)
    return Tensor._result(np.stack([t.data for t in ts], axis=axis), tuple(ts),
                          lambda g: tuple(np.squeeze(x, axis) for x in np.split(g, n, axis=axis)),
                          "stack")


def repeat_nearest(a, factor):
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return a
    shape = a.shape
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], factor, shape[-1], factor))
        return (g.sum(axis=(-3, -1)),)

    return Tensor._result(out, (a,), bw, "repeat_nearest")


# --- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


# --- fused kernels -----------------------------------------------------------

def softmax_rows(x, scale=1.0, mask=None):
    """Row-wise softmax of ``x / scale`` over the last axis.

    Uses max subtraction, so adding a constant to a row leaves the output
    unchanged.  ``mask`` (bool, broadcastable) excludes entries: they get
    exactly zero probability and zero gradient.
    """
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    z = x.data / scale
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)) / scale,)

    return Tensor._result(out, (x,), bw, "softmax_rows")


def layer_norm(x, gain, bias, eps=1e-5, axis=-2):
    """Normalise over the channel axis (default: rows of a C x N map), then apply gain/bias.

    ``gain`` and ``bias`` have shape (C,).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    ax = axis % xd.ndim
    C = xd.shape[ax]
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layer_norm affine params must have shape ({C},)")
    bshape = [1] * xd.ndim
    bshape[ax] = C
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(bshape)
    out = xhat * gd + bias.data.reshape(bshape)
    red = tuple(i for i in range(xd.ndim) if i != ax)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=ax, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=ax, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._result(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x, axis=-2, eps=1e-12):
    """Divide each vector along ``axis`` by max(norm, eps)."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    big = n > eps
    d = np.where(big, n, eps)
    out = xd / d

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - out * proj) / d, g / eps),)

    return Tensor._result(out, (x,), bw, "l2_normalize")


def l2_normalize_columns(x, eps=1e-12):
    return l2_normalize(x, axis=-2, eps=eps)


def conv_1x1(x, w, b=None):
    """Per-pixel linear map.

    ``x`` is (..., C_in, N) or (..., C_in, H, W); ``w`` is (C_out, C_in).
    """
    spatial = None
    flat = x
    if x.ndim >= 3 and w.shape[1] == x.shape[-3]:
        spatial = x.shape[-2:]
        flat = reshape(x, x.shape[:-2] + (spatial[0] * spatial[1],))
    if w.shape[1] != flat.shape[-2]:
        raise DimensionError(f"conv_1x1 channels disagree: weight {w.shape} vs input {x.shape}")
    out = matmul(w, flat)
    if b is not None:
        out = out + reshape(b, (b.shape[0], 1))
    if spatial is not None:
        out = reshape(out, out.shape[:-1] + spatial)
    return out


def conv2d_3x3(x, w, b, stride=1):
    """3x3 convolution with padding 1.  x: (B, C_in, H, W), w: (C_out, C_in, 3, 3)."""
    if x.ndim != 4:
        raise DimensionError("conv2d_3x3 expects (B, C, H, W)")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    if w.shape[1] != Cin:
        raise DimensionError(f"conv channels disagree: weight {w.shape} vs input {x.shape}")
    if stride == 2 and (H % 2 or W % 2):
        raise DimensionError(f"stride-2 conv needs even H, W; got {H}x{W}")
    Ho, Wo = (H, W) if stride == 1 else (H // 2, W // 2)
    # im2col laid out (C_in*9, B*Ho*Wo) so both directions are single matmuls
    xp = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((Cin, 9, B, Ho, Wo))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
    cols = cols.reshape(Cin * 9, B * Ho * Wo)
    wm = w.data.reshape(Cout, Cin * 9)
    out = (wm @ cols).reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3) + b.data[:, None, None]

    def bw(g):
        gt = np.ascontiguousarray(g.reshape(B, Cout, Ho, Wo).transpose(1, 0, 2, 3)).reshape(Cout, -1)
        gw = (gt @ cols.T).reshape(w.shape)
        gb = gt.sum(axis=1)
        gx = None
        if x.requires_grad:
            gc = (wm.T @ gt).reshape(Cin, 9, B, Ho, Wo)
            gxp = np.zeros_like(xp)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += gc[:, ky * 3 + kx]
            gx = gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return Tensor._result(np.ascontiguousarray(out), (x, w, b), bw, "conv2d_3x3")


def avg_pool2(x):
    """Average 2x2 blocks of the last two axes."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even H, W; got {H}x{W}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Tensor._result(out, (x,), bw, "avg_pool2")


def strided_downsample(x, kind="avg_pool2", weight=None, bias=None):
    """Halve the spatial resolution of (C, H, W) or (B, C, H, W) features.

    ``avg_pool2`` averages 2x2 blocks; ``strided_conv3`` applies the given 3x3
    stride-2 convolution (padding 1).
    """
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise DimensionError(f"downsampling needs even H, W; got {H}x{W}")
    if kind == "avg_pool2":
        return avg_pool2(x)
    if kind == "strided_conv3":
        if weight is None or bias is None:
            raise ValueError("strided_conv3 needs weight and bias")
        single = x.ndim == 3
        xb = reshape(x, (1,) + x.shape) if single else x
        out = conv2d_3x3(xb, weight, bias, stride=2)
        return reshape(out, out.shape[1:]) if single else out
    raise ValueError(f"unknown downsample kind {kind!r}")


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(np.where(cond, a.data, b.data), (a, b),
                          lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                     _unbroadcast(np.where(cond, 0.0, g), b.shape)),
                          "where")
