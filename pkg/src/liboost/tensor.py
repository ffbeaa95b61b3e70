"""Dense float tensors with reverse-mode automatic differentiation.

Just enough machinery for small convolutional classifiers and input-gradient
computation: conv / pool / relu / linear / softmax cross-entropy, plus a few
elementwise helpers used by tests and attack loops. Arrays are row-major
numpy buffers; images are laid out channel-first (C, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform; message names both shapes."""


class NonFiniteError(ArithmeticError):
    """An operand contained NaN or Inf."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _require_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: input contains NaN or Inf")


def _shape_error(op, *shapes):
    described = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeMismatchError(f"{op}: shapes do not conform: {described}")


class _Node:
    """One recorded primitive: op kind, producer tensors, and its vjp."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


@dataclass
class ComputationRecord:
    """Topologically ordered snapshot of the ops visited by one backward pass.

    Each entry is (op kind, input tensor ids, output tensor id); backward
    visits every node exactly once, in reverse of this order.
    """

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense float array, optionally recording ops for reverse-mode grads."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _require_finite("Tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    @property
    def needs_grad(self):
        return self.requires_grad or self._node is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _result(op, out_data, inputs, grad_fn):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._node = None
    if any(t.needs_grad for t in inputs):
        out._node = _Node(op, tuple(inputs), grad_fn)
    return out


def _as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# forward primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    _require_finite("matmul lhs", a.data)
    _require_finite("matmul rhs", b.data)
    ad, bd = a.data, b.data
    an, bn = a.needs_grad, b.needs_grad

    def grad_fn(g):
        ga = g @ bd.T if an else None
        gb = ad.T @ g if bn else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), grad_fn)


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of a (B,C,H,W) batch with an (F,C,kh,kw) kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    _require_finite("conv2d input", x.data)
    _require_finite("conv2d kernel", w.data)
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise _shape_error("conv2d (kernel larger than padded input)", x.shape, w.shape)
    xd = _pad2d(x.data, pad, pad)
    mat, (Ho, Wo) = _im2col(xd, kh, kw, stride)  # (C*kh*kw, B*Ho*Wo)
    out = (w.data.reshape(F, -1) @ mat).reshape(F, B, Ho, Wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    xn, wn = x.needs_grad, w.needs_grad
    wd = w.data

    def grad_fn(g):
        gw = None
        if wn:
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, -1)
            gw = (gmat @ mat.T).reshape(F, C, kh, kw)
        gx = conv2d_input_grad(g, wd, stride, pad, (H, W)) if xn else None
        return gx, gw

    return _result("conv2d", out, (x, w), grad_fn)


def _pad2d(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    B, C, H, W = x.shape
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + H, pw : pw + W] = x
    return out


def _im2col(xp, kh, kw, stride):
    """Padded (B,C,Hp,Wp) batch -> (C*kh*kw, B*Ho*Wo) patch matrix."""
    B, C = xp.shape[0], xp.shape[1]
    Ho = (xp.shape[2] - kh) // stride + 1
    Wo = (xp.shape[3] - kw) // stride + 1
    # gather patch rows with plain 2-d strided copies; much cheaper than a
    # transposed copy of the full 6-d sliding-window view
    mat = np.empty((C, kh, kw, B, Ho * Wo), dtype=xp.dtype)
    for u in range(kh):
        hi = u + (Ho - 1) * stride + 1
        for v in range(kw):
            wi = v + (Wo - 1) * stride + 1
            patch = xp[:, :, u:hi:stride, v:wi:stride]  # (B, C, Ho, Wo)
            mat[:, u, v] = patch.transpose(1, 0, 2, 3).reshape(C, B, Ho * Wo)
    return mat.reshape(-1, B * Ho * Wo), (Ho, Wo)


def conv2d_input_grad(grad_out, w, stride, pad, input_hw):
    """Adjoint of conv2d in its input: scatters (B,F,Ho,Wo) back to (B,C,H,W).

    This is the transposed convolution of grad_out with w, cropped to the
    original input extent.
    """
    grad_out = np.asarray(grad_out)
    w = np.asarray(w)
    B, F, Ho, Wo = grad_out.shape
    _, C, kh, kw = w.shape
    H, W = input_hw
    g = grad_out
    if stride > 1:  # dilate so one full correlation covers any stride
        gd = np.zeros((B, F, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
        g = gd
    gp = _pad2d(g, kh - 1, kw - 1)
    gmat, (Hf, Wf) = _im2col(gp, kh, kw, 1)  # (F*kh*kw, B*Hf*Wf)
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(C, -1)
    gx_full = (wflip @ gmat).reshape(C, B, Hf, Wf).transpose(1, 0, 2, 3)
    gx = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=grad_out.dtype)
    hf = min(Hf, H + 2 * pad)
    wf = min(Wf, W + 2 * pad)
    gx[:, :, :hf, :wf] = gx_full[:, :, :hf, :wf]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


def relu(x):
    x = _as_tensor(x)
    _require_finite("relu", x.data)
    xd = x.data

    def grad_fn(g):
        return (g * (xd > 0),)  # subgradient at exactly 0 is 0

    return _result("relu", np.maximum(xd, 0), (x,), grad_fn)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise _shape_error("maxpool2x2", x.shape)
    _require_finite("maxpool2x2", x.data)
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    blocks = x.data[:, :, : 2 * Ho, : 2 * Wo]
    blocks = blocks.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, Ho, Wo, 4)
    idx = blocks.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros((B, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, : 2 * Ho, : 2 * Wo] = gb.reshape(B, C, 2 * Ho, 2 * Wo)
        return (gx,)

    return _result("maxpool2x2", np.ascontiguousarray(out), (x,), grad_fn)


def add_bias(x, b):
    """Adds a per-feature bias: (B,F)+(F,) or a per-channel one: (B,C,H,W)+(C,)."""
    x, b = _as_tensor(x), _as_tensor(b)
    _require_finite("add_bias input", x.data)
    _require_finite("add_bias bias", b.data)
    if b.data.ndim != 1:
        raise _shape_error("add_bias", x.shape, b.shape)
    if x.data.ndim == 2 and x.shape[1] == b.shape[0]:
        out = x.data + b.data
        reduce_axes = (0,)
    elif x.data.ndim == 4 and x.shape[1] == b.shape[0]:
        out = x.data + b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
    else:
        raise _shape_error("add_bias", x.shape, b.shape)
    xn, bn = x.needs_grad, b.needs_grad

    def grad_fn(g):
        gx = g if xn else None
        gb = g.sum(axis=reduce_axes) if bn else None
        return gx, gb

    return _result("add_bias", out, (x, b), grad_fn)


def flatten(x):
    """Collapses all axes after the first: (B, ...) -> (B, prod(...))."""
    x = _as_tensor(x)
    _require_finite("flatten", x.data)
    shape = x.shape

    def grad_fn(g):
        return (g.reshape(shape),)

    return _result("flatten", x.data.reshape(shape[0], -1), (x,), grad_fn)


def gather_pixels(x, rows, cols, valid):
    """Rearranges pixels of a (B,C,H,W) batch through an index map.

    out[b,c,y,x'] = x[b,c,rows[y,x'],cols[y,x']] where valid, 0 elsewhere.
    The adjoint scatter-adds, so gradients flow through arbitrary resize /
    pad / crop pipelines expressed as one gather.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise _shape_error("gather_pixels", x.shape)
    _require_finite("gather_pixels", x.data)
    B, C, H, W = x.shape
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    valid = np.asarray(valid, dtype=bool)
    out = x.data[:, :, rows, cols]
    out[:, :, ~valid] = 0.0

    def grad_fn(g):
        gx = np.zeros((B, C, H * W), dtype=g.dtype)
        flat = (rows * W + cols)[valid]
        np.add.at(gx, (slice(None), slice(None), flat), g[:, :, valid])
        return (gx.reshape(B, C, H, W),)

    return _result("gather_pixels", out, (x,), grad_fn)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    _require_finite("add lhs", a.data)
    _require_finite("add rhs", b.data)

    def grad_fn(g):
        return g, g

    return _result("add", a.data + b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    _require_finite("mul lhs", a.data)
    _require_finite("mul rhs", b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, g * ad

    return _result("mul", ad * bd, (a, b), grad_fn)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    _require_finite("scale", x.data)

    def grad_fn(g):
        return (g * c,)

    return _result("scale", x.data * np.asarray(c, dtype=x.dtype), (x,), grad_fn)


def reduce_sum(x):
    x = _as_tensor(x)
    _require_finite("reduce_sum", x.data)
    shape, dt = x.shape, x.dtype

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(dt, copy=True),)

    return _result("reduce_sum", x.data.sum(dtype=dt).reshape(()), (x,), grad_fn)


def cross_entropy_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise _shape_error("cross_entropy_loss (need B x C, C >= 2)", logits.shape)
    _require_finite("cross_entropy_loss", logits.data)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if labels.shape[0] != B:
        raise _shape_error("cross_entropy_loss labels", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= C:
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"cross_entropy_loss: label {bad} out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(B)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype).reshape(())
    softmax = ez / denom

    def grad_fn(g):
        gl = softmax.copy()
        gl[rows, labels] -= 1.0
        gl *= g / B
        return (gl.astype(logits.dtype, copy=False),)

    return _result("cross_entropy_loss", loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss):
    """Populates .grad on every recorded input with requires_grad set.

    Returns the ComputationRecord traversed; the tape is consumed, so a
    second backward through the same graph raises.
    """
    if not isinstance(loss, Tensor) or loss._node is None:
        raise ValueError("backward: tensor has no recorded history")
    if loss.data.size != 1:
        raise _shape_error("backward (loss must be scalar)", loss.shape)

    order = []  # producers before consumers
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.inputs:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))

    record = ComputationRecord(
        [(t._node.op, tuple(id(p) for p in t._node.inputs), id(t)) for t in order]
    )
    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    leaves = {}
    for t in reversed(order):
        g = grads.pop(id(t))
        parent_grads = t._node.grad_fn(g)
        for p, pg in zip(t._node.inputs, parent_grads):
            if pg is None:
                continue
            if p._node is not None:
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            elif p.requires_grad:
                if id(p) in leaf_grads:
                    leaf_grads[id(p)] = leaf_grads[id(p)] + pg
                else:
                    leaf_grads[id(p)] = pg
                    leaves[id(p)] = p
        t._node = None  # consume the tape
    for pid, g in leaf_grads.items():
        leaves[pid].grad = g
    return record


def check_gradient(function, point, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `function` maps a Tensor to a scalar Tensor. Work in float64 for
    meaningful tolerances.
    """
    if h <= 0:
        raise ValueError(f"check_gradient: h must be positive, got {h}")
    point = np.asarray(point, dtype=np.float64)
    t = Tensor(point.copy(), requires_grad=True)
    out = function(t)
    if out._node is None:  # constant function: analytic gradient is zero
        analytic = np.zeros_like(point)
    else:
        backward(out)
        analytic = t.grad if t.grad is not None else np.zeros_like(point)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for idx in range(flat.size):
        bump = np.zeros_like(flat)
        bump[idx] = h
        fp = function(Tensor((flat + bump).reshape(point.shape))).item()
        fm = function(Tensor((flat - bump).reshape(point.shape))).item()
        nflat[idx] = (fp - fm) / (2 * h)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
