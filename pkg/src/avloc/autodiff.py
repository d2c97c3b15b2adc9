"""Dense float64 arrays with eager reverse-mode differentiation.

Every operation computes its value immediately and records how to push
gradients back to its inputs. A graph is built once, differentiated once,
and discarded; parameter arrays live outside the graph and are re-wrapped
as leaves each step. Single-threaded per graph; independent graphs may run
concurrently.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_ids = itertools.count()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """One node of the tape: value, inputs, and a pullback closure."""

    __slots__ = ("data", "grad", "inputs", "nid", "requires_grad", "detached",
                 "op_kind", "_pullback")

    def __init__(self, data, requires_grad=False, validate=False,
                 _inputs=(), _op_kind=None, _pullback=None):
        arr = np.asarray(data, dtype=np.float64)
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected at tensor construction")
        self.data = arr
        self.grad = None
        self.inputs = tuple(_inputs)
        self.nid = next(_ids)
        self.op_kind = _op_kind
        self._pullback = _pullback
        self.detached = False
        if _inputs:
            self.requires_grad = any(t.requires_grad for t in _inputs)
        else:
            self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op_kind}, grad={'set' if self.grad is not None else 'none'})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def constant(data):
    return Tensor(data, requires_grad=False)


def param(data, validate=True):
    return Tensor(data, requires_grad=True, validate=validate)


def _node(kind, data, inputs, pullback):
    return Tensor(data, _inputs=inputs, _op_kind=kind, _pullback=pullback)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: operand shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def pull(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return _node("add", out, (a, b), pull)


def sub(a, b):
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def pull(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return _node("sub", out, (a, b), pull)


def mul(a, b):
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def pull(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    return _node("mul", out, (a, b), pull)


def div(a, b):
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def pull(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node("div", out, (a, b), pull)


def scalar_mul(a, c):
    c = float(c)
    out = a.data * c

    def pull(g):
        return (g * c,)
    return _node("scalar-mul", out, (a,), pull)


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def pull(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return _node("matmul", out, (a, b), pull)


def _im2col(xp, kh, kw, ho, wo):
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, ho*wo) column matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + ho, dj:dj + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols, shape, kh, kw, ho, wo):
    """Adjoint of _im2col: scatter-add columns back into the padded input."""
    n, c = shape[:2]
    g = gcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di:di + ho, dj:dj + wo] += g[:, :, di, dj]
    return out


def conv2d(x, w, pad=0):
    """Cross-correlation, stride 1, zero padding. x: (N,C,H,W), w: (O,C,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, ho, wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def pull(g):
        gmat = g.reshape(n, o, ho * wo)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)
        gxp = _col2im(gcols, xp.shape, kh, kw, ho, wo)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw)
    return _node("conv2d", out, (x, w), pull)


def transposed_conv2d(x, w, pad=0):
    """Adjoint of conv2d, stride 1. x: (N,C,H,W), w: (C,O,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"transposed-conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"transposed-conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    ho, wo = h + kh - 1 - 2 * pad, wd + kw - 1 - 2 * pad
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed-conv2d: pad {pad} too large for input {x.shape}")
    wmat = w.data.reshape(c, o * kh * kw)
    xmat = x.data.reshape(n, c, h * wd)
    gcols = np.matmul(wmat.T, xmat)  # (n, o*kh*kw, h*wd)
    full_shape = (n, o, h + kh - 1, wd + kw - 1)
    # scattering x through the kernel footprint is exactly the im2col adjoint
    buf = _col2im(gcols, full_shape, kh, kw, h, wd)
    out = buf[:, :, pad:pad + ho, pad:pad + wo]

    def pull(g):
        gbuf = np.zeros(full_shape)
        gbuf[:, :, pad:pad + ho, pad:pad + wo] = g
        cols = _im2col(gbuf, kh, kw, h, wd)  # (n, o*kh*kw, h*wd)
        gx = np.matmul(wmat, cols).reshape(x.shape)
        gw = np.matmul(xmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        return (gx, gw)
    return _node("transposed-conv2d", out, (x, w), pull)


def maxpool2d(x, size):
    """Non-overlapping max pooling; ties route to the first window cell in row-major order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d: need 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    s = int(size)
    if h % s or w % s:
        raise ValueError(f"maxpool2d: window {s} does not tile input {x.shape}")
    ho, wo = h // s, w // s
    windows = x.data.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def pull(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)
    return _node("maxpool2d", out, (x,), pull)


def upsample2d(x, factor):
    """Nearest-neighbor spatial upsampling by an integer factor."""
    if x.data.ndim != 4:
        raise ValueError(f"nearest-upsample2d: need 4-d input, got {x.shape}")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    n, c, h, w = x.shape

    def pull(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)
    return _node("nearest-upsample2d", out, (x,), pull)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x):
    out = np.maximum(x.data, 0.0)

    def pull(g):
        return (g * (x.data > 0.0),)
    return _node("relu", out, (x,), pull)


def gelu(x):
    """tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    sq = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + _GELU_A * sq * x.data))
    out = 0.5 * x.data * (1.0 + t)

    def pull(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)
    return _node("gelu", out, (x,), pull)


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def pull(g):
        return (g * out * (1.0 - out),)
    return _node("sigmoid", out, (x,), pull)


def softmax(x, axis):
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node("softmax-over-axis", out, (x,), pull)


def l2_normalize(x, axis):
    """Scale slices to unit norm; all-zero slices stay zero with zero gradient."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    out = x.data / safe

    def pull(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * inner) / safe
        return (np.where(norm > 0.0, gx, 0.0),)
    return _node("l2-normalize-over-axis", out, (x,), pull)


def logsumexp(x, axis=None):
    m = np.max(x.data, axis=axis, keepdims=True)
    out_k = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def pull(g):
        soft = np.exp(x.data - out_k)
        if axis is None:
            return (soft * g,)
        return (soft * np.expand_dims(g, axis=axis),)
    return _node("logsumexp-over-axis", out, (x,), pull)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, x.data.ndim)

    def pull(g):
        ge = g
        if not keepdims:
            for a in sorted(axes):
                ge = np.expand_dims(ge, axis=a)
        return (np.broadcast_to(ge, x.shape).copy(),)
    return _node("sum", out, (x,), pull)


def mean_(x, axis=None, keepdims=False):
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def pull(g):
        ge = g
        if not keepdims:
            for a in sorted(axes):
                ge = np.expand_dims(ge, axis=a)
        return (np.broadcast_to(ge, x.shape).copy() / count,)
    return _node("mean", out, (x,), pull)


def _extremum(kind, x, axis, keepdims):
    pick = np.argmax if kind == "max-over-axis" else np.argmin
    idx = pick(x.data, axis=axis)
    out_k = np.take_along_axis(x.data, np.expand_dims(idx, axis=axis), axis=axis)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def pull(g):
        ge = g if keepdims else np.expand_dims(g, axis=axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis=axis), ge, axis=axis)
        return (gx,)
    return _node(kind, out, (x,), pull)


def max_(x, axis, keepdims=False):
    """Max along one axis; ties route the gradient to the first maximal index."""
    return _extremum("max-over-axis", x, axis, keepdims)


def min_(x, axis, keepdims=False):
    return _extremum("min-over-axis", x, axis, keepdims)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x, shape):
    out = x.data.reshape(shape)

    def pull(g):
        return (g.reshape(x.shape),)
    return _node("reshape", out, (x,), pull)


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def pull(g):
        return (np.transpose(g, inv),)
    return _node("permute", out, (x,), pull)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: need at least one input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)
    return _node("concat", out, tensors, pull)


def take_row(x, index):
    """Select one index along axis 0 (gradient scatters back to that slot)."""
    index = int(index)
    out = x.data[index]

    def pull(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)
    return _node("take-row", out, (x,), pull)


def detach(x):
    """Forward-transparent barrier: value passes through, gradients stop."""
    node = Tensor(x.data, _inputs=(x,), _op_kind="detach", _pullback=None)
    node.requires_grad = False
    node.detached = True
    return node


def cosine_similarity(a, b):
    """Cosine of two equally-shaped vectors; zero-norm operands yield 0."""
    if a.shape != b.shape:
        raise ValueError(f"cosine-similarity: shapes differ, {a.shape} vs {b.shape}")
    return sum_(mul(l2_normalize(a, axis=-1), l2_normalize(b, axis=-1)))


# ---------------------------------------------------------------------------
# dispatch registry (kind strings are the stable public vocabulary)

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed-conv2d": transposed_conv2d,
    "maxpool2d": maxpool2d,
    "nearest-upsample2d": upsample2d,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softmax-over-axis": softmax,
    "l2-normalize-over-axis": l2_normalize,
    "logsumexp-over-axis": logsumexp,
    "sum": sum_,
    "mean": mean_,
    "max-over-axis": max_,
    "min-over-axis": min_,
    "reshape": reshape,
    "permute": permute,
    "concat": concat,
    "take-row": take_row,
    "detach": detach,
    "cosine-similarity": cosine_similarity,
}


def forward_op(kind, *inputs, **attrs):
    """Build one node by kind name; unknown kinds are rejected."""
    if kind not in OPS:
        raise ValueError(f"unknown op kind: {kind!r}")
    return OPS[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss, params=None):
    """Accumulate d(loss)/d(node) into .grad over the reachable graph.

    Fan-out contributions are summed in ascending consumer node id so the
    result is bit-deterministic. Detached nodes stop traversal, so anything
    reachable only through a detach keeps a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    seen = {loss.nid}
    nodes = [loss]
    stack = [loss]
    while stack:
        node = stack.pop()
        for inp in node.inputs:
            if inp.requires_grad and inp.nid not in seen:
                seen.add(inp.nid)
                nodes.append(inp)
                stack.append(inp)
    nodes.sort(key=lambda n: n.nid, reverse=True)
    pending = {}
    for node in nodes:
        if node is loss:
            grad = np.ones_like(node.data)
            extra = pending.pop(node.nid, None)
            if extra:
                for _, contrib in sorted(extra, key=lambda e: e[0]):
                    grad = grad + contrib
        else:
            entries = pending.pop(node.nid, None)
            if not entries:
                node.grad = np.zeros_like(node.data)
                continue
            entries.sort(key=lambda e: e[0])
            grad = entries[0][1].copy()
            for _, contrib in entries[1:]:
                grad += contrib
        node.grad = grad
        if node._pullback is None:
            continue
        input_grads = node._pullback(grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            pending.setdefault(inp.nid, []).append((node.nid, g))
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def grad_of(t):
    """Gradient accumulator of a node, materializing zeros when untouched."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(build, arrays, step=1e-5, max_coords=None, coord_rng=None):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `build` maps a list of leaf Tensors (one per input array) to a scalar node.
    With `max_coords`, only that many seeded-random coordinates per array are
    probed (for large parameter tensors).
    """
    leaves = [param(np.array(a, dtype=np.float64)) for a in arrays]
    loss = build(leaves)
    backward(loss, params=leaves)
    analytic = [grad_of(l).copy() for l in leaves]

    def value(work):
        return float(build([param(w) for w in work]).data.reshape(()))

    worst = 0.0
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for li in range(len(work)):
        flat = work[li].reshape(-1)
        aflat = analytic[li].reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picker = coord_rng if coord_rng is not None else np.random.default_rng(0)
            coords = sorted(picker.choice(flat.size, size=max_coords, replace=False).tolist())
        for j in coords:
            orig = flat[j]
            flat[j] = orig + step
            hi = value(work)
            flat[j] = orig - step
            lo = value(work)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(aflat[j] - numeric) / max(1.0, abs(aflat[j]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay

class OptimizerState:
    """First/second moment accumulators plus a strictly increasing step count.

    `lr_scales` multiplies the base rate per parameter name; names in
    `decay_exempt` skip the decoupled weight decay (parameter groups).
    """

    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-2, lr_scales=None, decay_exempt=()):
        if lr <= 0 or beta1 <= 0 or beta2 <= 0 or eps <= 0:
            raise ValueError("optimizer hyperparameters must be positive")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales or {})
        self.decay_exempt = frozenset(decay_exempt)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}


def adamw_step(arrays, grads, state):
    """One decoupled-weight-decay update, in place on the parameter arrays."""
    for key in arrays:
        if arrays[key].shape != grads[key].shape:
            raise ValueError(f"adamw_step: shape mismatch for {key!r}: "
                             f"{arrays[key].shape} vs {grads[key].shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for key in sorted(arrays):
        g = grads[key]
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        lr = state.lr * state.lr_scales.get(key, 1.0)
        wd = 0.0 if key in state.decay_exempt else state.weight_decay
        p = arrays[key]
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps)) + lr * wd * p
    return arrays, state
