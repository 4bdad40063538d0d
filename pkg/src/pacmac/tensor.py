"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional gradient and an optional
record of the primitive that produced it. Primitives evaluated through
:func:`evaluate_primitive` (or the thin wrappers below) record history
whenever any input is tracked and gradients are enabled, so the result set
forms a DAG rooted at the loss. :func:`backward` walks that DAG once in
reverse topological order, accumulating gradients additively across fan-out.

Only the broadcasting needed by the model is supported: ``add`` accepts a
suffix-shaped operand (row-wise bias, positional table over a batch axis);
everything else requires exact shapes and raises ``ShapeMismatchError``.

Forward evaluation over immutable inputs is safe to invoke concurrently.
A graph under construction is owned by one logical execution and must not
be mutated from several threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from enum import Enum

import numpy as np

from .errors import (
    InvalidAttributeError,
    NonFiniteError,
    NotScalarError,
    ShapeMismatchError,
    UntrackedRootError,
)


class PrimitiveKind(str, Enum):
    ADD = "add"
    MUL = "mul"
    MATMUL = "matmul"
    SOFTMAX_ROWS = "softmax_rows"
    LAYER_NORM = "layer_norm"
    GELU = "gelu"
    CROSS_ENTROPY_FROM_LOGITS = "cross_entropy_from_logits"
    MSE_MASKED = "mse_masked"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    MEAN = "mean"
    SCALE = "scale"
    CONCAT = "concat"
    SLICE = "slice"
    # Elementwise natural log, needed so entropy penalties stay inside the
    # differentiable op set.
    LOG = "log"


class Node:
    """Record of the primitive application that produced a tensor."""

    __slots__ = ("kind", "inputs", "attrs", "saved")

    def __init__(self, kind, inputs, attrs, saved):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved


class Tensor:
    """Dense n-dimensional array with optional autodiff bookkeeping."""

    __slots__ = ("values", "grad", "node", "tracked")

    def __init__(self, values, tracked=False, node=None, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.node = node
        self.tracked = tracked

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def detach(self):
        return Tensor(self.values, tracked=False)

    def __repr__(self):
        flag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {flag})"


def parameter(values, dtype=None):
    """Tracked leaf tensor (a trainable weight)."""
    return Tensor(values, tracked=True, dtype=dtype)


def constant(values, dtype=None):
    return Tensor(values, tracked=False, dtype=dtype)


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable history recording inside the block (probe / eval forwards)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _is_suffix(small, big):
    """True when `small` equals the trailing dims of `big` exactly."""
    if len(small) > len(big):
        return False
    return tuple(small) == tuple(big[len(big) - len(small):])


def _reduce_to(grad, shape):
    """Sum out the leading axes a suffix-broadcast introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# forward implementations: attrs -> (out_values, saved)
# ---------------------------------------------------------------------------


def _fw_add(vals, attrs):
    a, b = vals
    if a.shape == b.shape or _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return a + b, {}
    raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")


def _bw_add(vals, attrs, saved, out, g):
    a, b = vals
    return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]


def _fw_mul(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes must match, got {a.shape} and {b.shape}")
    return a * b, {}


def _bw_mul(vals, attrs, saved, out, g):
    a, b = vals
    return [g * b, g * a]


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(
            f"matmul: stacked leading dims differ, {a.shape} @ {b.shape}")
    return np.matmul(a, b), {}


def _bw_matmul(vals, attrs, saved, out, g):
    a, b = vals
    ga = np.matmul(g, _swap_last(b))
    gb = np.matmul(_swap_last(a), g)
    if ga.ndim > a.ndim:
        ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
    if gb.ndim > b.ndim:
        gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
    return [ga, gb]


def _fw_softmax_rows(vals, attrs):
    (x,) = vals
    if x.ndim < 1:
        raise ShapeMismatchError("softmax_rows: rank >= 1 required")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, {"p": p}


def _bw_softmax_rows(vals, attrs, saved, out, g):
    p = saved["p"]
    inner = (g * p).sum(axis=-1, keepdims=True)
    return [p * (g - inner)]


def _fw_layer_norm(vals, attrs):
    x, gain, bias = vals
    eps = attrs.get("eps", 1e-5)
    if eps <= 0:
        raise InvalidAttributeError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, {"xhat": xhat, "inv": inv}


def _bw_layer_norm(vals, attrs, saved, out, g):
    x, gain, bias = vals
    xhat, inv = saved["xhat"], saved["inv"]
    reduce_axes = tuple(range(x.ndim - 1))
    dgain = (g * xhat).sum(axis=reduce_axes)
    dbias = g.sum(axis=reduce_axes)
    dxhat = g * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return [dx, dgain, dbias]


_GELU_C = np.sqrt(2.0 / np.pi)


def _fw_gelu(vals, attrs):
    (x,) = vals
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), {"t": t}


def _bw_gelu(vals, attrs, saved, out, g):
    (x,) = vals
    t = saved["t"]
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
    return [g * dy]


def _fw_cross_entropy(vals, attrs):
    (logits,) = vals
    squeeze = logits.ndim == 1
    z = logits.reshape(1, -1) if squeeze else logits
    if z.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    n, c = z.shape
    targets = np.atleast_1d(np.asarray(attrs["targets"], dtype=np.int64))
    if targets.shape != (n,):
        raise ShapeMismatchError(
            f"cross_entropy: got {n} rows but {targets.shape} targets")
    if np.any(targets < 0) or np.any(targets >= c):
        raise InvalidAttributeError("cross_entropy: target out of class range")
    ls = float(attrs.get("label_smoothing", 0.0))
    if not 0.0 <= ls < 1.0:
        raise InvalidAttributeError(f"cross_entropy: label_smoothing must be in [0,1), got {ls}")
    weights = attrs.get("weights")
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=z.dtype)
    else:
        w = np.asarray(weights, dtype=z.dtype)
        if w.shape != (n,):
            raise ShapeMismatchError(f"cross_entropy: weights must have shape ({n},)")
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    t = np.full((n, c), ls / c, dtype=z.dtype)
    t[np.arange(n), targets] += 1.0 - ls
    per = -(t * logp).sum(axis=-1)
    loss = np.asarray((w * per).sum(), dtype=z.dtype)
    return loss, {"p": np.exp(logp), "t": t, "w": w, "squeeze": squeeze}


def _bw_cross_entropy(vals, attrs, saved, out, g):
    (logits,) = vals
    d = saved["w"][:, None] * (saved["p"] - saved["t"]) * g
    if saved["squeeze"]:
        d = d.reshape(logits.shape)
    return [d]


def _fw_mse_masked(vals, attrs):
    pred, target = vals
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"mse_masked: shapes must match, got {pred.shape} and {target.shape}")
    mask = attrs.get("mask")
    if mask is None:
        mb = np.ones(pred.shape, dtype=pred.dtype)
    else:
        mask = np.asarray(mask, dtype=pred.dtype)
        try:
            mb = np.broadcast_to(
                mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)), pred.shape)
        except ValueError as exc:
            raise ShapeMismatchError(f"mse_masked: mask {mask.shape} does not "
                                     f"broadcast over {pred.shape}") from exc
    count = float(mb.sum())
    if count <= 0:
        raise InvalidAttributeError("mse_masked: mask selects nothing")
    diff = pred - target
    loss = np.asarray((mb * diff * diff).sum() / count, dtype=pred.dtype)
    return loss, {"mb": mb, "count": count, "diff": diff}


def _bw_mse_masked(vals, attrs, saved, out, g):
    d = (2.0 / saved["count"]) * saved["mb"] * saved["diff"] * g
    return [d, -d]


def _fw_transpose(vals, attrs):
    (x,) = vals
    axes = attrs.get("axes")
    if axes is None:
        if x.ndim < 2:
            raise ShapeMismatchError("transpose: rank >= 2 required without explicit axes")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAttributeError(f"transpose: invalid axes {axes} for rank {x.ndim}")
    return np.transpose(x, axes), {"axes": tuple(axes)}


def _bw_transpose(vals, attrs, saved, out, g):
    inv = np.argsort(saved["axes"])
    return [np.transpose(g, inv)]


def _fw_reshape(vals, attrs):
    (x,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatchError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape), {}


def _bw_reshape(vals, attrs, saved, out, g):
    return [g.reshape(vals[0].shape)]


def _fw_mean(vals, attrs):
    (x,) = vals
    axis = attrs.get("axis")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise InvalidAttributeError(f"mean: axis {axis} out of range for rank {x.ndim}")
    return np.asarray(x.mean(axis=axis), dtype=x.dtype), {}


def _bw_mean(vals, attrs, saved, out, g):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return [np.full(x.shape, 1.0 / x.size, dtype=x.dtype) * g]
    axis = axis % x.ndim
    ge = np.expand_dims(g, axis)
    return [np.broadcast_to(ge, x.shape) / x.shape[axis]]


def _fw_scale(vals, attrs):
    (x,) = vals
    return x * attrs["factor"], {}


def _bw_scale(vals, attrs, saved, out, g):
    return [g * attrs["factor"]]


def _fw_concat(vals, attrs):
    axis = attrs.get("axis", 0)
    ranks = {v.ndim for v in vals}
    if len(ranks) != 1:
        raise ShapeMismatchError("concat: inputs must share rank")
    for v in vals[1:]:
        if (v.shape[:axis] + v.shape[axis + 1:]) != (
                vals[0].shape[:axis] + vals[0].shape[axis + 1:]):
            raise ShapeMismatchError("concat: off-axis extents differ")
    return np.concatenate(vals, axis=axis), {}


def _bw_concat(vals, attrs, saved, out, g):
    axis = attrs.get("axis", 0)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes[:-1])
    return list(np.split(g, splits, axis=axis))


def _fw_slice(vals, attrs):
    (x,) = vals
    axis = attrs["axis"]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= axis < x.ndim:
        raise InvalidAttributeError(f"slice: axis {axis} out of range")
    if not 0 <= start < stop <= x.shape[axis]:
        raise InvalidAttributeError(
            f"slice: bounds [{start}:{stop}] invalid for extent {x.shape[axis]}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    return x[idx], {"idx": idx}


def _bw_slice(vals, attrs, saved, out, g):
    dx = np.zeros(vals[0].shape, dtype=g.dtype)
    dx[saved["idx"]] = g
    return [dx]


def _fw_log(vals, attrs):
    (x,) = vals
    if np.any(x <= 0):
        raise NonFiniteError("log: inputs must be strictly positive")
    return np.log(x), {}


def _bw_log(vals, attrs, saved, out, g):
    return [g / vals[0]]


_FORWARD = {
    PrimitiveKind.ADD: _fw_add,
    PrimitiveKind.MUL: _fw_mul,
    PrimitiveKind.MATMUL: _fw_matmul,
    PrimitiveKind.SOFTMAX_ROWS: _fw_softmax_rows,
    PrimitiveKind.LAYER_NORM: _fw_layer_norm,
    PrimitiveKind.GELU: _fw_gelu,
    PrimitiveKind.CROSS_ENTROPY_FROM_LOGITS: _fw_cross_entropy,
    PrimitiveKind.MSE_MASKED: _fw_mse_masked,
    PrimitiveKind.TRANSPOSE: _fw_transpose,
    PrimitiveKind.RESHAPE: _fw_reshape,
    PrimitiveKind.MEAN: _fw_mean,
    PrimitiveKind.SCALE: _fw_scale,
    PrimitiveKind.CONCAT: _fw_concat,
    PrimitiveKind.SLICE: _fw_slice,
    PrimitiveKind.LOG: _fw_log,
}

_BACKWARD = {
    PrimitiveKind.ADD: _bw_add,
    PrimitiveKind.MUL: _bw_mul,
    PrimitiveKind.MATMUL: _bw_matmul,
    PrimitiveKind.SOFTMAX_ROWS: _bw_softmax_rows,
    PrimitiveKind.LAYER_NORM: _bw_layer_norm,
    PrimitiveKind.GELU: _bw_gelu,
    PrimitiveKind.CROSS_ENTROPY_FROM_LOGITS: _bw_cross_entropy,
    PrimitiveKind.MSE_MASKED: _bw_mse_masked,
    PrimitiveKind.TRANSPOSE: _bw_transpose,
    PrimitiveKind.RESHAPE: _bw_reshape,
    PrimitiveKind.MEAN: _bw_mean,
    PrimitiveKind.SCALE: _bw_scale,
    PrimitiveKind.CONCAT: _bw_concat,
    PrimitiveKind.SLICE: _bw_slice,
    PrimitiveKind.LOG: _bw_log,
}


def evaluate_primitive(kind, inputs, attrs=None):
    """Apply a primitive to tensors, recording history when tracked.

    Shape or attribute violations raise before any node is created, so a
    failed call never leaves a partial graph behind.
    """
    kind = PrimitiveKind(kind)
    attrs = dict(attrs) if attrs else {}
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    vals = [t.values for t in tensors]
    out_values, saved = _FORWARD[kind](vals, attrs)
    tracked = _grad_enabled() and any(t.tracked for t in tensors)
    node = Node(kind, tuple(tensors), attrs, saved) if tracked else None
    return Tensor(out_values, tracked=tracked, node=node)


# thin wrappers -------------------------------------------------------------


def add(a, b):
    return evaluate_primitive(PrimitiveKind.ADD, [a, b])


def mul(a, b):
    return evaluate_primitive(PrimitiveKind.MUL, [a, b])


def matmul(a, b):
    return evaluate_primitive(PrimitiveKind.MATMUL, [a, b])


def softmax_rows(x):
    return evaluate_primitive(PrimitiveKind.SOFTMAX_ROWS, [x])


def layer_norm(x, gain, bias, eps=1e-5):
    return evaluate_primitive(PrimitiveKind.LAYER_NORM, [x, gain, bias], {"eps": eps})


def gelu(x):
    return evaluate_primitive(PrimitiveKind.GELU, [x])


def cross_entropy_from_logits(logits, targets, label_smoothing=0.0, weights=None):
    return evaluate_primitive(
        PrimitiveKind.CROSS_ENTROPY_FROM_LOGITS, [logits],
        {"targets": targets, "label_smoothing": label_smoothing, "weights": weights})


def mse_masked(pred, target, mask=None):
    return evaluate_primitive(PrimitiveKind.MSE_MASKED, [pred, target], {"mask": mask})


def transpose(x, axes=None):
    return evaluate_primitive(PrimitiveKind.TRANSPOSE, [x], {"axes": axes})


def reshape(x, shape):
    return evaluate_primitive(PrimitiveKind.RESHAPE, [x], {"shape": shape})


def mean(x, axis=None):
    return evaluate_primitive(PrimitiveKind.MEAN, [x], {"axis": axis})


def scale(x, factor):
    return evaluate_primitive(PrimitiveKind.SCALE, [x], {"factor": factor})


def concat(xs, axis=0):
    return evaluate_primitive(PrimitiveKind.CONCAT, list(xs), {"axis": axis})


def slice_axis(x, axis, start, stop):
    return evaluate_primitive(
        PrimitiveKind.SLICE, [x], {"axis": axis, "start": start, "stop": stop})


def log(x):
    return evaluate_primitive(PrimitiveKind.LOG, [x])


def sum_all(x):
    """Sum of all elements, composed from mean and scale."""
    return scale(mean(x), float(x.size))


def sum_axis(x, axis):
    return scale(mean(x, axis=axis), float(x.shape[axis]))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root):
    """Tensors in dependency order (inputs before consumers), iteratively."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.tracked and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root):
    """Populate ``grad`` on every tracked tensor reachable from ``root``.

    ``root`` must be a tracked scalar. Gradients from multiple uses of the
    same tensor accumulate by summation.
    """
    if not isinstance(root, Tensor):
        raise UntrackedRootError("backward: root is not a Tensor")
    if not root.tracked:
        raise UntrackedRootError("backward: root does not participate in a tracked graph")
    if root.size != 1:
        raise NotScalarError(f"backward: root must be scalar, got shape {root.shape}")

    order = _topo_order(root)
    root.grad = np.ones_like(root.values)
    for t in reversed(order):
        if t.node is None or t.grad is None:
            continue
        node = t.node
        grads = _BACKWARD[node.kind](
            [i.values for i in node.inputs], node.attrs, node.saved, t.values, t.grad)
        for inp, g in zip(node.inputs, grads):
            if not inp.tracked or g is None:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.values)
            inp.grad += g
    return root


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient estimate of scalar ``f`` at ``x``.

    Independent verification oracle for :func:`backward`; never touches the
    recorded graph. ``f`` receives an untracked Tensor and must return a
    scalar (float or scalar Tensor).
    """
    if h <= 0:
        raise InvalidAttributeError(f"finite differences: h must be > 0, got {h}")
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def call(arr):
        r = f(Tensor(arr, tracked=False))
        v = r.item() if isinstance(r, Tensor) else float(r)
        if not np.isfinite(v):
            raise NonFiniteError("finite differences: function returned a non-finite value")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = call(base)
        flat[i] = orig - h
        lo = call(base)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return Tensor(out.reshape(base.shape))
