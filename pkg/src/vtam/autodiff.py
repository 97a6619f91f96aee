"""Minimal reverse-mode autodiff on numpy arrays.

Tensors wrap ndarrays and record the ops that produced them; backward()
walks the tape in reverse topological order. Gradient checking runs in
float64 (finite differences are meaningless in float32), training code
normally runs the same graph in float32.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "swapaxes",
    "transpose",
    "concat",
    "getitem",
    "tsum",
    "tmean",
    "mean_square",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "attention",
    "backward",
    "Graph",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when an op receives tensors with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # Operator sugar; the underlying functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def detach(self):
        return Tensor(self.data)


def tensor(data, requires_grad=False, dtype=None, name=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def constant(data, like=None):
    arr = np.asarray(data)
    if like is not None:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    return constant(x, like=like)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _make(data, parents, backward_fn, op):
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward_fn, "add")


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward_fn, "sub")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward_fn, "mul")


def scale(a, s):
    s = float(s)
    out = a.data * s

    def backward_fn(g):
        return (g * s,)

    return _make(out, (a,), backward_fn, "scale")


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward_fn(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward_fn, "matmul")


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward_fn, "reshape")


def swapaxes(a, ax1, ax2):
    out = a.data.swapaxes(ax1, ax2)

    def backward_fn(g):
        return (g.swapaxes(ax1, ax2),)

    return _make(out, (a,), backward_fn, "swapaxes")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward_fn(g):
        return (g.transpose(inv),)

    return _make(out, (a,), backward_fn, "transpose")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(i != ax and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError("concat", *[t.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(tensors), backward_fn, "concat")


def getitem(a, key):
    out = a.data[key]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(out, (a,), backward_fn, "getitem")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), backward_fn, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_square(a):
    """Mean of squared entries, the workhorse reduction for every loss here."""
    return tmean(mul(a, a))


def softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), backward_fn, "softmax")


def layer_norm(a, eps=1e-8):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward_fn(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward_fn, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make(out, (a,), backward_fn, "gelu")


def silu(a):
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward_fn(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _make(out, (a,), backward_fn, "silu")


def attention(q, k, v, probs_sink=None):
    """Unfused scaled dot-product attention over the last two axes.

    q, k, v: [..., T, d]. Softmax runs over key positions. If `probs_sink`
    is a list, the raw attention probabilities (ndarray) are appended to it
    for diagnostics; this does not affect the graph.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    s = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    p = softmax(s, axis=-1)
    if probs_sink is not None:
        probs_sink.append(p.data)
    return matmul(p, v)


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar `loss` into every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.dtype, copy=True) if g.dtype != parent.dtype else g.copy()
            else:
                parent.grad += g


class Graph:
    """A forward computation bound to named parameters.

    `build_fn(inputs, params)` returns a dict of named output Tensors and
    must include a scalar "loss" entry for backward() to work. Parameters
    that the loss never touches get exact-zero gradients.
    """

    def __init__(self, build_fn, params):
        self.build_fn = build_fn
        self.params = dict(params)
        self.outputs = None

    def evaluate(self, inputs):
        self.outputs = self.build_fn(inputs, self.params)
        return self.outputs

    def backward(self):
        if self.outputs is None or "loss" not in self.outputs:
            raise ValueError("Graph.backward: evaluate() a graph with a 'loss' output first")
        backward(self.outputs["loss"])
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


def grad_check(build_fn, params, inputs, step=1e-5, tolerance=1e-4):
    """Compare analytic gradients against central finite differences.

    Returns a report dict: per-parameter max relative error, plus "passed".
    Requires float64 parameters; float32 finite differences are noise.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {name} is {p.dtype}")
    graph = Graph(build_fn, params)
    graph.evaluate(inputs)
    analytic = graph.backward()

    def loss_value():
        return float(Graph(build_fn, params).evaluate(inputs)["loss"].data)

    errors = {}
    for name, p in params.items():
        a = analytic[name]
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-4)
        errors[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    max_err = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": max_err, "passed": max_err <= tolerance}
