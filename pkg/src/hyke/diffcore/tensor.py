"""Reverse-mode automatic differentiation over dense float64 arrays.

A Graph records primitive operations as they execute; backward() replays
the tape in reverse, accumulating vector-Jacobian products. Recording only
happens while a Graph is active and at least one operand requires a
gradient, so the same functions run eagerly (plain numpy) outside a graph.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Graph",
    "OpRecord",
    "record",
    "backward",
    "register_op",
    "linear_op_kinds",
    "add", "sub", "mul", "neg", "scale", "add_const",
    "exp", "log", "log_floored", "tanh", "sigmoid", "softplus", "relu",
    "matmul", "reduce_sum", "mean", "concat", "slice_", "reshape", "moveaxis",
    "conv1d_same", "conv2d3_depthwise",
]

_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, _validate: bool = True):
        arr = np.asarray(values, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise ValueError("Tensor rejects non-finite values at graph boundaries")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through record()
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class OpRecord:
    """One recorded primitive: kind, input tensors, output tensor, vjp closure."""

    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Ordered tape of recorded operations; consumed by backward()."""

    def __init__(self):
        self.records: list[OpRecord] = []
        self.consumed = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()
        return False

    def __len__(self):
        return len(self.records)


# Registry of primitive ops: kind -> (forward, make_vjp, linear)
# forward(*values, **attrs) -> np.ndarray
# make_vjp(values, out, **attrs) -> callable(g) -> tuple of grads (None where undefined)
_REGISTRY: dict[str, tuple] = {}


def register_op(kind: str, forward, make_vjp, linear: bool = False):
    if kind in _REGISTRY:
        raise ValueError(f"op kind {kind!r} already registered")
    _REGISTRY[kind] = (forward, make_vjp, linear)


def linear_op_kinds() -> list[str]:
    return sorted(k for k, (_, _, lin) in _REGISTRY.items() if lin)


def record(kind: str, *operands, **attrs) -> Tensor:
    """Apply a primitive op, recording it on the active graph if gradients flow.

    Raises ValueError naming the op kind on shape/domain violations.
    """
    if kind not in _REGISTRY:
        raise ValueError(f"unknown op kind {kind!r}")
    forward, make_vjp, _ = _REGISTRY[kind]
    tensors = tuple(as_tensor(op) for op in operands)
    values = tuple(t.values for t in tensors)
    try:
        result = forward(*values, **attrs)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"op {kind!r} on shapes {shapes}: {e}") from e
    if isinstance(result, tuple):
        out_values, aux = result
    else:
        out_values, aux = result, None
    graph = active_graph()
    needs = any(t.requires_grad for t in tensors)
    out = Tensor(out_values, requires_grad=needs and graph is not None, _validate=False)
    if needs and graph is not None:
        if aux is None:
            vjp = make_vjp(values, out_values, **attrs)
        else:
            vjp = make_vjp(values, out_values, _aux=aux, **attrs)
        graph.records.append(OpRecord(kind, tensors, out, vjp))
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor.

    The loss must be scalar; the graph is consumed and cannot be reused.
    """
    if graph.consumed:
        raise RuntimeError("graph already consumed by backward()")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(graph.records):
        g_out = pending.pop(id(rec.output), None)
        if g_out is None:
            continue
        holders.pop(id(rec.output), None)
        if rec.output.requires_grad:
            _accumulate(rec.output, g_out)
        for t, g_in in zip(rec.inputs, rec.vjp(g_out)):
            if g_in is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + g_in
            else:
                pending[key] = g_in
                holders[key] = t
    for key, g in pending.items():
        _accumulate(holders[key], g)
    graph.consumed = True
    graph.records.clear()


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64).reshape(t.values.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def _fw_add(a, b):
    return a + b


def _vjp_add(vals, out):
    a, b = vals
    return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _fw_sub(a, b):
    return a - b


def _vjp_sub(vals, out):
    a, b = vals
    return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _fw_mul(a, b):
    return a * b


def _vjp_mul(vals, out):
    a, b = vals
    return lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _fw_neg(a):
    return -a


def _vjp_neg(vals, out):
    return lambda g: (-g,)


def _fw_scale(a, *, c):
    return a * c


def _vjp_scale(vals, out, *, c):
    return lambda g: (g * c,)


def _fw_add_const(a, *, c):
    return a + c


def _vjp_add_const(vals, out, *, c):
    return lambda g: (_unbroadcast(g, vals[0].shape),)


def _fw_exp(a):
    return np.exp(a)


def _vjp_exp(vals, out):
    return lambda g: (g * out,)


def _fw_log(a):
    if np.any(a <= 0.0):
        raise ValueError("log domain requires strictly positive input")
    return np.log(a)


def _vjp_log(vals, out):
    (a,) = vals
    return lambda g: (g / a,)


def _fw_log_floored(a, *, eps):
    return np.log(np.maximum(a, eps))


def _vjp_log_floored(vals, out, *, eps):
    # gradient uses the floored value so it stays bounded near zero
    (a,) = vals
    floored = np.maximum(a, eps)
    return lambda g: (g / floored,)


def _fw_tanh(a):
    return np.tanh(a)


def _vjp_tanh(vals, out):
    return lambda g: (g * (1.0 - out * out),)


def _fw_sigmoid(a):
    return expit(a)


def _vjp_sigmoid(vals, out):
    return lambda g: (g * out * (1.0 - out),)


def _fw_softplus(a):
    return np.logaddexp(0.0, a)


def _vjp_softplus(vals, out):
    (a,) = vals
    return lambda g: (g * expit(a),)


def _fw_relu(a):
    return np.maximum(a, 0.0)


def _vjp_relu(vals, out):
    (a,) = vals
    return lambda g: (g * (a > 0.0),)


# ------------------------------------------------------------ linear algebra

def _fw_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D/2-D operands")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree ({a.shape[-1]} vs {b.shape[0]})")
    return a @ b


def _vjp_matmul(vals, out):
    a, b = vals

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b @ g, np.outer(a, g)
        return g * b, g * a  # 1-D dot

    return vjp


def _fw_sum(a, *, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _vjp_sum(vals, out, *, axis=None, keepdims=False):
    (a,) = vals

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return vjp


def _fw_concat(*parts, axis=0):
    return np.concatenate(parts, axis=axis)


def _vjp_concat(vals, out, *, axis=0):
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        gs = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            gs.append(g[tuple(idx)])
        return tuple(gs)

    return vjp


def _fw_slice(a, *, key):
    return a[key]


def _vjp_slice(vals, out, *, key):
    (a,) = vals

    def vjp(g):
        full = np.zeros_like(a)
        full[key] = g
        return (full,)

    return vjp


def _fw_reshape(a, *, shape):
    return a.reshape(shape)


def _vjp_reshape(vals, out, *, shape):
    (a,) = vals
    return lambda g: (g.reshape(a.shape),)


def _fw_moveaxis(a, *, source, destination):
    return np.moveaxis(a, source, destination)


def _vjp_moveaxis(vals, out, *, source, destination):
    return lambda g: (np.moveaxis(g, destination, source),)


# ---------------------------------------------------------------- convolution

def _conv1d_same_values(x, h):
    """'same' convolution of x[..., B] with odd-length kernel h[K], via FFT."""
    if h.ndim != 1 or h.shape[0] % 2 == 0:
        raise ValueError("conv1d kernel must be 1-D with odd length")
    B = x.shape[-1]
    K = h.shape[0]
    c = (K - 1) // 2
    L = B + K - 1
    X = np.fft.rfft(x, n=L, axis=-1)
    H = np.fft.rfft(h, n=L)
    y = np.fft.irfft(X * H, n=L, axis=-1)
    return y[..., c:c + B]


def _fw_conv1d(x, h):
    return _conv1d_same_values(x, h)


def _vjp_conv1d(vals, out):
    x, h = vals
    B = x.shape[-1]
    K = h.shape[0]
    c = (K - 1) // 2
    L = B + K - 1

    def vjp(g):
        gx = _conv1d_same_values(g, h[::-1])
        # kernel gradient: batched cross-correlation of g with x at lags -c..c
        G = np.fft.fft(g, n=L, axis=-1)
        X = np.fft.fft(x, n=L, axis=-1)
        spec = (G * np.conj(X)).reshape(-1, L).sum(axis=0)
        corr = np.real(np.fft.ifft(spec))
        gh = np.empty(K)
        for m in range(K):
            d = m - c
            gh[m] = corr[d % L]
        return gx, gh

    return vjp


def _fw_conv2d3(x, k, b):
    """Depthwise 3x3 conv with zero padding: x[N,C,H,W], k[C,3,3], b[C]."""
    if x.ndim != 4 or k.shape[-2:] != (3, 3) or k.shape[0] != x.shape[1]:
        raise ValueError("expects x[N,C,H,W], kernel[C,3,3]")
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    y = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            y += k[None, :, u, v, None, None] * xp[:, :, u:u + H, v:v + W]
    return y + b[None, :, None, None]


def _vjp_conv2d3(vals, out):
    x, k, b = vals
    N, C, H, W = x.shape

    def vjp(g):
        gp = np.zeros((N, C, H + 2, W + 2))
        gp[:, :, 1:-1, 1:-1] = g
        gx = np.zeros_like(x)
        gk = np.zeros_like(k)
        xp = np.zeros((N, C, H + 2, W + 2))
        xp[:, :, 1:-1, 1:-1] = x
        for u in range(3):
            for v in range(3):
                gx += k[None, :, u, v, None, None] * gp[:, :, 2 - u:2 - u + H, 2 - v:2 - v + W]
                gk[:, u, v] = np.sum(g * xp[:, :, u:u + H, v:v + W], axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return vjp


for _kind, _fw, _vjp, _lin in [
    ("add", _fw_add, _vjp_add, True),
    ("sub", _fw_sub, _vjp_sub, True),
    ("mul", _fw_mul, _vjp_mul, False),
    ("neg", _fw_neg, _vjp_neg, True),
    ("scale", _fw_scale, _vjp_scale, True),
    ("add_const", _fw_add_const, _vjp_add_const, False),
    ("exp", _fw_exp, _vjp_exp, False),
    ("log", _fw_log, _vjp_log, False),
    ("log_floored", _fw_log_floored, _vjp_log_floored, False),
    ("tanh", _fw_tanh, _vjp_tanh, False),
    ("sigmoid", _fw_sigmoid, _vjp_sigmoid, False),
    ("softplus", _fw_softplus, _vjp_softplus, False),
    ("relu", _fw_relu, _vjp_relu, False),
    ("matmul", _fw_matmul, _vjp_matmul, True),
    ("reduce_sum", _fw_sum, _vjp_sum, True),
    ("concat", _fw_concat, _vjp_concat, True),
    ("slice", _fw_slice, _vjp_slice, True),
    ("reshape", _fw_reshape, _vjp_reshape, True),
    ("moveaxis", _fw_moveaxis, _vjp_moveaxis, True),
    ("conv1d_same", _fw_conv1d, _vjp_conv1d, True),
    ("conv2d3_depthwise", _fw_conv2d3, _vjp_conv2d3, True),
]:
    register_op(_kind, _fw, _vjp, _lin)


# thin functional wrappers

def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def neg(a):
    return record("neg", a)


def scale(a, c):
    return record("scale", a, c=float(c))


def add_const(a, c):
    return record("add_const", a, c=c)


def exp(a):
    return record("exp", a)


def log(a):
    return record("log", a)


def log_floored(a, eps=1e-8):
    return record("log_floored", a, eps=float(eps))


def tanh(a):
    return record("tanh", a)


def sigmoid(a):
    return record("sigmoid", a)


def softplus(a):
    return record("softplus", a)


def relu(a):
    return record("relu", a)


def matmul(a, b):
    return record("matmul", a, b)


def reduce_sum(a, axis=None, keepdims=False):
    return record("reduce_sum", a, axis=axis, keepdims=keepdims)


def mean(a):
    t = as_tensor(a)
    return scale(reduce_sum(t), 1.0 / t.size)


def concat(parts, axis=0):
    return record("concat", *parts, axis=axis)


def slice_(a, key):
    return record("slice", a, key=key)


def reshape(a, shape):
    return record("reshape", a, shape=tuple(shape))


def moveaxis(a, source, destination):
    return record("moveaxis", a, source=source, destination=destination)


def conv1d_same(x, kernel):
    return record("conv1d_same", x, kernel)


def conv2d3_depthwise(x, kernel, bias):
    return record("conv2d3_depthwise", x, kernel, bias)
