"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a plain DAG of `Tensor` nodes: every op records its parent
tensors and a closure that maps the output gradient to parent gradients.
`ComputationRecord.trace` linearizes the DAG reachable from a loss and
`backward` replays it in reverse. Broadcasting is supported only where the
ops below need it (bias / gate vectors against a trailing axis, scalars).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "tensor",
    "zeros",
    "make_node",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "flip",
    "pad_axis",
    "concat",
    "sum_",
    "mean_",
    "exp",
    "log",
    "tanh",
    "silu",
    "gelu",
    "softplus",
    "clamp_min",
    "softmax",
    "layer_norm",
    "backward",
    "check_gradient",
]


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # convenience arithmetic; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, op={self._op})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_node(data, parents, backward_fn, op: str) -> Tensor:
    """Build an op output. `backward_fn(grad_out)` must return one gradient
    array (or None) per parent. The closure is only attached when some
    parent tracks gradients, so frozen subgraphs cost nothing."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


class ComputationRecord:
    """Topologically ordered op nodes reachable from an output tensor."""

    def __init__(self, nodes):
        self.nodes = nodes  # parents always precede children

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order = []
        seen = set()
        stack = [(output, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Gradients accumulate (callers zero them between steps). Tensors with
    requires_grad=False are never touched.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    if record is None:
        record = ComputationRecord.trace(loss)
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_node(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return make_node(data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return make_node(data, (a, b), bwd, "matmul")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return make_node(np.transpose(a.data, axes), (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return make_node(a.data.reshape(shape), (a,), bwd, "reshape")


def flip(a: Tensor, axis: int) -> Tensor:
    def bwd(g):
        return (np.flip(g, axis=axis),)

    return make_node(np.flip(a.data, axis=axis), (a,), bwd, "flip")


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    n = a.data.shape[axis]

    def bwd(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return make_node(np.pad(a.data, widths), (a,), bwd, "pad_axis")


def _getitem(a: Tensor, idx) -> Tensor:
    def bwd(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return make_node(a.data[idx], (a,), bwd, "getitem")


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(data, tuple(tensors), bwd, "concat")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return make_node(data, (a,), bwd, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return make_node(data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return make_node(data, (a,), bwd, "log")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return make_node(data, (a,), bwd, "tanh")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def bwd(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return make_node(data, (a,), bwd, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(data, (a,), bwd, "gelu")


def softplus(a: Tensor) -> Tensor:
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        return (g * sig,)

    return make_node(data, (a,), bwd, "softplus")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo

    def bwd(g):
        return (g * mask,)

    return make_node(np.maximum(a.data, lo), (a,), bwd, "clamp_min")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction."""
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return make_node(data, (a,), bwd, "softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def bwd(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(a.data.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        return gx, ggain, gbias

    return make_node(data, (a, gain, bias), bwd, "layer_norm")


def check_gradient(f, x: Tensor, h: float = 1e-6, sample: int | None = None, rng=None) -> float:
    """Max relative error between autodiff and central finite differences.

    `f` must map a Tensor to a scalar Tensor. When `sample` is given, only
    that many randomly chosen components of `x` are probed (the analytic
    gradient is still computed in full).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.ndim != 0 and y.data.size != 1:
        raise ContractError(f"check_gradient requires a scalar-valued f, got shape {y.data.shape}")
    backward(y)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = x.data.reshape(-1).copy()
    indices = range(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=sample, replace=False)

    def eval_at(values):
        out = f(Tensor(values.reshape(x.data.shape)))
        return float(out.data)

    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = eval_at(flat)
        flat[i] = orig - h
        fm = eval_at(flat)
        flat[i] = orig
        diff = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - diff) / max(abs(a), abs(diff), 1e-12)
        worst = max(worst, err)
    return worst
