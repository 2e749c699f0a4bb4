"""Dense tensors with tape-based reverse-mode autodiff.

Storage is a contiguous numpy array in one of two precisions: ``"standard"``
(float32) for training and benchmarks, ``"wide"`` (float64) for gradient
checks.  Every op records a :class:`Node` when any input requires a gradient;
:meth:`Tensor.backward` walks the recorded graph from a scalar loss.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISIONS = {"standard": np.float32, "wide": np.float64}
RMS_EPS = 1e-6


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class DimensionError(ValueError):
    pass


def dtype_of(precision) -> np.dtype:
    if precision is None:
        return np.dtype(np.float32)
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


# -- FLOP accounting -------------------------------------------------------

class FlopCounter:
    """Accumulates floating-point operation counts while active."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_active_counters: list[FlopCounter] = []
_grad_enabled = True


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def add_flops(op: str, n: int):
    for c in _active_counters:
        c.add(op, n)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


# -- graph -----------------------------------------------------------------

@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Nodes reachable from a loss, in topological order."""

    nodes: list[Node] = field(default_factory=list)
    visits: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_output(cls, out: "Tensor") -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))
        return cls(nodes=order)

    def check_order(self):
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for inp in n.inputs:
                if inp._node is not None and pos[id(inp._node)] >= i:
                    raise AssertionError(f"node {n.op} precedes its input {inp._node.op}")


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Row-major array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision=None):
        if precision is None and isinstance(data, np.ndarray) and data.dtype == np.float64:
            precision = "wide"
        dt = dtype_of(precision)
        arr = np.ascontiguousarray(np.array(data, dtype=dt, copy=True))
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "constructor")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.sparse_grad = None  # object with .to_dense(shape); set by sparse producers
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.grad = None
        t.sparse_grad = None
        t.requires_grad = requires_grad
        t._node = None
        return t

    @classmethod
    def from_op(cls, op: str, data: np.ndarray, inputs: Sequence["Tensor"], backward) -> "Tensor":
        """Create the output of a (possibly custom) differentiable op."""
        _check_finite(data, op)
        needs = _grad_enabled and any(i.requires_grad for i in inputs)
        out = cls._wrap(data, needs)
        if needs:
            out._node = Node(op, tuple(inputs), out, backward)
        return out

    # -- basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "wide" if self.data.dtype == np.float64 else "standard"

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None
        self.sparse_grad = None

    def dense_grad(self) -> np.ndarray:
        g = np.zeros_like(self.data) if self.grad is None else self.grad.copy()
        if self.sparse_grad is not None:
            g += self.sparse_grad.to_dense(self.shape).astype(g.dtype)
        return g

    # -- autodiff
    def backward(self) -> Graph:
        if self.data.size != 1:
            raise DimensionError("backward() needs a scalar loss")
        graph = Graph.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        if self._node is None and self.requires_grad:
            self._accumulate(grads[id(self)])
        for node in reversed(graph.nodes):
            graph.visits[id(node)] = graph.visits.get(id(node), 0) + 1
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=inp.data.dtype), inp.shape)
                if inp._node is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        return graph

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.data.dtype))


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data
    add_flops("add", out.size)
    return Tensor.from_op("add", out, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data
    add_flops("mul", out.size)
    return Tensor.from_op("mul", out, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))
    add_flops("sum", a.size)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op("sum", out, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = np.argsort(axes)
    return Tensor.from_op("transpose", np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor.from_op("getitem", np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op("concat", out, tuple(tensors),
                          lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; the backward is a dense scatter-add."""
    ids = np.asarray(ids)
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return Tensor.from_op("embedding", out, (weight,), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    add_flops("matmul", 2 * out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            # shared weight: fold the batch axes into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor.from_op("matmul", out, (a, b), backward)


# -- nonlinearities --------------------------------------------------------

def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    s = _softmax_np(x.data)
    add_flops("softmax", 4 * s.size)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op("softmax", s, (x,), backward)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


def silu_grad_np(x: np.ndarray) -> np.ndarray:
    sg = sigmoid_np(x)
    return sg + x * sg * (1.0 - sg)


def silu(x: Tensor) -> Tensor:
    out = silu_np(x.data)
    add_flops("silu", 4 * out.size)
    return Tensor.from_op("silu", out, (x,), lambda g: (g * silu_grad_np(x.data),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = RMS_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 1 or weight.shape != (d,):
        raise DimensionError(f"rms_norm weight {weight.shape} does not match last axis {d}")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data
    add_flops("rms_norm", 4 * x.size)

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gxhat = g * weight.data
        gx = inv * (gxhat - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return Tensor.from_op("rms_norm", out, (x, weight), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects [batch, classes] logits")
    targets = np.asarray(targets, dtype=np.int64)
    b, v = logits.shape
    if targets.shape != (b,):
        raise DimensionError("one target per row required")
    if np.any(targets < 0) or np.any(targets >= v):
        raise IndexError("target index out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(b), targets]
    out = np.asarray(nll.mean(), dtype=logits.dtype)
    add_flops("cross_entropy", 4 * logits.size)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), targets] -= 1.0
        return (p * (g / b),)

    return Tensor.from_op("cross_entropy", out, (logits,), backward)


# -- verification ----------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng=None, details: bool = False):
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` takes no arguments and closes over ``params``; it must be
    deterministic.  For parameters with more than ``max_coords`` entries a
    random subset of coordinates is checked.  Returns the max relative error
    ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)`` (and per-parameter maxima when
    ``details`` is set).
    """
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.dense_grad() for p in params]

    def evaluate() -> float:
        val = f().item()
        if not np.isfinite(val):
            raise NumericError("objective is not finite")
        return val

    worst = 0.0
    per_param = []
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = evaluate()
            flat[c] = orig - h
            fm = evaluate()
            flat[c] = orig
            fd = (fp - fm) / (2 * h)
            ga = float(g.reshape(-1)[c])
            denom = max(abs(ga), abs(fd), 1e-8)
            err = max(err, abs(ga - fd) / denom)
        per_param.append(err)
        worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return (worst, per_param) if details else worst
