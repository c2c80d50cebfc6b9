"""Minimal dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Each op records its parents and a closure
mapping the output gradient to one gradient per parent; ``Graph`` orders the
recorded nodes topologically and ``Tensor.backward`` walks them in reverse.
Training runs in 32-bit floats; wrap gradient checks in ``precision(np.float64)``.
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

# Finite stand-in for -inf in additive attention masks.
NEG_BIG = -1e9

_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Create tensors in ``dtype`` (float32 or float64) inside the block."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (sampling, evaluation)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{req}{nm})"

    # --- operators ---
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        Graph.from_output(self).backward(self, np.asarray(grad, dtype=self.dtype))


@dataclass(frozen=True)
class OpRecord:
    op: str
    input_ids: Tuple[int, ...]
    output_id: int


class Graph:
    """Recorded computation reachable from one output, in topological order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def records(self) -> List[OpRecord]:
        return [
            OpRecord(node._op, tuple(id(p) for p in node._parents), id(node))
            for node in self.nodes
        ]

    def backward(self, root: Tensor, root_grad: np.ndarray):
        # Each node is visited once, after all of its consumers.
        pending: Dict[int, np.ndarray] = {id(root): root_grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            if node is root or node.grad is not None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(value: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    """Wrap ``value`` as the output of ``op``; used by ops defined outside this module."""
    out = Tensor(value)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data / b.data, (a, b), "div",
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), "neg", lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_op(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return make_op(y, (a,), "gelu", backward)


# ---------------------------------------------------------------- reductions

def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return make_op(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(original),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(np.broadcast_to(a.data, shape), (a,), "broadcast", lambda g: (g,))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_op(a.data[key], (a,), "getitem", backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat() needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_op(np.take(a.data, idx, axis=axis), (a,), "take", backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer token ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"token id out of range for vocabulary of {weight.shape[0]}")
    return take(weight, ids, axis=0)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_op(a.data @ b.data, (a, b), "matmul", backward)


def linear(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty feature dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return make_op(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", backward)


def masked_attention(q, k, v, mask, head_dim: int) -> Tensor:
    """softmax(q kᵀ / √head_dim + mask) v, batched over leading (head) dims.

    ``mask`` is an additive (num_q, num_k) array or anything exposing
    ``.values``; entries are 0 (allowed) or NEG_BIG (blocked).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    m = np.asarray(getattr(mask, "values", mask))
    num_q, num_k = q.shape[-2], k.shape[-2]
    if m.shape != (num_q, num_k):
        raise DimensionError(f"mask shape {m.shape} does not match attention ({num_q}, {num_k})")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} disagree on length")
    blocked_rows = np.flatnonzero(~(m > NEG_BIG / 2).any(axis=-1))
    if blocked_rows.size:
        raise ContractError(f"attention rows {blocked_rows[:8].tolist()} have every key blocked")

    scale = 1.0 / math.sqrt(head_dim)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale + m
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * scale
        gk = (np.swapaxes(gs, -1, -2) @ q.data) * scale
        return gq, gk, gv

    return make_op(p @ v.data, (q, k, v), "masked_attention", backward)


def mse_loss(pred, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------- validation harness

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar computation from the current parameter values.
    Relative error is |a - n| / max(|a|, |n|, floor). ``max_entries`` checks a
    random subset of entries per parameter to bound runtime on larger models.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: function value is not finite")
    if out.requires_grad:
        out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, size=max_entries, replace=False)
            for i in entries:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f().data)
                flat[i] = orig - h
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(a.reshape(-1)[i])
                if not (math.isfinite(numeric) and math.isfinite(exact)):
                    raise NumericError(f"grad_check: non-finite gradient for {p.name or 'param'}[{i}]")
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, err)
    logger.debug(f"grad_check over {len(params)} tensors: max relative error {worst:.3e}")
    return worst
