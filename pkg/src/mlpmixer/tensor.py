"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a contiguous row-major numpy buffer (f32 or f64) and, when it
was produced by an operation, remembers its parents and a backward rule. Calling
:func:`grad` on a scalar tensor walks the recorded graph in reverse topological
order and returns the gradient of every named leaf.

Only the operations the Mixer needs are provided. Broadcasting is limited to
bias addition and constant masks; everything else requires explicit
reshape/transpose so each gradient rule stays easy to audit.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward", "requires_grad", "name", "op")

    def __init__(self, data, *, requires_grad: bool = False, name: str | None = None,
                 dtype=None, parents: tuple = (), backward: Callable | None = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    return Tensor(data, parents=parents, backward=backward, op=op)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation

class MacCounter:
    def __init__(self):
        self.macs = 0


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by ``matmul``/``bmm`` in the forward pass."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(n: int) -> None:
    for c in _counters:
        c.macs += n


# ---------------------------------------------------------------------------
# operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``. Leading axes of ``a`` are treated as a batch."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
    _tally(a2.shape[0] * k * n)

    def backward(g):
        g2 = g.reshape(-1, n)
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _node(out, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., m, k] @ b[..., k, n]`` with identical leading axes."""
    if (a.data.ndim < 3 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _tally(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _node(out, (a, b), backward, "bmm")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` broadcast onto ``x`` (numpy rules); gradient of ``b`` is reduced back."""
    try:
        out = x.data + b.data
    except ValueError:
        raise ShapeError(f"add_bias: cannot broadcast {b.shape} onto {x.shape}") from None
    if out.shape != x.shape:
        raise ShapeError(f"add_bias: bias {b.shape} would grow {x.shape}")
    return _node(out, (x, b), lambda g: (g, _reduce_to(g, b.shape)), "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def mul_const(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable onto ``x`` (dropout / drop-path masks)."""
    m = np.asarray(mask, dtype=x.dtype)
    out = x.data * m
    if out.shape != x.shape:
        raise ShapeError(f"mul_const: mask {m.shape} would grow {x.shape}")
    return _node(out, (x,), lambda g: (g * m,), "mul_const")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.data.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from ``erf``."""
    cdf = (0.5 * (1.0 + erf(x.data * _SQRT1_2))).astype(x.dtype, copy=False)
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(x.data * x.data * x.dtype.type(-0.5)) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x.data * pdf),)

    return _node(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward, "layernorm")


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _node(x.data.mean(axis=axis), (x,), backward, "mean")


def sum_all(x: Tensor) -> Tensor:
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    t = np.asarray(targets, dtype=logits.dtype)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs targets {t.shape}")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"softmax_xent: target row {bad} sums to {sums[bad]!r}, not 1")
    logp = log_softmax(logits.data)
    b = logits.shape[0]
    loss = -(t * logp).sum() / b

    def backward(g):
        return (g * (np.exp(logp) - t) / b,)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------------------
# reverse pass

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named leaf (or the given leaves).

    Leaves that do not influence the loss get zero gradients.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"grad: loss must be a scalar, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            # gradient buffers are never written in place, so views can be stored as-is
            grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        wrt = [n for n in order if not n.parents and n.name is not None]
    out = {}
    for leaf in wrt:
        g = grads.get(id(leaf))
        out[leaf.name] = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
    return out
