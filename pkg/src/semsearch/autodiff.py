"""Minimal dense-tensor kernel with tape-based reverse-mode differentiation.

Everything downstream (encoder, losses, heads) is composed from the
primitives here. Tensors hold float64 data; gradients are accumulated into
``Tensor.grad`` by ``Tape.backward``. Ops record onto the innermost active
``Tape``; outside any tape they are plain forward computations.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; keeps call sites readable
    def __add__(self, other): return add(self, _as_tensor(other))
    def __radd__(self, other): return add(_as_tensor(other), self)
    def __sub__(self, other): return sub(self, _as_tensor(other))
    def __rsub__(self, other): return sub(_as_tensor(other), self)
    def __mul__(self, other): return mul(self, _as_tensor(other))
    def __rmul__(self, other): return mul(_as_tensor(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; replayed in reverse for gradients.

    Inputs of every node precede it (ops append at execution time), so a
    single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.output.grad is None:
                continue
            grads = node.backward_fn(node.output.grad)
            for inp, g in zip(node.inputs, grads):
                if g is not None:
                    inp._accumulate(g)


def _record(inputs, output: Tensor, backward_fn) -> Tensor:
    if _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(_Node(inputs, output, backward_fn))
    return output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    return _record((a,), out, lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record((a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _record((a,), out, lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record((a,), out, lambda g: (g.reshape(orig),))


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup (embedding gather); backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record((table,), out, backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix."""
    out = Tensor(np.stack([r.data for r in rows]))

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return _record(tuple(rows), out, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation of 2-D tensors."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return _record(tuple(parts), out, backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation of 2-D tensors."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]

    def backward(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[:, off:off + n])
            off += n
        return tuple(grads)

    return _record(tuple(parts), out, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _record((a,), out, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _record((a,), out, backward)


def row(a: Tensor, i: int) -> Tensor:
    out = Tensor(a.data[i])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _record((a,), out, backward)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record((a,), out, backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / n,)

    return _record((a,), out, backward)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; subgradient flows to the first (lowest-index) argmax."""
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis))

    def backward(g):
        ga = np.zeros_like(a.data)
        grid = np.indices(idx.shape)
        full = list(grid)
        full.insert(axis if axis >= 0 else a.data.ndim + axis, idx)
        ga[tuple(full)] = g
        return (ga,)

    return _record((a,), out, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record((a, b), out, lambda g: (g * b.data, g * a.data))


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Stable softmax of x / temperature along ``axis``; rows sum to 1."""
    if temperature <= 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _record((x,), out, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    y = np.exp(z - lse)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _record((x,), out, backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layernorm requires a non-empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return _record((x, gain, bias), out, backward)


def gelu(x: Tensor) -> Tensor:
    c = erf(x.data * _INV_SQRT2)
    out = Tensor(0.5 * x.data * (1.0 + c))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + c) + x.data * pdf),)

    return _record((x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    return _record((x,), out, lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    y = np.logaddexp(0.0, x.data)
    out = Tensor(y)
    return _record((x,), out, lambda g: (g / (1.0 + np.exp(-x.data)),))


def tlog(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record((x,), out, lambda g: (g / x.data,))


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _record((x,), out, lambda g: (g * y,))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; pass-through when p == 0."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask)
    return _record((x,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``params`` (closing over
    them); relative error per entry is |a - n| / (|a| + |n| + 1e-12).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data.sum())
            flat[i] = orig - step
            lo = float(f().data.sum())
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / (abs(ai) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
