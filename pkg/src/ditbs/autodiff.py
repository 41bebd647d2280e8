"""Small dense-tensor engine with a reverse-mode tape.

Tensors wrap numpy arrays. Ops executed while a :class:`Tape` is active, and
whose inputs require gradients, are recorded; :func:`backward` replays the
tape in reverse creation order. Broadcasting is limited to leading batch
dimensions: the second operand of a binary op must have a shape equal to a
suffix of the first operand's shape. Anything else needs an explicit
``reshape``/``expand``.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
GRAD_FLOOR = 1e-5     # grad_check scale floor; far above central-difference noise (~1e-10)
_GELU_C = math.sqrt(2.0 / math.pi)

_dtype = np.float32
_tapes: list["Tape"] = []
_counters: list["FlopCounter"] = []
_scopes: list[str] = ["other"]


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int):
    """Switch newly created tensors to 32- or 64-bit floats."""
    global _dtype
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    old = _dtype
    _dtype = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _dtype = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable ops in creation order.

    Use as a context manager; a tape can be consumed by exactly one call to
    :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        node = Node(op, inputs, out, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward on a consumed tape")
    tape.consumed = True
    if loss._node is None or not loss.requires_grad:
        tape.nodes.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# FLOP instrumentation (matmuls only)


@dataclass
class FlopCounter:
    total: int = 0
    by_scope: Counter = field(default_factory=Counter)

    def add(self, flops: int) -> None:
        self.total += flops
        self.by_scope[_scopes[-1]] += flops


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _count(flops: int) -> None:
    for c in _counters:
        c.add(flops)


@contextlib.contextmanager
def flop_scope(name: str):
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


# ---------------------------------------------------------------------------
# ops


def _suffix_ok(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError("add", a.shape, b.shape)

    def bw(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError("sub", a.shape, b.shape)

    def bw(g):
        return (g if a.requires_grad else None,
                -_reduce_to(g, b.shape) if b.requires_grad else None)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError("mul", a.shape, b.shape)

    def bw(g):
        return (g * b.data if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be rank 2 (a weight shared across ``a``'s leading axes) or have
    the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    flops = 2 * out.size * a.shape[-1]
    _count(flops)

    def bw(g):
        # each operand gradient is one more product of the same size
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        _count(flops * ((ga is not None) + (gb is not None)))
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm epsilon must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv

    def bw(g):
        gx = None
        if x.requires_grad:
            dxh = g * gain.data
            gx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _reduce_to(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    c = v.dtype.type(_GELU_C)
    k = v.dtype.type(0.044715)
    half = v.dtype.type(0.5)
    th = np.tanh(c * (v + k * v * v * v))

    def bw(g):
        dth = (1 - th * th) * c * (1 + 3 * k * v * v)
        return (g * (half * (1 + th) + half * v * dth),)

    return _emit("gelu", half * v * (1 + th), (x,), bw)


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where logits are -inf.

    ``mask`` is a constant boolean array broadcastable against ``x``.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, z.shape)
        except ValueError:
            raise ShapeError("softmax_masked", x.shape, mask.shape) from None
        z = np.where(mask, -np.inf, z)
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("softmax_masked: a row is entirely masked")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_masked", y, (x,), bw)


def embed_lookup(table: Tensor, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embed_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed_lookup: id out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embed_lookup", table.data[ids], (table,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.data.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes; gradient sums them back."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.data.ndim != len(shape) or any(a not in (1, b) for a, b in zip(x.shape, shape)):
        raise ShapeError("expand", x.shape, shape)
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _emit("slice", x.data[index], (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def bw(g):
        gd = (2.0 / n) * g * diff
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _emit("mse", out, (a, b), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter max error of tape gradients against central differences.

    The error for a parameter is ``max|tape - fd| / scale`` where scale is
    the largest gradient magnitude of either route, floored at ``GRAD_FLOOR``.
    The floor keeps parameters whose true gradient is exactly zero (e.g. a
    key-projection bias, which softmax cancels) from reporting 0/0 noise.
    """

    errors: dict[str, float]
    tolerance: float

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(builder: Callable[[], tuple[dict[str, Tensor], Callable[[], Tensor]]],
               tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients with central differences in 64-bit mode.

    ``builder`` returns ``(params, loss_fn)``; ``loss_fn()`` must rebuild the
    forward pass from the current parameter values every time it is called.
    """
    errors: dict[str, float] = {}
    with precision(64):
        params, loss_fn = builder()
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        for name, p in params.items():
            tape_grad = np.zeros_like(p.data) if p.grad is None else p.grad
            fd = np.zeros_like(p.data)
            flat, fd_flat = p.data.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
            scale_ = max(float(np.abs(fd).max(initial=0.0)),
                         float(np.abs(tape_grad).max(initial=0.0)), GRAD_FLOOR)
            errors[name] = float(np.abs(tape_grad - fd).max(initial=0.0)) / scale_
    return GradCheckReport(errors, tolerance)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
