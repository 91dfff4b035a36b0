"""Dense float64 tensors with a define-by-run reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.debug = False
    return _state


def set_debug(flag: bool) -> None:
    """Turn NaN assertions on or off for the current thread."""
    _tls().debug = bool(flag)


def is_grad_enabled() -> bool:
    return _tls().grad_enabled


@contextlib.contextmanager
def no_grad():
    s = _tls()
    prev = s.grad_enabled
    s.grad_enabled = False
    try:
        yield
    finally:
        s.grad_enabled = prev


def current_tape() -> "Tape":
    return _tls().tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so inputs always precede the
    node that consumes them.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable) -> None:
        node = _Node(out, tuple(inputs), backward)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array that can take part in gradient computation.

    ``data`` holds the values; ``grad`` is filled in by :func:`backward` for
    every tensor reachable from the loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else id(self._node)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if _tls().debug and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    _check_finite(name, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.name = None
    s = _tls()
    needs = s.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        s.tape.record(out, inputs, backward)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


# broadcasting: identical shapes, scalar, or one shape a suffix of the other


def _is_scalar(shape: tuple) -> bool:
    return len(shape) == 0 or shape == (1,)


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if _is_scalar(sb):
        return sa
    if _is_scalar(sa):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_prep(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    if _tls().debug and np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive input")
    return _make(out, (a,), lambda g: _accumulate(a, g / a.data), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: _accumulate(a, g * sig), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * g * a.data), "square")


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise op {kind!r}")


def stop_gradient(a) -> Tensor:
    """Constant copy of ``a``; no gradient flows back through it."""
    data = as_tensor(a).data
    s = _tls()
    frozen = getattr(s, "frozen_sg", None)
    if frozen is not None:
        if frozen["replay"]:
            data = frozen["values"][frozen["pos"]]
            frozen["pos"] += 1
        else:
            frozen["values"].append(data.copy())
    return Tensor(data)


@contextlib.contextmanager
def frozen_stop_gradients():
    """Record stop-gradient values on the first evaluation, replay them afterwards.

    Finite differences of a function built with :func:`stop_gradient` only
    agree with the tape if the stopped values are held fixed; call
    ``replay()`` on the yielded handle after the reference evaluation.
    """
    s = _tls()
    handle = {"values": [], "pos": 0, "replay": False}

    class _Handle:
        def replay(self):
            handle["replay"] = True
            handle["pos"] = 0

        def rewind(self):
            handle["pos"] = 0

    prev = getattr(s, "frozen_sg", None)
    s.frozen_sg = handle
    try:
        yield _Handle()
    finally:
        s.frozen_sg = prev


def matmul(a, b) -> Tensor:
    """Matrix product.

    Accepts ``(m, k) @ (k, n)``, batched ``(..., m, k) @ (..., k, n)`` with
    identical leading dimensions, and ``(..., m, k) @ (k, n)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul cannot broadcast {a.shape} against {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: _accumulate(a, g.reshape(src)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: _accumulate(a, np.transpose(g, inv)), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = all(isinstance(i, (slice, int)) or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(np.array(out), (a,), bw, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        # bring the gathered axes to the front so add.at can scatter along axis 0
        moved = np.moveaxis(full, axis, 0)
        gi = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gi)
        _accumulate(a, full)

    return _make(out, (a,), bw, "take")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(out, ts, bw, "concat")


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    axis = axis % a.ndim
    out, lo = [], 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + size)
        out.append(getitem(a, tuple(sl)))
        lo += size
    return out


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    p = s / tot

    def bw(g):
        _accumulate(a, np.expand_dims(g, axis) * p)

    return _make(out, (a,), bw, "logsumexp")


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get zero weight."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    tot = e.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - dot))

    return _make(p, (a,), bw, "softmax")


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply optional gain and bias."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - xhat * gx))

    out = _make(xhat, (a,), bw, "layer_norm")
    if n and gain is not None:
        out = mul(out, gain)
    if n and bias is not None:
        out = add(out, bias)
    return out


def causal_mask(n_query: int, n_memory: int = 0, window: int | None = None) -> np.ndarray:
    """Boolean ``(n_query, n_memory + n_query)`` mask.

    Query ``i`` sits at absolute position ``n_memory + i`` and may attend to
    any key at or before it. With ``window`` set, keys older than ``window``
    positions are excluded as well.
    """
    q = np.arange(n_query)[:, None] + n_memory
    k = np.arange(n_memory + n_query)[None, :]
    mask = k <= q
    if window is not None:
        mask &= k >= q - window
    return mask


def masked_attention(q, k, v, mask: np.ndarray | None = None, memory=None, bias=None) -> Tensor:
    """Scaled dot-product attention over ``[memory; current]`` keys.

    ``q`` has shape ``(..., Tq, d)``; ``k`` and ``v`` ``(..., Tk, d)``.
    ``memory`` is an optional ``(k_mem, v_mem)`` pair prepended on the key
    axis. When ``mask`` is omitted a causal mask is built in which every
    query sees all memory plus current keys up to itself. ``bias`` is added
    to the attention logits before masking.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n_mem = 0
    if memory is not None:
        km, vm = memory
        km, vm = as_tensor(km), as_tensor(vm)
        n_mem = km.shape[-2]
        if n_mem:
            k = concat([km, k], axis=-2)
            v = concat([vm, v], axis=-2)
    if mask is None:
        mask = causal_mask(q.shape[-2], k.shape[-2] - q.shape[-2])
    if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise DimensionError(f"mask shape {mask.shape} does not match scores {q.shape[-2]}x{k.shape[-2]}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tape ancestor of ``loss`` and clear the tape."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward() expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    node = loss._node
    if node is None or not tape.nodes or node not in _tail_scan(tape, node):
        raise ContractError("loss is not recorded on the active tape; re-run the forward pass")
    for n in tape.nodes:
        n.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for n in reversed(tape.nodes):
        if n.out.grad is not None:
            n.backward(n.out.grad)
    tape.clear()


def _tail_scan(tape: Tape, node: _Node):
    # the loss is normally the last node recorded; scan from the end
    for n in reversed(tape.nodes):
        if n is node:
            return (node,)
    return ()
