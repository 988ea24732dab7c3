"""Dense tensors with a small reverse-mode tape.

Only the kernels the RA-MAT network needs are provided. Every op checks
shapes explicitly; there is no implicit broadcasting apart from scalar
``scale`` and the shared-weight ``linear``.

Usage::

    with Tape() as tape:
        y = tanh(linear(x, w, b))
        loss = mse(y, target)
    backward(loss, tape)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError", "NumericError", "ContractError",
    "Tensor", "Tape", "backward", "precision", "default_dtype", "check_finite",
    "matmul", "bmm", "linear", "add", "mul", "scale", "neg", "tanh", "gelu",
    "elementwise", "softmax_lastdim", "layer_norm", "reshape", "transpose",
    "mean", "sum_all", "select_rows", "fill_masked", "mse", "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class NumericError(ArithmeticError):
    """A NaN or infinity was produced or supplied."""


class ContractError(RuntimeError):
    """A call violated an operation's preconditions."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable row-major array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def validate(self) -> "Tensor":
        if self.data.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ContractError("data length does not match shape")
        if self.grad is not None and self.grad.shape != self.shape:
            raise ContractError(f"grad shape {self.grad.shape} != {self.shape}")
        check_finite(self)
        return self

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def check_finite(t: Tensor, where: str = "") -> None:
    if not np.all(np.isfinite(t.data)):
        where = where or (t.name or "tensor")
        raise NumericError(f"non-finite values in {where}")


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of differentiable ops.

    Ops executed while the tape is active (``with tape:``) are recorded when
    at least one input requires a gradient. A tape can be replayed once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor],
               fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self._nodes.append(_Node(out, tuple(inputs), fn))

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self._nodes}
        seen: dict[int, Tensor] = {}
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise ContractError("tape already replayed; record a new one")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss was not produced through the tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        live = {id(loss)}
        for node in reversed(self._nodes):
            if id(node.out) not in live:
                continue
            grads = node.fn(node.out.grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise DimensionError(f"gradient shape {g.shape} != input {t.shape}")
                t.grad = t.grad + g.astype(t.dtype, copy=False)
                live.add(id(t))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``."""
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor.__new__(Tensor)
    data = np.ascontiguousarray(data)
    data.setflags(write=False)
    out.data = data
    out.name = None
    out.requires_grad = tape is not None
    out.grad = np.zeros_like(data) if tape is not None else None
    if tape is not None:
        tape.record(out, inputs, fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dimensions."""
    if (a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b),
                 lambda g: (g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply the weight ``w[k, n]`` (and bias ``b[n]``) to every row of ``x[..., k]``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data
    k, n = W.shape

    def fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ W.T).reshape(X.shape)
        gw = X.reshape(-1, k).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, fn)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    X = x.data
    cdf = (0.5 * (1.0 + erf(X * _INV_SQRT2))).astype(X.dtype)
    pdf = (_INV_SQRT2PI * np.exp(-0.5 * X * X)).astype(X.dtype)
    return _emit(X * cdf, (x,), lambda g: (g * (cdf + X * pdf),))


def elementwise(op: str, *args):
    """Dispatch by name: tanh, gelu, add, mul, scale."""
    table = {"tanh": tanh, "gelu": gelu, "add": add, "mul": mul, "scale": scale}
    try:
        return table[op](*args)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: empty last dimension in {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm: last dimension {d} < 2 is degenerate")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs {x.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * rstd
    G = gamma.data

    def fn(g):
        gh = g * G
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(X.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(xhat * G + beta.data, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    n = x.shape[axis]
    src = x.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), fn)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _emit(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full(src, g, dtype=x.dtype),))


def select_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Gather rows ``x[mask]`` where ``mask`` has shape ``x.shape[:-1]``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"select_rows: mask {mask.shape} vs tensor {x.shape}")
    src = x.shape

    def fn(g):
        gx = np.zeros(src, dtype=g.dtype)
        gx[mask] = g
        return (gx,)

    return _emit(x.data[mask], (x,), fn)


def fill_masked(x: Tensor, mask: np.ndarray, token: Tensor) -> Tensor:
    """Replace the rows of ``x`` selected by ``mask`` with ``token``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"fill_masked: mask {mask.shape} vs tensor {x.shape}")
    if token.shape != (x.shape[-1],):
        raise DimensionError(f"fill_masked: token {token.shape} vs rows of {x.shape}")
    out = x.data.copy()
    out[mask] = token.data

    def fn(g):
        gx = g.copy()
        gx[mask] = 0
        return gx, g[mask].sum(axis=0)

    return _emit(out, (x, token), fn)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _same_shape("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size
    if n == 0:
        raise ContractError("mse of empty tensors")

    def fn(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _emit(np.asarray((diff * diff).mean()), (pred, target), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(labels.shape[0])
    n = labels.shape[0]

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (g * p / n,)

    return _emit(np.asarray(-logp[rows, labels].mean()), (logits,), fn)
