"""Dense float64 tensors with a reverse-mode tape.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient back onto the inputs.
``Tensor.backward`` walks the recorded graph in reverse topological order.
There is no global state: graphs hang off the tensors themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised for shape mismatches and non-finite values."""


class OracleError(NumericError):
    """The finite-difference oracle saw a non-finite objective."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_array(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    # reverse sweep -----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor on the tape."""
        if grad is None:
            if self.values.size != 1:
                raise NumericError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): _as_array(grad).reshape(self.shape)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Parameter(Tensor):
    """A named trainable leaf plus its Adam moment buffers."""

    __slots__ = ("name", "m", "v")

    def __init__(self, name: str, values):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    return _result(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def divide(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.values / b.values
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * out / b.values, b.shape),
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow.

    The lower tail is clamped at the smallest normal float so the result never
    collapses to exactly 0.
    """
    v = x.values
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.maximum(out, np.finfo(DTYPE).tiny)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.values @ b.values
    except ValueError as exc:
        raise NumericError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def index_select(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    out = x.values[index]

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of ``concat`` for the given piece sizes."""
    if sum(sizes) != x.shape[axis]:
        raise NumericError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    pieces = []
    start = 0
    ax = axis % x.ndim
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        pieces.append(index_select(x, tuple(sl)))
        start += n
    return pieces


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.values.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.values.mean(axis=axis, keepdims=keepdims)
    # summation rounding breaks mean(c, ..., c) == c; constant slices take the value directly
    lo = x.values.min(axis=axis, keepdims=keepdims)
    out = np.where(lo == x.values.max(axis=axis, keepdims=keepdims), lo, out)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), backward)


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then affine."""
    gamma, beta = _lift(gamma), _lift(beta)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.values + beta.values

    def backward(g):
        gx_hat = g * gamma.values
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(out, (x, gamma, beta), backward)


def scatter_mean(values: Tensor, src: np.ndarray, dst: np.ndarray, n_out: int) -> Tensor:
    """out[k] = mean of values[src[e]] over edges e with dst[e] == k.

    Rows of ``out`` that receive no edge are zero.
    """
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    if src.shape != dst.shape:
        raise NumericError(f"scatter_mean index lists differ in length: {src.shape} vs {dst.shape}")
    count = np.bincount(dst, minlength=n_out).astype(DTYPE)
    scale = 1.0 / np.maximum(count, 1.0)
    tail = values.shape[1:]
    out = np.zeros((n_out,) + tail, dtype=DTYPE)
    if src.size:
        np.add.at(out, dst, values.values[src])
    out *= scale.reshape((-1,) + (1,) * len(tail))

    def backward(g):
        full = np.zeros_like(values.values)
        if src.size:
            weighted = g * scale.reshape((-1,) + (1,) * len(tail))
            np.add.at(full, src, weighted[dst])
        return (full,)

    return _result(out, (values,), backward)


def scatter_sum(
    values: Tensor, src: np.ndarray, dst: np.ndarray, n_out: int, weights: np.ndarray | None = None
) -> Tensor:
    """out[k] = sum of weights[e] * values[src[e]] over edges e with dst[e] == k."""
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    tail = values.shape[1:]
    w = None if weights is None else np.asarray(weights, dtype=DTYPE).reshape((-1,) + (1,) * len(tail))
    out = np.zeros((n_out,) + tail, dtype=DTYPE)
    if src.size:
        np.add.at(out, dst, values.values[src] if w is None else values.values[src] * w)

    def backward(g):
        full = np.zeros_like(values.values)
        if src.size:
            np.add.at(full, src, g[dst] if w is None else g[dst] * w)
        return (full,)

    return _result(out, (values,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    worst_index: tuple[int, ...]
    tol: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated twice per parameter element, so keep the problem
    small. ``corrupt`` rewrites the analytic gradient before comparison and
    exists only as a negative-control hook.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.values.size != 1:
        raise ValueError(f"objective must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.values)):
        raise OracleError("objective is not finite at the base point")
    loss.backward()
    worst = (0.0, "", ())
    per_param: dict[str, float] = {}
    n_checked = 0
    for p in params:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        if corrupt is not None:
            analytic = corrupt(p.name, analytic)
        numeric = np.empty_like(p.values)
        p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + h
            up = f().values
            flat[k] = saved - h
            down = f().values
            flat[k] = saved
            if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
                raise OracleError(f"objective is not finite while perturbing {getattr(p, 'name', '?')}[{k}]")
            numeric.reshape(-1)[k] = (up.item() - down.item()) / (2.0 * h)
        err = relative_error(analytic, numeric, floor)
        n_checked += err.size
        name = getattr(p, "name", "?")
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > worst[0]:
            worst = (float(err.max()), name, tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape)))
    return GradCheckReport(worst[0], worst[1], worst[2], tol, per_param, n_checked)
