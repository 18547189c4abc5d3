"""Dense float64 tensors with reverse-mode differentiation.

Storage is a numpy array; every op that touches a tensor requiring gradients
records a node holding its parents and a closure mapping the output gradient
to parent gradients. ``Tensor.backward`` walks the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "finite_checks",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layernorm",
    "reshape",
    "transpose",
    "split",
    "tsum",
    "mean",
    "dropout",
    "custom_op",
    "finite_diff_check",
    "GradCheckReport",
]


class GraphError(RuntimeError):
    """Misuse of the recorded computation (non-scalar loss, repeated backward)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an op boundary."""


class _State:
    grad_enabled = True
    check_finite = True


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


def set_finite_checks(enabled: bool) -> None:
    _state.check_finite = enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if arr.size == 0 and arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._consumed = True
            node._backward = _spent
        self._consumed = True


def _spent(_g):
    raise GraphError("backward already ran through this node; rebuild the graph")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> None:
    if _state.check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Record an op whose forward was computed by the caller.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent, each shaped like that parent.
    """
    return _result(data, parents, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, op: str) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{op}: shapes {a} and {b} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) as a single node; x is [..., c_in], w is [c_in, c_out]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, parents, backward, "linear")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), backward, "gelu")


def _check_axis(a: Tensor, axis: int) -> None:
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("softmax/logsumexp over an empty axis")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(lse, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - lse),)

    return _result(out, (a,), backward, "logsumexp")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layernorm")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into copies; gradients scatter back into place."""
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    outs = []
    start = 0
    ax = axis % a.data.ndim
    for n in sizes:
        idx = [slice(None)] * a.data.ndim
        idx[ax] = slice(start, start + n)
        idx_t = tuple(idx)

        def backward(g, idx_t=idx_t):
            full = np.zeros_like(a.data)
            full[idx_t] = g
            return (full,)

        outs.append(_result(a.data[idx_t].copy(), (a,), backward, "split"))
        start += n
    return outs


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    src = a.shape
    if axis is None:
        return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return _result(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


@dataclass
class GradCheckReport:
    rel_errors: dict[str, float]
    tol: float
    h: float
    worst: str = ""
    max_rel_error: float = 0.0
    passed: bool = field(default=False)

    def __post_init__(self):
        if self.rel_errors:
            self.worst = max(self.rel_errors, key=self.rel_errors.get)
            self.max_rel_error = self.rel_errors[self.worst]
        self.passed = self.max_rel_error < self.tol


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() against central differences for every entry of ``params``.

    ``f`` rebuilds the graph from the current parameter values on every call.
    The relative error per parameter is ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
        p.requires_grad = True
    f().backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    errors = {}
    # the analytic pass above already ran the finiteness checks
    with no_grad(), finite_checks(False):
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            errors[name] = _rel_error(analytic[name].reshape(-1), numeric)
    return GradCheckReport(errors, tol=tol, h=h)
