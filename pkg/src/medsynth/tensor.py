"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each operation that touches a tensor with ``requires_grad`` records its
parents and a closure computing the vector-Jacobian product. ``backward``
walks that implicit graph in reverse topological order. Graphs are built
fresh on every forward pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, InvalidShapeError, NonFiniteError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every recording ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Every recorded ancestor of ``root`` (inclusive), parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite output")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data ** exponent, (a,), backward, "pow")


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, in), weight (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear input {x.shape} vs weight {weight.shape}")

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


# -- pointwise nonlinearities ----------------------------------------------

def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha)

    def backward(g):
        return (g * slope,)

    return _result(x.data * slope, (x,), backward, "leaky_relu")


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), backward, "tanh")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input; clamp probabilities first")

    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient is zero where clipping was active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), backward, "clamp")


# -- shape manipulation and reductions --------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tensors, backward, "concat")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise DomainError("mean of an empty tensor")
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(out, (x,), backward, "mean")


# -- convolution --------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, H', W', kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of padded input (B,C,H,W) with kernel (O,C,kh,kw)."""
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, out_hw: tuple) -> np.ndarray:
    """Adjoint of :func:`correlate` w.r.t. its input; scatters (B,O,H',W') back to (B,C,*out_hw)."""
    b, _, ho, wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # B, H', W', C, kh, kw
    out = np.zeros((b, w.shape[1]) + tuple(out_hw))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _kernel_grad(a: np.ndarray, gp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # sum_b,y,x a[b,o,y,x] * gp[b,c,y*s+i,x*s+j] -> (O, C, kh, kw)
    win = _windows(gp, kh, kw, stride)
    return np.tensordot(a, win, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv_args(op, x, w, b, stride, padding, in_axis):
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidShapeError(f"{op} expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise InvalidShapeError(f"{op}: input has {x.shape[1]} channels, kernel expects {w.shape[in_axis]}")
    out_ch = w.shape[1 - in_axis]
    if b.shape != (out_ch,):
        raise InvalidShapeError(f"{op}: bias shape {b.shape}, expected ({out_ch},)")
    if int(stride) < 1 or int(padding) < 0:
        raise InvalidShapeError(f"{op}: stride must be >= 1 and padding >= 0")


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B,Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv_args("conv2d", x, w, b, stride, padding, in_axis=1)
    kh, kw = w.shape[2:]
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < kh or wp < kw:
        raise InvalidShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    xp = _pad(x.data, padding)
    out = correlate(xp, w.data, stride) + b.data[None, :, None, None]

    def backward(g):
        gx = _crop(correlate_adjoint(g, w.data, stride, (hp, wp)), padding) if x.requires_grad else None
        gw = _kernel_grad(g, xp, kh, kw, stride) if w.requires_grad else None
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, w, b), backward, "conv2d")


def conv_transpose2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution. x: (B,Cin,H,W), w: (Cin,Cout,kh,kw), b: (Cout,).

    Output side is ``(H-1)*stride - 2*padding + kh``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv_args("conv_transpose2d", x, w, b, stride, padding, in_axis=0)
    kh, kw = w.shape[2:]
    hf = (x.shape[2] - 1) * stride + kh
    wf = (x.shape[3] - 1) * stride + kw
    if hf - 2 * padding <= 0 or wf - 2 * padding <= 0:
        raise InvalidShapeError("conv_transpose2d: output would be empty")
    full = correlate_adjoint(x.data, w.data, stride, (hf, wf))
    out = _crop(full, padding) + b.data[None, :, None, None]

    def backward(g):
        gp = _pad(g, padding)
        gx = correlate(gp, w.data, stride) if x.requires_grad else None
        gw = _kernel_grad(x.data, gp, kh, kw, stride) if w.requires_grad else None
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), (x, w, b), backward, "conv_transpose2d")


# -- gradient verification ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_param: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-5, kink_retry: bool = True) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` is called with no arguments and must read ``params`` by reference;
    it has to be deterministic (freeze any noise before calling). The relative
    error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    elements whose true gradient is ~0 (biases ahead of a batch norm, say)
    from dividing roundoff by roundoff.

    With ``kink_retry`` an element that fails at step ``h`` is measured once
    more at ``h / 10`` and keeps the smaller error: a central difference whose
    interval straddles a (leaky) relu kink measures a chord, not the slope.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), floor)

    worst, per_param = 0.0, []
    with no_grad():
        for p, a in zip(params, analytic):
            flat, a = p.data.reshape(-1), a.reshape(-1)
            err = 0.0
            for i in range(flat.size):
                e = rel(a[i], central(flat, i, h))
                if e >= tol and kink_retry:
                    e = min(e, rel(a[i], central(flat, i, h / 10.0)))
                err = max(err, e)
            per_param.append(err)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, per_param=per_param)
