"""Minimal dense tensor engine with a reverse-mode gradient tape.

Ops record themselves on the innermost active :class:`Tape`.  Without an
active tape nothing is recorded and outputs never require gradients, which is
how inference runs::

    with Tape() as tape:
        loss = model(batch)
    tape.backward(loss)

Arrays are channels-last throughout the package, e.g. ``(N, T, V, C)``.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e30

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
        _state.scope = "default"
    return _state.counters


_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


class Tape:
    """Ordered record of executed ops; inputs always precede their consumers."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable, kind: str) -> None:
        self.records.append((out, inputs, backward, kind))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns the leaves touched."""
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; record a new one")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise RuntimeError("tape is empty")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn, _ in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self._consumed = True
        self.records.clear()
        return list(leaves.values())


def _active_tape() -> Tape | None:
    stack = _tapes()
    return stack[-1] if stack else None


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, kind: str) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(result, inputs, backward, kind)
    return result


# ---------------------------------------------------------------------------
# FLOP accounting: matmul-like ops report multiply-accumulates to any active
# counter, keyed by the current scope label.


@contextmanager
def count_macs():
    """Collect multiply-accumulate counts of executed ops, keyed by scope."""
    counter: Counter = Counter()
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


@contextmanager
def flop_scope(name: str):
    _counters()
    prev = _state.scope
    _state.scope = name
    try:
        yield
    finally:
        _state.scope = prev


def _add_macs(n: int) -> None:
    stack = _counters()
    if stack:
        for c in stack:
            c[_state.scope] += int(n)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _make(np.maximum(x.data, 0), (x,), backward, "relu")


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        return (g * sigmoid_np(d),)

    return _make(out, (x,), backward, "softplus")


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    _add_macs(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``; weight is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    _add_macs(out.size * weight.shape[0])
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(_lead_sum(g2))
        return tuple(grads)

    return _make(out.reshape(*lead, weight.shape[1]), inputs, backward, "linear")


def conv_time(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution along axis 1 of a channels-last ``(N, T, ..., Cin)`` array.

    ``weight`` has shape ``(K, Cin, Cout)``; the output length is
    ``(T + 2*padding - dilation*(K-1) - 1) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 3 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"conv_time: input {x.shape} incompatible with weight {weight.shape}")
    k, cin, cout = weight.shape
    t = x.shape[1]
    t_out = (t + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv_time: input length {t} too short for kernel {k} dilation {dilation}")
    pad_width = [(0, 0)] * x.ndim
    pad_width[1] = (padding, padding)
    xp = np.pad(x.data, pad_width) if padding else x.data
    span = stride * (t_out - 1) + 1
    taps = [xp[:, i * dilation: i * dilation + span: stride] for i in range(k)]
    out = taps[0] @ weight.data[0]
    for i in range(1, k):
        out += taps[i] @ weight.data[i]
    _add_macs(out.size * cin * k)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i * dilation: i * dilation + span: stride] += g @ weight.data[i].T
            gx = gxp[:, padding: padding + t] if padding else gxp
        if weight.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.stack([taps[i].reshape(-1, cin).T @ g2 for i in range(k)])
        grads = [gx, gw]
        if bias is not None:
            grads.append(_lead_sum(g))
        return tuple(grads)

    return _make(out, inputs, backward, "conv_time")


def max_pool_time(x, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling along axis 1 with -inf padding."""
    x = as_tensor(x)
    t = x.shape[1]
    t_out = (t + 2 * padding - kernel) // stride + 1
    if t_out < 1:
        raise ValueError(f"max_pool_time: input length {t} too short for kernel {kernel}")
    pad_width = [(0, 0)] * x.ndim
    pad_width[1] = (padding, padding)
    xp = np.pad(x.data, pad_width, constant_values=-np.inf) if padding else x.data
    span = stride * (t_out - 1) + 1
    windows = np.stack([xp[:, i: i + span: stride] for i in range(kernel)])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            gxp[:, i: i + span: stride] += np.where(arg == i, g, 0.0)
        return (gxp[:, padding: padding + t] if padding else gxp,)

    return _make(out, (x,), backward, "max_pool_time")


# ---------------------------------------------------------------------------
# normalization and softmax


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis``; ``mask`` (True = keep) gets exactly zero weight elsewhere."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            z = z + np.where(mask, 0.0, MASK_VALUE).astype(z.dtype)
        except ValueError:
            raise ValueError(f"softmax: mask {mask.shape} does not broadcast to {x.shape}") from None
    y = softmax_np(z, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def _lead_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last, as a matrix-vector product (much faster than reduce)."""
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def _norm_backward(g, xhat, inv_std, axes, n):
    if axes is None:  # statistics shared over all leading axes
        rows = g.size // g.shape[-1]
        gmean = _lead_sum(g) / rows
        gxmean = _lead_sum(g * xhat) / rows
    else:
        gmean = g.mean(axis=axes, keepdims=True)
        gxmean = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gmean - xhat * gxmean)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat
    inputs = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        inputs.append(beta)
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        grads = [_norm_backward(gh, xhat, inv_std, -1, x.shape[-1])]
        if gamma is not None:
            grads.append(_lead_sum(g * xhat))
        if beta is not None:
            grads.append(_lead_sum(g))
        return tuple(grads)

    return _make(out, tuple(inputs), backward, "layer_norm")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are applied.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"batch_norm: {x.shape[-1]} channels but {gamma.shape[0]} scales")
    red = tuple(range(x.ndim - 1))
    if training:
        n = x.data.size // x.shape[-1]
        mu = _lead_sum(x.data) / n
        xc = x.data - mu
        var = _lead_sum(xc * xc) / n
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
        xc = x.data - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        if training:
            gx = _norm_backward(gh, xhat, inv_std, None, None)
        else:
            gx = gh * inv_std
        return gx, _lead_sum(g * xhat), _lead_sum(g)

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# shape and reduction


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Mean-pool over ``axis`` (int or tuple)."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shapes {[t.shape for t in ts]} mismatch off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


OPS = {
    "add": add, "sub": sub, "mul": mul, "relu": relu, "softplus": softplus,
    "matmul": matmul, "linear": linear, "conv_time": conv_time,
    "max_pool_time": max_pool_time, "softmax": softmax, "log_softmax": log_softmax,
    "layer_norm": layer_norm, "batch_norm": batch_norm, "sum": sum_, "mean": mean,
    "reshape": reshape, "transpose": transpose, "getitem": getitem, "concat": concat,
}


def op_forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch an op by name; mirrors calling the function directly."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind in ("concat",):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# finite-difference checking


def _scalar(out) -> float:
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise ValueError(f"grad_check: function must return a scalar, got shape {val.shape}")
    val = float(val.reshape(-1)[0])
    if not np.isfinite(val):
        raise FloatingPointError("grad_check: function returned a non-finite value")
    return val


def grad_check(f: Callable, x: Tensor | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives the tensor(s) in ``x`` and must return a scalar.  The
    error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*xs)
    _scalar(out)
    tape.backward(out)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("grad_check: analytic gradient is not finite")
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(*xs))
            flat[i] = orig - eps
            fm = _scalar(f(*xs))
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
