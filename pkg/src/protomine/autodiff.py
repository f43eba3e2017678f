"""Dense float tensors with tape-based reverse-mode differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer.
Differentiable operations are plain functions: they compute the forward
value eagerly and, while a :class:`Tape` is active and at least one
input tracks gradients, push a backward rule onto that tape.  Calling
:func:`backward` on a scalar loss replays the recorded rules in reverse
order and accumulates gradients into every tracked leaf.

Conventions kept throughout the package:

* precision is per tensor (float32 or float64); training runs at
  float32 while gradient verification re-runs the same graph at float64,
* every forward result is checked for NaN/Inf and surfaces a
  :class:`NonFiniteError` instead of propagating silently,
* hard masking uses a finite sentinel (:func:`mask_value`) rather than
  IEEE ``-inf`` so masked additions keep all values finite; softmax
  treats anything at or below :func:`mask_threshold` as removed and
  gives it exactly zero weight.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import AllMaskedError, ConfigError, GraphError, NonFiniteError, ShapeError

_FLOAT_NAMES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    """Map a precision name (or numpy dtype) to a supported float dtype."""
    if isinstance(precision, str):
        if precision not in _FLOAT_NAMES:
            raise ConfigError(f"unsupported precision {precision!r}; use float32 or float64")
        return np.dtype(_FLOAT_NAMES[precision])
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def mask_value(dtype) -> float:
    """Additive hard-mask sentinel: the most negative finite value of ``dtype``.

    Finite on purpose: adding it to a score can never produce an IEEE
    infinity, so the post-op finite check stays meaningful.  softmax()
    recognises anything at or below :func:`mask_threshold` as hard-masked.
    """
    return float(-np.finfo(np.dtype(dtype)).max)


def mask_threshold(dtype) -> float:
    return mask_value(dtype) / 2.0


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_TAPES = _TapeStack()


class Tape:
    """Ordered record of one forward pass, consumed by a single backward().

    Use as a context manager around the forward computation.  A tape is
    single-owner: record one pass, run backward once, then discard it.
    Independent episodes may run on independent tapes (one per thread).
    """

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self, "tape contexts must nest"
        return False

    def __len__(self) -> int:
        return len(self._entries)


def active_tape() -> Tape | None:
    return _TAPES.stack[-1] if _TAPES.stack else None


class Tensor:
    """Dense float array with optional gradient tracking.

    Treat the value as immutable once created; optimizer updates rebind
    ``data`` on leaf parameters between passes instead of mutating it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking, no tape entry."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; the functions below do the actual work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in output of {op}")


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    if tape._consumed:
        raise GraphError("tape already consumed by backward(); record a fresh pass on a new tape")
    out.requires_grad = True
    out._tape = tape
    tape._entries.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients land in ``.grad`` of every requires_grad tensor reachable
    from the loss.  The tape that recorded the pass is cleared and marked
    consumed; a second backward() without re-recording raises GraphError.
    A constant loss (nothing recorded) is a no-op: all gradients stay zero.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return
    if tape._consumed:
        raise GraphError("tape already consumed by backward(); record a fresh pass on a new tape")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._entries):
        if out.grad is None:
            continue  # not on the path from this loss
        fn(out.grad)
        out.grad = None  # intermediates are not kept; leaves are never outputs
    tape._entries.clear()
    tape._consumed = True


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    out_data = a.data + b.data
    _check_finite(out_data, "add")
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    out_data = a.data - b.data
    _check_finite(out_data, "sub")
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    out_data = a.data * b.data
    _check_finite(out_data, "mul")
    out = Tensor(out_data)

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float64))
    b = _lift(b, a.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    _check_finite(out_data, "div")
    out = Tensor(out_data)

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _record(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward_fn(g):
        _accum(a, -g)

    return _record(out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def backward_fn(g):
        _accum(a, g * (a.data > 0))

    return _record(out, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    _check_finite(out_data, "sigmoid")
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _record(out, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    _check_finite(out_data, "log")
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, g / a.data)

    return _record(out, (a,), backward_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    out = Tensor(np.clip(a.data, lo, hi))

    def backward_fn(g):
        _accum(a, g * ((a.data > lo) & (a.data < hi)))

    return _record(out, (a,), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out = Tensor(a.data.T)

    def backward_fn(g):
        _accum(a, g.T)

    return _record(out, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def backward_fn(g):
        _accum(a, g.reshape(in_shape))

    return _record(out, (a,), backward_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}: {e}") from None
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _record(out, (a,), backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    axis = axis % a.data.ndim
    if start < 0 or length < 1 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of bounds for axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accum(a, full)

    return _record(out, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].data.ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward_fn(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + s)
            _accum(t, g[tuple(index)])
            offset += s

    return _record(out, tuple(tensors), backward_fn)


def _norm_axis(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)
    _check_finite(out_data, "sum")
    out = Tensor(out_data)
    in_shape = a.data.shape

    def backward_fn(g):
        if axes is None:
            _accum(a, np.broadcast_to(g, in_shape))
            return
        gk = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gk, in_shape))

    return _record(out, (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    _check_finite(out_data, "mean")
    out = Tensor(out_data)
    in_shape = a.data.shape
    if axes is None:
        n = a.data.size
    else:
        n = int(np.prod([in_shape[i] for i in axes]))

    def backward_fn(g):
        if axes is None:
            _accum(a, np.broadcast_to(g / n, in_shape))
            return
        gk = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gk / n, in_shape))

    return _record(out, (a,), backward_fn)


# sum() shadows the builtin inside this module; export both names
sum = tensor_sum  # noqa: A001


# ---------------------------------------------------------------------------
# linear algebra, softmax, normalization
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")
    out = Tensor(out_data)

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(out, (a, b), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax with hard-mask semantics.

    Entries at or below :func:`mask_threshold` are treated as removed:
    they get exactly zero weight and the remaining entries renormalize.
    A slice with every entry masked raises :class:`AllMaskedError`.
    """
    ax = a.data.ndim - 1 if axis == -1 else axis % a.data.ndim
    arr = a.data
    thr = mask_threshold(arr.dtype)
    masked = arr <= thr
    if masked.any():
        if not np.logical_not(masked).any(axis=ax).all():
            raise AllMaskedError("softmax: a slice is entirely hard-masked")
        shifted = np.where(masked, -np.inf, arr)
    else:
        shifted = arr
    mx = shifted.max(axis=ax, keepdims=True)
    e = np.exp(shifted - mx)
    s = e / e.sum(axis=ax, keepdims=True)
    _check_finite(s, "softmax")
    out = Tensor(s)

    def backward_fn(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        _accum(a, s * (g - dot))

    return _record(out, (a,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the channel axis of an [N, C] tensor."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"layer_norm expects [N, C], got {x.shape}")
    if gamma.data.shape != (xd.shape[1],) or beta.data.shape != (xd.shape[1],):
        raise ShapeError("layer_norm gain/bias must be [C]")
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    _check_finite(out_data, "layer_norm")
    out = Tensor(out_data)

    def backward_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# 2-d image ops (single image, channels-first [C, H, W])
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padding cross-correlation. x [Cin,H,W], kernel [Cout,Cin,k,k], k in {1,3}."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C, H, W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout, Cin, k, k], got {kernel.shape}")
    cout, cin_k, k, k2 = kernel.data.shape
    if k != k2 or k not in (1, 3):
        raise ConfigError(f"unsupported conv kernel {k}x{k2}; only 1x1 and 3x3")
    cin, h, w = x.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d channels mismatch: input {cin}, kernel {cin_k}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.shape}")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    acc = np.zeros((cout, h * w), dtype=np.result_type(x.data, kernel.data))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di:di + h, dj:dj + w].reshape(cin, h * w)
            acc += kernel.data[:, :, di, dj] @ patch
    out_data = (acc + bias.data[:, None]).reshape(cout, h, w)
    _check_finite(out_data, "conv2d")
    out = Tensor(out_data)

    def backward_fn(g):
        gm = g.reshape(cout, h * w)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2)))
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for di in range(k):
                for dj in range(k):
                    patch = xp[:, di:di + h, dj:dj + w].reshape(cin, h * w)
                    dk[:, :, di, dj] = gm @ patch.T
            _accum(kernel, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di:di + h, dj:dj + w] += (kernel.data[:, :, di, dj].T @ gm).reshape(cin, h, w)
            _accum(x, dxp[:, p:p + h, p:p + w] if p else dxp)

    return _record(out, (x, kernel, bias), backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2 input must be [C, H, W], got {x.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out_data = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    return _record(out, (x,), backward_fn)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling of a [C, H, W] map."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2 input must be [C, H, W], got {x.shape}")
    c, h, w = x.data.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

    def backward_fn(g):
        _accum(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _record(out, (x,), backward_fn)
