"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Tensors wrap contiguous numpy arrays in single or double precision.  Primitive
operations record themselves on the innermost active :class:`Tape`; calling
``tape.backward(scalar)`` replays the recorded operations once, in reverse
order, and returns gradients keyed by tensor.  Broadcasting is deliberately
restricted to scalar-with-tensor; the only structured shape change is the
explicit :func:`expand` primitive.

By default every primitive raises :class:`NonFiniteError` as soon as it
produces a non-finite value ("strict" mode).  Inside a ``with permissive():``
block non-finite values propagate instead, which is what lets the numerical
breakdown of badly conditioned formulas be observed and counted rather than
aborted.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

PRECISIONS = {"single": np.float32, "double": np.float64}
_DTYPE_TO_PRECISION = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}


class NonFiniteError(FloatingPointError):
    """An operation produced inf or nan while strict mode was active."""


_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _permissive_depth() -> int:
    return getattr(_state, "permissive", 0)


class permissive:
    """Context manager that lets non-finite values propagate instead of raising."""

    def __enter__(self):
        _state.permissive = _permissive_depth() + 1
        return self

    def __exit__(self, *exc):
        _state.permissive = _permissive_depth() - 1
        return False


def strict_mode_active() -> bool:
    return _permissive_depth() == 0


class Tensor:
    """N-dimensional real array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, precision: str | None = None, requires_grad: bool = False):
        if precision is not None:
            dtype = PRECISIONS[precision]
        else:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _DTYPE_TO_PRECISION else np.float64
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return _DTYPE_TO_PRECISION[self.data.dtype]

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data, precision=precision, requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are python numbers or size-1 tensors
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
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of primitive operations for one backward replay.

    Execution order is a topological order, so walking the records in reverse
    visits every operation after all of its consumers.  Gradients accumulate
    additively when a value feeds several operations.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))

    def intermediates(self):
        """Forward values of every recorded operation, in execution order."""
        for out, _, _ in self.records:
            yield out.data

    def nonfinite_value_count(self) -> int:
        return int(sum(np.size(v) - np.count_nonzero(np.isfinite(v)) for v in self.intermediates()))

    def backward(self, output: Tensor) -> dict:
        """Gradients of a scalar ``output`` with respect to every taped tensor.

        Returns a dict keyed by tensor identity; leaves that never influence
        the output are simply absent.  The tape itself is left intact, so the
        same tape may be replayed for several scalar outputs.
        """
        if output.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        by_id: dict[int, Tensor] = {id(output): output}
        with np.errstate(all="ignore"):
            for out, inputs, vjp in reversed(self.records):
                g = grads.get(id(out))
                if g is None:
                    continue
                for t, gt in zip(inputs, vjp(g)):
                    if not isinstance(t, Tensor) or not t.requires_grad or gt is None:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gt
                    else:
                        grads[key] = gt
                        by_id[key] = t
        return {by_id[k]: v for k, v in grads.items()}


def current_tape() -> Tape | None:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def _check_binary_shapes(op: str, a, b):
    for x in (a, b):
        if not isinstance(x, Tensor) and isinstance(x, np.ndarray) and x.size != 1:
            raise TypeError(f"{op}: raw arrays must be wrapped in Tensor")
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"{op}: mixed precisions {a.precision}/{b.precision}")
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _finish(op: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if strict_mode_active() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values in strict mode")
    requires = any(t.requires_grad for t in inputs if isinstance(t, Tensor))
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    tape = current_tape()
    if tape is not None and requires:
        tape.record(out, inputs, vjp)
    return out


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _scalar_grad(x, g):
    """Reduce a full-shape gradient onto a size-1 operand."""
    if isinstance(x, Tensor) and x.size == 1:
        return np.asarray(g, dtype=x.data.dtype).sum().reshape(x.shape)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    _check_binary_shapes("add", a, b)
    with np.errstate(all="ignore"):
        out = _val(a) + _val(b)

    def vjp(g):
        return (_scalar_grad(a, g), _scalar_grad(b, g))

    return _finish("add", np.asarray(out), (a, b), vjp)


def sub(a, b):
    _check_binary_shapes("sub", a, b)
    with np.errstate(all="ignore"):
        out = _val(a) - _val(b)

    def vjp(g):
        return (_scalar_grad(a, g), _scalar_grad(b, -g))

    return _finish("sub", np.asarray(out), (a, b), vjp)


def mul(a, b):
    _check_binary_shapes("mul", a, b)
    av, bv = _val(a), _val(b)
    with np.errstate(all="ignore"):
        out = av * bv

    def vjp(g):
        return (_scalar_grad(a, g * bv), _scalar_grad(b, g * av))

    return _finish("mul", np.asarray(out), (a, b), vjp)


def div(a, b):
    _check_binary_shapes("div", a, b)
    av, bv = _val(a), _val(b)
    with np.errstate(all="ignore"):
        out = av / bv

        def vjp(g):
            ga = g / bv
            gb = -g * av / (bv * bv)
            return (_scalar_grad(a, ga), _scalar_grad(b, gb))

    return _finish("div", np.asarray(out), (a, b), vjp)


def neg(a):
    def vjp(g):
        return (-g,)

    return _finish("neg", np.asarray(-a.data), (a,), vjp)


def abs_(a):
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _finish("abs", np.abs(a.data), (a,), vjp)


def sqrt(a):
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(all="ignore"):
            return (g * 0.5 / out,)

    return _finish("sqrt", out, (a,), vjp)


def exp(a):
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _finish("exp", out, (a,), vjp)


def log(a):
    with np.errstate(all="ignore"):
        out = np.log(a.data)

        def vjp(g):
            return (g / a.data,)

    return _finish("log", out, (a,), vjp)


def sigmoid(a):
    out = expit(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (a,), vjp)


def relu(a):
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _finish("relu", np.maximum(a.data, 0), (a,), vjp)


def clip(a, lo: float, hi: float):
    """Clamp values to [lo, hi]; gradient passes only strictly inside the range."""
    mask = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * mask,)

    return _finish("clip", np.clip(a.data, lo, hi), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape primitives


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} invalid for {ndim}-d tensor")
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes {axes}")
    return axes


def sum_(a, axes=None):
    axes = _normalize_axes(axes, a.ndim)
    with np.errstate(all="ignore"):
        out = a.data.sum(axis=axes)

    def vjp(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, a.shape).astype(a.data.dtype, copy=False),)

    return _finish("sum", np.asarray(out), (a,), vjp)


def mean(a, axes=None):
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    with np.errstate(all="ignore"):
        out = a.data.mean(axis=axes)

    def vjp(g):
        ge = np.expand_dims(g, axes) if axes else g
        return ((np.broadcast_to(ge, a.shape) / count).astype(a.data.dtype, copy=False),)

    return _finish("mean", np.asarray(out), (a,), vjp)


def expand(a, axis: int, n: int):
    """Insert a new axis of length ``n`` by repetition; backward sums over it."""
    out = np.broadcast_to(np.expand_dims(a.data, axis), a.shape[:axis] + (n,) + a.shape[axis:])

    def vjp(g):
        return (g.sum(axis=axis),)

    return _finish("expand", np.ascontiguousarray(out), (a,), vjp)


def reshape(a, shape):
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _finish("reshape", a.data.reshape(shape), (a,), vjp)


def getitem(a, idx):
    out = np.array(a.data[idx], copy=True)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _finish("getitem", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear-algebra / network primitives


def linear(x, w, b=None):
    """Affine map ``x @ w + b`` for ``x`` of shape (N, F), ``w`` (F, M), ``b`` (M,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("linear", out, inputs, vjp)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-d cross-correlation.

    ``x`` is CHW or NCHW, ``w`` is OIHW, ``b`` optional (O,).  Zero padding,
    integer stride.  Differentiable with respect to input, kernels and bias.
    """
    squeeze = x.ndim == 3
    xv = x.data[None] if squeeze else x.data
    if xv.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected NCHW input and OIHW kernels, got {x.shape}, {w.shape}")
    n, c, h, wd = xv.shape
    o, c_in, kh, kw = w.shape
    if c != c_in:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {c_in}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    oh, ow = out.shape[2], out.shape[3]

    def vjp(g):
        g = g[None] if squeeze else g
        gw = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if squeeze:
            gx = gx[0]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    out = np.ascontiguousarray(out[0] if squeeze else out)
    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv2d", out, inputs, vjp)


def avg_pool2d(x, k: int = 2):
    """Non-overlapping k-by-k average pooling over the trailing two axes."""
    squeeze = x.ndim == 3
    xv = x.data[None] if squeeze else x.data
    n, c, h, w = xv.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = xv.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        g = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx[0] if squeeze else gx,)

    out = np.ascontiguousarray(out[0] if squeeze else out)
    return _finish("avg_pool2d", out, (x,), vjp)


def log_softmax(x):
    """Row-wise log-softmax for (N, C) inputs, computed with the max-shift trick."""
    if x.ndim != 2:
        raise ValueError(f"log_softmax expects (N, C), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    with np.errstate(all="ignore"):
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _finish("log_softmax", out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference approximation of the gradient of a scalar function.

    ``f`` must be deterministic for fixed inputs; it receives a plain array
    and returns a float.  Used as the independent oracle for backward().
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# serialization: 16-byte header (magic, element size, rank, dims) + raw LE data

_MAGIC = b"TNSR"
_HEADER = struct.Struct("<4sBB5H")
_MAX_RANK = 5


def save_tensor(path, t) -> None:
    """Write a tensor as little-endian IEEE-754 values behind a 16-byte header."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.dtype not in _DTYPE_TO_PRECISION:
        data = data.astype(np.float64)
    if data.ndim > _MAX_RANK:
        raise ValueError(f"rank {data.ndim} exceeds serialization limit {_MAX_RANK}")
    if any(d >= 1 << 16 for d in data.shape):
        raise ValueError(f"dimension too large for header: {data.shape}")
    dims = list(data.shape) + [0] * (_MAX_RANK - data.ndim)
    header = _HEADER.pack(_MAGIC, data.dtype.itemsize, data.ndim, *dims)
    payload = np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes()
    if hasattr(path, "write"):
        path.write(header)
        path.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def load_tensor(path) -> Tensor:
    """Read a tensor written by :func:`save_tensor`; rejects bad magic or truncation."""

    def _load(fh):
        magic, itemsize, rank, *dims = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
        if magic != _MAGIC:
            raise ValueError(f"not a tensor file: bad magic {magic!r}")
        if itemsize not in (4, 8):
            raise ValueError(f"unsupported element size {itemsize}")
        if rank > _MAX_RANK:
            raise ValueError(f"unsupported rank {rank}")
        shape = tuple(dims[:rank])
        count = int(np.prod(shape)) if shape else 1
        raw = _read_exact(fh, count * itemsize, "data")
        tail = fh.read(1)
        if tail:
            raise ValueError("trailing bytes after tensor payload")
        dtype = np.dtype(f"<f{itemsize}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        return Tensor(arr.astype(np.dtype(f"=f{itemsize}")), requires_grad=False)

    if hasattr(path, "read"):
        return _load(path)
    with open(path, "rb") as fh:
        return _load(fh)


def load_tensor_blob(fh) -> Tensor:
    """Read one tensor from an open stream, leaving the stream positioned after it."""
    magic, itemsize, rank, *dims = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != _MAGIC:
        raise ValueError(f"not a tensor blob: bad magic {magic!r}")
    if itemsize not in (4, 8):
        raise ValueError(f"unsupported element size {itemsize}")
    if rank > _MAX_RANK:
        raise ValueError(f"unsupported rank {rank}")
    shape = tuple(dims[:rank])
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * itemsize, "data")
    arr = np.frombuffer(raw, dtype=np.dtype(f"<f{itemsize}")).reshape(shape)
    return Tensor(arr.astype(np.dtype(f"=f{itemsize}")), requires_grad=False)
