"""Dense tensors with reverse-mode automatic differentiation.

A small Wengert-tape engine over numpy arrays. Operations record onto the
innermost active :class:`Tape`; ``tape.backward(loss)`` replays the records
in exact reverse order and deposits accumulated gradients on every
``requires_grad`` leaf. There is no implicit broadcasting: binary ops demand
identical shapes, except that either side may be a scalar (0-d) tensor.

Training runs in float32; gradient checking switches the whole stack to
float64 via :func:`float64_mode`.
"""

from __future__ import annotations

import contextlib
import itertools
import numbers

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NonFinite",
    "NonScalarLoss",
    "TapeConsumed",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "tsum",
    "tmean",
    "tmax",
    "reshape",
    "transpose",
    "pad2d",
    "nearest_upsample2d",
    "concat",
    "slice_axis",
    "grad_check",
    "set_default_dtype",
    "get_default_dtype",
    "float64_mode",
    "set_debug_checks",
    "set_sum_mode",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform (offending dims in the message)."""


class NonFinite(FloatingPointError):
    """NaN or Inf encountered (at construction, or in results under debug checks)."""


class NonScalarLoss(ValueError):
    """backward() called on a tensor that is not a scalar."""


class TapeConsumed(RuntimeError):
    """backward() called twice on the same tape."""


_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = False
_SUM_MODE = "sequential"  # or "pairwise"
_IDS = itertools.count()
_TAPES: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def float64_mode():
    """Temporarily switch newly created tensors to float64 (for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection on every op result (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def set_sum_mode(mode: str) -> None:
    """Reduction accumulation order: "sequential" (row-major, default) or "pairwise"."""
    global _SUM_MODE
    if mode not in ("sequential", "pairwise"):
        raise ValueError(f"unknown sum mode {mode!r}")
    _SUM_MODE = mode


def _reduce_sum(a: np.ndarray, axis=None) -> np.ndarray:
    if _SUM_MODE == "pairwise":
        return np.asarray(a.sum(axis=axis))
    if axis is None:
        flat = a.reshape(-1)
        if flat.size == 0:
            return np.asarray(a.dtype.type(0))
        return np.asarray(np.cumsum(flat)[-1])
    c = np.cumsum(a, axis=axis)
    idx = [slice(None)] * a.ndim
    idx[axis] = -1
    return np.asarray(c[tuple(idx)])


class Tensor:
    """Immutable dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_nid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFinite("tensor constructed from non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._nid = next(_IDS)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = object.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out._nid = next(_IDS)
        return out

    # -- introspection ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def to_numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def max(self, axis=None):
        return tmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def slice_axis(self, axis, start, stop):
        return slice_axis(self, axis, start, stop)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, numbers.Number):
        return Tensor._wrap(np.asarray(x, dtype=like.data.dtype), requires_grad=False)
    raise TypeError(f"cannot lift {type(x).__name__} to Tensor")


class Tape:
    """Ordered record of primitive ops; replays backward in reverse order."""

    def __init__(self):
        self._records: list[tuple[int, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tape context nesting violated"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf's .grad."""
        if self._consumed:
            raise TapeConsumed("tape already consumed by a previous backward()")
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise NonScalarLoss(f"loss must be a scalar tensor, got shape {shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {
            loss._nid: np.ones_like(loss.data)
        }
        for out_nid, inputs, backward_fn in reversed(self._records):
            g = grads.pop(out_nid, None)
            if g is None:
                continue
            for tin, gin in zip(inputs, backward_fn(g)):
                if gin is None or not tin.requires_grad:
                    continue
                prev = grads.get(tin._nid)
                grads[tin._nid] = gin if prev is None else prev + gin
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFinite("non-finite values in op result")
    out = Tensor._wrap(np.asarray(data), requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None and not tape._consumed:
        tape._records.append((out._nid, inputs, backward_fn))
        tape._produced.add(out._nid)
        for t in inputs:
            if t.requires_grad and t._nid not in tape._produced:
                tape._leaves.setdefault(t._nid, t)
    return out


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} vs {b.shape}")


def _to_scalar_grad(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum())


# -- elementwise binary -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)

    def backward(g):
        ga = _to_scalar_grad(g) if a.ndim == 0 and g.ndim != 0 else g
        gb = _to_scalar_grad(g) if b.ndim == 0 and g.ndim != 0 else g
        return ga, gb

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)

    def backward(g):
        ga = _to_scalar_grad(g) if a.ndim == 0 and g.ndim != 0 else g
        gb = -g
        if b.ndim == 0 and g.ndim != 0:
            gb = _to_scalar_grad(gb)
        return ga, gb

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.ndim == 0 and ga.ndim != 0:
            ga = _to_scalar_grad(ga)
        if b.ndim == 0 and gb.ndim != 0:
            gb = _to_scalar_grad(gb)
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("div", a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        if a.ndim == 0 and ga.ndim != 0:
            ga = _to_scalar_grad(ga)
        if b.ndim == 0 and gb.ndim != 0:
            gb = _to_scalar_grad(gb)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


# -- matmul / conv ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape[1]} vs {b.shape[0]}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def _row_windows(pt: np.ndarray, i: int, oh: int, ow: int, kw: int, stride: int) -> np.ndarray:
    """(N*OH*OW, kw*C) windows for kernel row i, as a view of channels-last `pt`.

    Within one image row the kw*C window entries are contiguous in memory, so
    this is a pure stride trick; matmul consumes it without an explicit copy
    pass of our own.
    """
    n, _, wp, c = pt.shape
    band = pt[:, i : i + stride * oh : stride, :, :]  # (N, OH, Wp, C)
    flat = band.reshape(n, oh, wp * c)
    win = np.lib.stride_tricks.sliding_window_view(flat, kw * c, axis=2)
    win = win[:, :, :: stride * c, :]  # one window per output column
    assert win.shape[2] == ow
    return win.reshape(n * oh * ow, kw * c)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) with kernel (O, C, kh, kw).

    Computed row-by-row: for each of the kh kernel rows one GEMM contracts
    over kw*C, on strided window views of a channels-last copy of the padded
    input. The backward pass uses the same scheme (full correlation with
    flipped kernels for the input gradient).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d: x {x.shape} and weight {weight.shape} must be 4-D")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeMismatch(f"conv2d: input channels {c} vs kernel channels {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input")

    padded = (
        np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    )
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    pt = np.ascontiguousarray(padded.transpose(0, 2, 3, 1))
    # row i of the kernel as (kw*C, O), window layout j-major/c-minor
    wrows = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh, kw * c, o)
    acc = np.zeros((n * oh * ow, o), dtype=pt.dtype)
    for i in range(kh):
        acc += _row_windows(pt, i, oh, ow, kw, stride) @ wrows[i]
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(acc.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, OH, OW, O)
        gflat = gt.reshape(n * oh * ow, o)
        gx = None
        if x.requires_grad:
            hp, wp = h + 2 * pad, w + 2 * pad
            if stride == 1:
                gpad = np.pad(gt, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                # full correlation with kernels flipped in both spatial dims
                wflip = np.ascontiguousarray(
                    weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
                ).reshape(kh, kw * o, c)
                dacc = np.zeros((n * hp * wp, c), dtype=gt.dtype)
                for i in range(kh):
                    dacc += _row_windows(gpad, i, hp, wp, kw, 1) @ wflip[i]
                full = dacc.reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            else:
                buf = np.zeros((n, hp, wp, c), dtype=gt.dtype)
                wtaps = weight.data.transpose(2, 3, 1, 0)  # (kh, kw, C, O)
                for i in range(kh):
                    for j in range(kw):
                        view = buf[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
                        view += (gflat @ wtaps[i, j].T).reshape(n, oh, ow, c)
                full = buf.transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(
                full[:, :, pad : pad + h, pad : pad + w] if pad else full
            )
        gw = None
        if weight.requires_grad:
            gw = np.empty((kh, kw * c, o), dtype=gt.dtype)
            for i in range(kh):
                gw[i] = _row_windows(pt, i, oh, ow, kw, stride).T @ gflat
            gw = np.ascontiguousarray(
                gw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
            )
        if bias is None:
            return gx, gw
        gb = gflat.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, inputs, backward)


# -- elementwise unary --------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return _make(np.maximum(x.data, 0), (x,), backward)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    def backward(g):
        return (g * np.where(x.data > 0, 1.0, alpha).astype(g.dtype),)

    return _make(np.where(x.data > 0, x.data, alpha * x.data), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (x,), backward)


# -- reductions ---------------------------------------------------------------


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatch(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:

        def backward(g):
            return (np.broadcast_to(g, x.shape).astype(g.dtype, copy=True),)

        return _make(_reduce_sum(x.data), (x,), backward)

    ax = _normalize_axis(axis, x.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(_reduce_sum(x.data, ax), (x,), backward)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_normalize_axis(axis, x.ndim)]
    if n == 0:
        raise ShapeMismatch("mean over empty axis")
    s = tsum(x, axis)
    return mul(s, _lift(1.0 / n, s))


def tmax(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        flat_idx = int(np.argmax(x.data))

        def backward(g):
            gx = np.zeros_like(x.data)
            gx.reshape(-1)[flat_idx] = g
            return (gx,)

        return _make(np.asarray(x.data.max()), (x,), backward)

    ax = _normalize_axis(axis, x.ndim)
    idx = np.argmax(x.data, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (gx,)

    return _make(x.data.max(axis=ax), (x,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    target = int(np.prod(shape)) if shape else 1
    if target != x.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for ndim {x.ndim}")
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by `pad` on every side."""
    if x.ndim < 2:
        raise ShapeMismatch(f"pad2d: needs >= 2 dims, got {x.shape}")
    if pad < 0:
        raise ValueError("pad2d: negative pad")
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]

    def backward(g):
        if pad == 0:
            return (g,)
        sl = [slice(None)] * (x.ndim - 2) + [slice(pad, -pad), slice(pad, -pad)]
        return (np.ascontiguousarray(g[tuple(sl)]),)

    return _make(np.pad(x.data, width), (x,), backward)


def nearest_upsample2d(x: Tensor, factor: int) -> Tensor:
    """Repeat each pixel `factor` times along the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatch(f"nearest_upsample2d: needs >= 2 dims, got {x.shape}")
    if factor < 1:
        raise ValueError("nearest_upsample2d: factor must be >= 1")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2], x.shape[-1]

    def backward(g):
        lead = g.shape[:-2]
        g6 = g.reshape(*lead, h, factor, w, factor)
        return (g6.sum(axis=(-3, -1)),)

    return _make(out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat: empty input")
    ax = _normalize_axis(axis, tensors[0].ndim)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != ax and other[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat: {tensors[0].shape} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _normalize_axis(axis, x.ndim)
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice: [{start}:{stop}] invalid for axis {ax} of size {n}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), backward)


# -- gradient checking --------------------------------------------------------


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor; `x` must be float64 with
    requires_grad set. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor (use float64_mode())")
    if not x.requires_grad:
        raise ValueError("grad_check requires x.requires_grad")
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = x.grad.reshape(-1).copy()

    base = x.data.copy()
    numeric = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(base, dtype=np.float64)).data)
        flat[i] = orig - step
        lo = float(f(Tensor(base, dtype=np.float64)).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
