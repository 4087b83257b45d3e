"""Dense tensors with a closed primitive set and tape-based reverse mode.

Every primitive carries a hand-derived backward rule. A ``GradTape`` used as a
context manager records the primitives applied to tensors that require
gradients; ``GradTape.backward`` replays the records in reverse.

Image-like tensors are channels-last (NHWC). Spiking networks fold the SNN
time axis into the batch axis time-major, i.e. ``(S * B, H, W, C)``, so each
time step is a contiguous block.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()

PRIMITIVES = (
    "conv2d",
    "linear",
    "avgpool2x2",
    "upsample2x",
    "add",
    "mul",
    "scale",
    "concat",
    "split",
    "broadcast",
    "reshape",
    "mean",
    "spike",
    "tdbn",
    "relu",
)


class ShapeError(ValueError):
    """Raised when the inputs of a primitive violate its shape rule."""


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    old = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = old


class Tensor:
    """An immutable n-d array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or default_dtype()), requires_grad, name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients(dict):
    """Gradient map keyed by tensor identity.

    Looking up a tensor that never reached the loss returns zeros of its shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        super().__init__(grads)
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        key = id(t)
        if dict.__contains__(self, key):
            return dict.__getitem__(self, key)
        return np.zeros(t.shape, dtype=t.dtype)

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))


@dataclass
class GradTape:
    """Ordered record of primitives applied while the tape is active."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def append(self, record: _Record) -> None:
        self.records.append(record)

    def backward(self, loss: Tensor) -> Gradients:
        return backward(self, loss)


def _tape_stack() -> list[GradTape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (inference)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.append(_Record(op, inputs, result, bwd))
    return result


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        if rec.output is not loss:
            del grads[id(rec.output)]  # intermediates are not reported; free early
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = inp
    return Gradients(grads, tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# convolution helpers (NHWC activations, OIHW kernels)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, hp, wp, c = shape
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
    return out


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """OIHW -> (kh*kw*I, O) matching the im2col column order."""
    o = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, o)


def _shift_conv(xp: np.ndarray, wk: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """Stride-1 correlation on the padded grid.

    Each kernel tap is one batched matmul over a shifted view of the flattened
    padded image; rows that straddle the right border land in columns >= wo
    and are cropped afterwards.
    """
    n, hp, wp, c = xp.shape
    kh, kw, _, o = wk.shape
    flat = xp.reshape(n, hp * wp, c)
    span = (ho - 1) * wp + wo
    acc = np.zeros((n, ho * wp, o), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc[:, :span] += flat[:, off : off + span, :] @ wk[i, j]
    return acc.reshape(n, ho, wp, o)[:, :, :wo, :]


def _shift_conv_backward(g: np.ndarray, xp: np.ndarray, wk: np.ndarray, need_x: bool, need_w: bool):
    n, hp, wp, c = xp.shape
    kh, kw, _, o = wk.shape
    ho, wo = g.shape[1:3]
    span = (ho - 1) * wp + wo
    gp = np.zeros((n, ho, wp, o), dtype=g.dtype)
    gp[:, :, :wo, :] = g
    gflat = gp.reshape(n, ho * wp, o)[:, :span]
    flat = xp.reshape(n, hp * wp, c)
    gw = np.empty((kh, kw, c, o), dtype=g.dtype) if need_w else None
    dflat = np.zeros((n, hp * wp, c), dtype=g.dtype) if need_x else None
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            if need_w:
                gw[i, j] = np.matmul(flat[:, off : off + span, :].transpose(0, 2, 1), gflat).sum(axis=0)
            if need_x:
                dflat[:, off : off + span] += gflat @ wk[i, j].T
    gw = None if gw is None else gw.transpose(3, 2, 0, 1)
    gxp = None if dflat is None else dflat.reshape(n, hp, wp, c)
    return gxp, gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of an NHWC input with an OIHW kernel, optional per-channel bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci} (kernel {w.shape})")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho, wo = _conv_out_size(h, kh, stride, padding), _conv_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {padding})")
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    xp = _pad_hw(x.data, padding)
    cols = None
    if pointwise:
        out = (x.data.reshape(-1, c) @ _kernel_matrix(w.data)).reshape(n, ho, wo, o)
    elif stride == 1:
        wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
        out = _shift_conv(xp, wk, ho, wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = (cols @ _kernel_matrix(w.data)).reshape(n, ho, wo, o)
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = gw = gb = None
        if pointwise:
            g2 = g.reshape(-1, o)
            if w.requires_grad:
                gw = (x.data.reshape(-1, c).T @ g2).T.reshape(o, c, 1, 1)
            if x.requires_grad:
                gx = (g2 @ w.data[:, :, 0, 0]).reshape(x.shape)
        elif stride == 1:
            gxp, gw = _shift_conv_backward(g, xp, wk, x.requires_grad, w.requires_grad)
            if gxp is not None:
                gx = gxp[:, padding : padding + h, padding : padding + wd, :]
        else:
            g2 = g.reshape(-1, o)
            wmat = _kernel_matrix(w.data)
            if w.requires_grad:
                gw = (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
            if x.requires_grad:
                full = _col2im(g2 @ wmat.T, xp.shape, kh, kw, stride, ho, wo)
                gx = full[:, padding : padding + h, padding : padding + wd, :]
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, o).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit("conv2d", inputs, np.ascontiguousarray(out), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` has shape (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit("linear", inputs, out, bwd)


def avgpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"avgpool2x2: need NHWC input with even H, W; got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.asarray(0.25, dtype=g.dtype),)

    return _emit("avgpool2x2", (x,), out, bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: need NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _emit("upsample2x", (x,), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), out, bwd)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array); the constant is not differentiated."""
    c = np.asarray(c, dtype=x.dtype)
    try:
        out = x.data * c
    except ValueError:
        raise ShapeError(f"scale: constant shape {c.shape} does not broadcast with {x.shape}") from None
    if out.shape != x.shape:
        raise ShapeError(f"scale: constant shape {c.shape} would change shape {x.shape}")

    def bwd(g):
        return (g * c,)

    return _emit("scale", (x,), out, bwd)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", xs, out, bwd)


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into equal sections; the adjoint of ``concat``."""
    if x.shape[axis] % sections:
        raise ShapeError(f"split: axis {axis} of {x.shape} not divisible by {sections}")
    parts = np.split(x.data, sections, axis=axis)
    outs = []
    for i, p in enumerate(parts):

        def bwd(g, i=i):
            full = np.zeros(x.shape, dtype=g.dtype)
            np.split(full, sections, axis=axis)[i][...] = g
            return (full,)

        outs.append(_emit("split", (x,), np.ascontiguousarray(p), bwd))
    return outs


def broadcast(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape)))
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def bwd(g):
        return (_unbroadcast(g, x.shape),)

    return _emit("broadcast", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, bwd)


def mean(x: Tensor, axis: int | Iterable[int] | None = None) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when None)."""
    if axis is not None and not isinstance(axis, int):
        axis = tuple(axis)
    out = np.asarray(x.data.mean(axis=axis))
    count = x.data.size // max(out.size, 1)

    def bwd(g):
        if axis is None:
            gg = g
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            gg = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(gg, x.shape) * np.asarray(1.0 / count, dtype=g.dtype),)

    return _emit("mean", (x,), out, bwd)


def surrogate_derivative(u: np.ndarray, v_threshold: float, width: float) -> np.ndarray:
    """Triangular pseudo-derivative ``max(1 - |u - v_th| / a, 0)``."""
    return np.maximum(1.0 - np.abs(u - v_threshold) / width, 0.0).astype(u.dtype, copy=False)


def spike(u: Tensor, v_threshold: float = 1.0, width: float = 1.0) -> Tensor:
    """Heaviside firing ``u >= v_th``; backward uses the triangular surrogate."""
    out = (u.data >= v_threshold).astype(u.dtype)

    def bwd(g):
        return (g * surrogate_derivative(u.data, v_threshold, width),)

    return _emit("spike", (u,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _emit("relu", (x,), out, bwd)


@dataclass
class NormStats:
    """Running statistics of one tdBN layer (the module's only mutable state)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "NormStats":
        dt = default_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt), momentum)


def tdbn(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: NormStats | None,
    v_threshold: float = 1.0,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Threshold-dependent batch norm over every axis except the trailing channel axis.

    ``y = gamma * v_th * (x - mu) / sqrt(var + eps) + beta``. In training mode the
    batch moments are used and ``stats`` (if given) is updated in place.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"tdbn: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    if x.data.size == 0:
        raise ShapeError("tdbn: zero-size batch")
    axes = tuple(range(x.ndim - 1))
    bshape = (1,) * (x.ndim - 1) + (-1,)
    dt = x.dtype
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats is not None:
            m = x.data.size // x.shape[-1]
            unbiased = var * (m / max(m - 1, 1))
            stats.mean[...] = (1 - stats.momentum) * stats.mean + stats.momentum * mu
            stats.var[...] = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    else:
        if stats is None:
            raise ValueError("tdbn: eval mode needs running statistics")
        mu, var = stats.mean.astype(dt), stats.var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    k = (gamma.data * v_threshold).reshape(bshape)
    out = k * xhat + beta.data.reshape(bshape)

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * k
            if training:
                gx = inv.reshape(bshape) * (
                    gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gh * inv.reshape(bshape)
        gg = (g * xhat).sum(axis=axes) * v_threshold if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _emit("tdbn", (x, gamma, beta), out.astype(dt, copy=False), bwd)
