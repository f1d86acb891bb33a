"""Dense float32 tensors with recorded-tape reverse-mode differentiation.

Every value flowing through the segmentation network is a ``Tensor``: a
rank-1..4 row-major float32 array plus an optional gradient buffer. Ops
record their parents and a backward closure on the output; ``backward()``
replays the recording in reverse topological order. Implementations use a
fixed summation order so same-seed runs are bit-reproducible.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class GraphCycleError(TensorError):
    pass


# Every op output is scanned for NaN/Inf (module invariant). Flip off only
# for profiling; tests assume it is on.
FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, where: str) -> None:
    if FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """Rank-1..4 float32 array with an optional same-shape grad buffer."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Optional[Callable] = None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 4)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.parents = parents
        # backward(output_grad) -> list of per-parent grad arrays (None to skip)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, grad={self.grad is not None})"

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

    def __neg__(self):
        return neg(self)


def tensor(data) -> Tensor:
    """Wrap data as a constant (non-differentiable) tensor."""
    t = Tensor(data)
    _check_finite(t.data, "tensor()")
    return t


def parameter(data) -> Tensor:
    """Wrap data as a trainable tensor with a zeroed grad buffer."""
    t = Tensor(data, requires_grad=True)
    _check_finite(t.data, "parameter()")
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.parents != ()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(grad, dtype=np.float32)


def _op(out_data: np.ndarray, parents: Sequence[Tensor],
        backward: Callable, name: str) -> Tensor:
    _check_finite(out_data, name)
    parents = tuple(parents)
    if any(_needs_grad(p) for p in parents):
        return Tensor(out_data, parents=parents, backward=backward)
    return Tensor(out_data)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        return [_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None]

    return _op(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        return [_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None]

    return _op(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        return [_unbroadcast(g * b.data, a.shape) if na else None,
                _unbroadcast(g * a.data, b.shape) if nb else None]

    return _op(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if na else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if nb else None)
        return [ga, gb]

    return _op(out, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _op(-a.data, (a,), lambda g: [-g], "neg")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return [g / a.data]

    return _op(out, (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return [g * (0.5 / out)]

    return _op(out, (a,), bwd, "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float32)

    def bwd(g):
        return [g * inside]

    return _op(out, (a,), bwd, "clip")


# ---------------------------------------------------------------------------
# activations


def relu6(a: Tensor) -> Tensor:
    out = np.minimum(np.maximum(a.data, 0.0), 6.0)
    mask = ((a.data > 0.0) & (a.data < 6.0)).astype(np.float32)

    def bwd(g):
        return [g * mask]

    return _op(out, (a,), bwd, "relu6")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow-free exp
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)

    def bwd(g):
        return [g * out * (1.0 - out)]

    return _op(out, (a,), bwd, "sigmoid")


_ACTIVATIONS = {"relu6": relu6, "sigmoid": sigmoid}


def activation(x: Tensor, mode: str) -> Tensor:
    """Elementwise relu6 (min(max(x,0),6)) or sigmoid (1/(1+e^-x))."""
    try:
        fn = _ACTIVATIONS[mode]
    except KeyError:
        raise TensorError(f"unknown activation mode {mode!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, output stays float32)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([a.data.sum(dtype=np.float64)], dtype=np.float32)

    def bwd(g):
        return [np.full(a.shape, g.reshape(-1)[0], dtype=np.float32)]

    return _op(out, (a,), bwd, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array([a.data.sum(dtype=np.float64) / n], dtype=np.float32)

    def bwd(g):
        return [np.full(a.shape, g.reshape(-1)[0] / n, dtype=np.float32)]

    return _op(out, (a,), bwd, "mean_all")


def mean_channels(a: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,1,H,W) mean over the channel axis."""
    if a.data.ndim != 4:
        raise ShapeError("mean_channels expects a rank-4 tensor")
    c = a.shape[1]
    out = a.data.mean(axis=1, keepdims=True, dtype=np.float64).astype(np.float32)

    def bwd(g):
        return [np.broadcast_to(g / c, a.shape).astype(np.float32)]

    return _op(out, (a,), bwd, "mean_channels")


def max_channels(a: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,1,H,W) max over the channel axis (grad to first argmax)."""
    if a.data.ndim != 4:
        raise ShapeError("max_channels expects a rank-4 tensor")
    idx = np.argmax(a.data, axis=1)[:, None]
    out = np.take_along_axis(a.data, idx, axis=1)

    def bwd(g):
        gz = np.zeros(a.shape, dtype=np.float32)
        np.put_along_axis(gz, idx, g.astype(np.float32), axis=1)
        return [gz]

    return _op(out, (a,), bwd, "max_channels")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return [np.ascontiguousarray(g).reshape(a.shape)]

    return _op(out, (a,), bwd, "reshape")


def transpose2(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2 expects a rank-2 tensor")
    out = np.ascontiguousarray(a.data.T)

    def bwd(g):
        return [np.ascontiguousarray(g.T)]

    return _op(out, (a,), bwd, "transpose2")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-4 tensors along the channel axis, order preserved."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    first = xs[0]
    for x in xs:
        if x.data.ndim != 4:
            raise ShapeError("concat_channels expects rank-4 tensors")
        if x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels batch/spatial mismatch: {first.shape} vs {x.shape}")
    if len(xs) == 1:
        x = xs[0]
        return _op(x.data.copy(), (x,), lambda g: [g], "concat_channels")
    out = np.concatenate([x.data for x in xs], axis=1)
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def bwd(g):
        return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=1)]

    return _op(out, tuple(xs), bwd, "concat_channels")


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return [g @ b.data.T, a.data.T @ g]

    return _op(out, (a, b), bwd, "matmul")


def gram(f: Tensor) -> Tensor:
    """Batched FᵀF: (N,C,M) -> (N,M,M), per batch element."""
    if f.data.ndim != 3:
        raise ShapeError("gram expects a rank-3 (N,C,M) tensor")
    ft = f.data.transpose(0, 2, 1)
    out = np.matmul(ft, f.data)

    def bwd(g):
        return [np.matmul(f.data, g + g.transpose(0, 2, 1))]

    return _op(out, (f,), bwd, "gram")


# ---------------------------------------------------------------------------
# top-k along the channel axis


def _last_axis_keys(canon: np.ndarray) -> np.ndarray:
    """u64 ordering keys over the (contiguous) last axis: larger value =>
    larger key, equal values ranked lower-index-first. `canon` must be float32
    with -0.0 already canonicalized (x + 0.0)."""
    u = canon.view(np.uint32)
    # branchless monotone map: flip sign bit for positives, all bits for negatives
    mask = ((u >> np.uint32(31)) * np.uint32(0x7FFFFFFF)) | np.uint32(0x80000000)
    mono = (u ^ mask).astype(np.uint64)
    mono <<= np.uint64(32)
    c = canon.shape[-1]
    rev_idx = (np.uint64(0xFFFFFFFF) - np.arange(c, dtype=np.uint64))
    mono |= rev_idx
    return mono


def topk_last(arr: np.ndarray, k: int):
    """k largest along the last axis, descending, lower index wins ties.
    Returns (values, indices); `arr` must be float32 and C-contiguous."""
    c = arr.shape[-1]
    canon = arr + np.float32(0.0)
    keys = _last_axis_keys(canon)
    if k < c:
        part = np.argpartition(keys, c - k, axis=-1)[..., c - k:]
    else:
        part = np.broadcast_to(np.arange(c), arr.shape).copy()
    top_keys = np.take_along_axis(keys, part, axis=-1)
    order = np.flip(np.argsort(top_keys, axis=-1), axis=-1)
    idx = np.take_along_axis(part, order, axis=-1)
    return np.take_along_axis(canon, idx, axis=-1), idx


def topk_channels(x: Tensor, k: int) -> Tensor:
    """Per spatial site, the k largest channel values in descending order.

    Accepts (C,h,w) or batched (N,C,h,w); the channel axis shrinks to k.
    Equal values select the lower original channel index first.
    """
    nd = x.data.ndim
    if nd not in (3, 4):
        raise ShapeError("topk_channels expects a rank-3 or rank-4 tensor")
    axis = 0 if nd == 3 else 1
    c = x.shape[axis]
    if not 1 <= k <= c:
        raise ShapeError(f"k={k} out of range for {c} channels")
    moved = np.ascontiguousarray(np.moveaxis(x.data, axis, -1))
    vals, idx = topk_last(moved, k)
    out = np.ascontiguousarray(np.moveaxis(vals, -1, axis))

    def bwd(g):
        gz = np.zeros(moved.shape, dtype=np.float32)
        np.put_along_axis(gz, idx, np.moveaxis(g, axis, -1), axis=-1)
        return [np.ascontiguousarray(np.moveaxis(gz, -1, axis))]

    return _op(out, (x,), bwd, "topk_channels")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Kernel (out_ch, in_ch/groups, kh, kw) plus stride/padding/dilation/groups."""
    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError("conv kernel must be rank-4 (out, in/groups, kh, kw)")
        if self.kernel.shape[2] < 1 or self.kernel.shape[3] < 1:
            raise ShapeError("kernel spatial dims must be >= 1")
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ShapeError("stride/dilation/groups must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.bias is not None and self.bias.data.ndim != 1:
            raise ShapeError("conv bias must be rank-1")


class _ConvGeom:
    """Gather/scatter geometry for one (padded shape, kernel, stride, dilation)."""

    def __init__(self, hp, wp, kh, kw, stride, dilation):
        span_h = (kh - 1) * dilation + 1
        span_w = (kw - 1) * dilation + 1
        if hp < span_h or wp < span_w:
            raise ShapeError(
                f"input {hp}x{wp} too small for kernel span {span_h}x{span_w}")
        self.hp, self.wp = hp, wp
        self.kh, self.kw = kh, kw
        self.stride, self.dilation = stride, dilation
        self.ho = (hp - span_h) // stride + 1
        self.wo = (wp - span_w) // stride + 1


_GEOM_CACHE: "OrderedDict[tuple, _ConvGeom]" = OrderedDict()


def _geom(hp, wp, kh, kw, stride, dilation) -> _ConvGeom:
    key = (hp, wp, kh, kw, stride, dilation)
    g = _GEOM_CACHE.get(key)
    if g is None:
        g = _ConvGeom(*key)
        _GEOM_CACHE[key] = g
        while len(_GEOM_CACHE) > 32:
            _GEOM_CACHE.popitem(last=False)
    return g


def _tap_slice(geom: _ConvGeom, i: int, j: int):
    st, dil = geom.stride, geom.dilation
    return (slice(i * dil, i * dil + (geom.ho - 1) * st + 1, st),
            slice(j * dil, j * dil + (geom.wo - 1) * st + 1, st))


def _gather_cols(xp: np.ndarray, geom: _ConvGeom, groups: int) -> np.ndarray:
    """Padded (N,C,Hp,Wp) -> grouped column matrix (G, N*Ho*Wo, Cg*kh*kw)."""
    n, c = xp.shape[0], xp.shape[1]
    cg = c // groups
    view = sliding_window_view(
        xp, ((geom.kh - 1) * geom.dilation + 1, (geom.kw - 1) * geom.dilation + 1),
        axis=(2, 3))
    view = view[:, :, ::geom.stride, ::geom.stride, ::geom.dilation, ::geom.dilation]
    v6 = view.reshape(n, groups, cg, geom.ho, geom.wo, geom.kh, geom.kw)
    arranged = v6.transpose(1, 0, 3, 4, 2, 5, 6)
    return np.ascontiguousarray(arranged).reshape(
        groups, n * geom.ho * geom.wo, cg * geom.kh * geom.kw)


def _scatter_cols(dcols: np.ndarray, geom: _ConvGeom, n: int, c: int,
                  groups: int) -> np.ndarray:
    """Adjoint of _gather_cols: accumulate per-tap slices into the padded plane."""
    cg = c // groups
    d7 = dcols.reshape(groups, n, geom.ho, geom.wo, cg, geom.kh, geom.kw)
    d6 = d7.transpose(1, 0, 4, 2, 3, 5, 6).reshape(
        n, c, geom.ho, geom.wo, geom.kh, geom.kw)
    out = np.zeros((n, c, geom.hp, geom.wp), dtype=np.float32)
    for i in range(geom.kh):
        for j in range(geom.kw):
            rows, cols = _tap_slice(geom, i, j)
            out[:, :, rows, cols] += d6[:, :, :, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.ascontiguousarray(x[:, :, p:-p, p:-p])


def _conv2d_pointwise(x: Tensor, p: ConvParams, n, c, h, w, o):
    """1x1 stride-1 kernels: batched channel matmul, no column copies."""
    g_, cg = p.groups, c // p.groups
    og = o // p.groups
    x4 = x.data.reshape(n, g_, cg, h * w)
    w4 = p.kernel.data.reshape(g_, og, cg)
    out = np.matmul(w4[None], x4).reshape(n, o, h, w)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])

    def bwd(g):
        g4 = g.reshape(n, g_, og, h * w)
        dw = np.matmul(g4, x4.transpose(0, 1, 3, 2)).sum(axis=0)
        dx = np.matmul(w4.transpose(0, 2, 1)[None], g4).reshape(n, c, h, w)
        grads = [dx, dw.reshape(o, cg, 1, 1)]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        return grads

    return _op(out, parents, bwd, "conv2d")


def _conv2d_depthwise(x: Tensor, p: ConvParams, n, c, kh, kw):
    """groups == in_ch == out_ch: fused multiply-add over the kernel taps."""
    xp = _pad(x.data, p.padding)
    geom = _geom(xp.shape[2], xp.shape[3], kh, kw, p.stride, p.dilation)
    wd = p.kernel.data  # (C, 1, kh, kw)
    out = np.zeros((n, c, geom.ho, geom.wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            rows, cols = _tap_slice(geom, i, j)
            out += xp[:, :, rows, cols] * wd[None, :, 0, i, j, None, None]
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])

    def bwd(g):
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rows, cols = _tap_slice(geom, i, j)
                xs = xp[:, :, rows, cols]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", xs, g)
                dxp[:, :, rows, cols] += g * wd[None, :, 0, i, j, None, None]
        grads = [_crop(dxp, p.padding), dw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        return grads

    return _op(out, parents, bwd, "conv2d")


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Direct-summation 2D convolution (cross-correlation) with stride,
    zero padding, dilation and groups."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d expects a rank-4 (N,C,H,W) tensor")
    _check_finite(x.data, "conv2d input")
    n, c, h, w = x.shape
    o, cg, kh, kw = p.kernel.shape
    if c != cg * p.groups:
        raise ShapeError(
            f"conv2d channel mismatch: input {c}, kernel expects {cg * p.groups}")
    if o % p.groups:
        raise ShapeError("out_ch must be divisible by groups")
    if p.bias is not None and p.bias.shape[0] != o:
        raise ShapeError("bias length must equal out_ch")
    if (kh == 1 and kw == 1 and p.stride == 1 and p.padding == 0
            and p.dilation == 1):
        return _conv2d_pointwise(x, p, n, c, h, w, o)
    if p.groups == c and cg == 1 and o == c:
        return _conv2d_depthwise(x, p, n, c, kh, kw)

    xp = _pad(x.data, p.padding)
    geom = _geom(xp.shape[2], xp.shape[3], kh, kw, p.stride, p.dilation)
    cols = _gather_cols(xp, geom, p.groups)                    # (G, NHW, CgK)
    og = o // p.groups
    wmat = p.kernel.data.reshape(p.groups, og, cg * kh * kw).transpose(0, 2, 1)
    prod = np.matmul(cols, wmat)                               # (G, NHW, Og)
    out = prod.reshape(p.groups, n, geom.ho, geom.wo, og)
    out = np.ascontiguousarray(out.transpose(1, 0, 4, 2, 3)).reshape(
        n, o, geom.ho, geom.wo)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])

    def bwd(g):
        gg = np.ascontiguousarray(
            g.reshape(n, p.groups, og, geom.ho, geom.wo).transpose(1, 0, 3, 4, 2)
        ).reshape(p.groups, n * geom.ho * geom.wo, og)
        dw = np.matmul(cols.transpose(0, 2, 1), gg)            # (G, CgK, Og)
        dw = dw.transpose(0, 2, 1).reshape(o, cg, kh, kw).astype(np.float32)
        dcols = np.matmul(gg, wmat.transpose(0, 2, 1))         # (G, NHW, CgK)
        dxp = _scatter_cols(dcols, geom, n, c, p.groups)
        grads = [_crop(dxp, p.padding), dw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        return grads

    return _op(out, parents, bwd, "conv2d")


def conv_transpose2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution; exact adjoint (gradient) of conv2d with the
    same ConvParams. Input channels = kernel out_ch; output channels =
    kernel in_ch/groups * groups."""
    if x.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects a rank-4 tensor")
    _check_finite(x.data, "conv_transpose2d input")
    n, o, ho, wo = x.shape
    ko, cg, kh, kw = p.kernel.shape
    if o != ko:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {o}, kernel out_ch {ko}")
    c = cg * p.groups
    hout = (ho - 1) * p.stride - 2 * p.padding + p.dilation * (kh - 1) + 1
    wout = (wo - 1) * p.stride - 2 * p.padding + p.dilation * (kw - 1) + 1
    if hout < 1 or wout < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    if p.bias is not None and p.bias.shape[0] != c:
        raise ShapeError("bias length must equal output channels")
    hp, wp = hout + 2 * p.padding, wout + 2 * p.padding
    geom = _geom(hp, wp, kh, kw, p.stride, p.dilation)
    if (geom.ho, geom.wo) != (ho, wo):
        raise ShapeError("conv_transpose2d geometry mismatch")
    og = o // p.groups
    wmat = p.kernel.data.reshape(p.groups, og, cg * kh * kw)
    xg = np.ascontiguousarray(
        x.data.reshape(n, p.groups, og, ho, wo).transpose(1, 0, 3, 4, 2)
    ).reshape(p.groups, n * ho * wo, og)
    dcols = np.matmul(xg, wmat)                                # (G, NHW, CgK)
    yp = _scatter_cols(dcols, geom, n, c, p.groups)
    out = _crop(yp, p.padding)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]

    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])

    def bwd(g):
        gp = _pad(g, p.padding)
        cols = _gather_cols(gp, geom, p.groups)                # (G, NHW, CgK)
        dx = np.matmul(cols, wmat.transpose(0, 2, 1))          # (G, NHW, Og)
        dx = np.ascontiguousarray(
            dx.reshape(p.groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3)
        ).reshape(n, o, ho, wo)
        dw = np.matmul(xg.transpose(0, 2, 1), cols)            # (G, Og, CgK)
        dw = dw.reshape(o, cg, kh, kw).astype(np.float32)
        grads = [dx, dw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        return grads

    return _op(out, parents, bwd, "conv_transpose2d")


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(x: Tensor, mean: Tensor, var: Tensor, scale: Tensor,
              shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization with supplied statistics:
    (x - mean)/sqrt(var + eps) * scale + shift."""
    if x.data.ndim != 4:
        raise ShapeError("batchnorm expects a rank-4 tensor")
    c = x.shape[1]
    for name, t in (("mean", mean), ("var", var), ("scale", scale), ("shift", shift)):
        if t.data.shape != (c,):
            raise ShapeError(f"batchnorm {name} must have shape ({c},)")
    if np.any(var.data < 0):
        raise TensorError("batchnorm variance must be non-negative")
    inv = (1.0 / np.sqrt(var.data + eps)).astype(np.float32)
    xc = x.data - mean.data[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bwd(g):
        gs = g * scale.data[None, :, None, None]
        dx = gs * inv[None, :, None, None]
        dmean = -gs.sum(axis=(0, 2, 3), dtype=np.float64) * inv
        dvar = (gs * xc).sum(axis=(0, 2, 3), dtype=np.float64) * (-0.5) * inv ** 3
        dscale = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        dshift = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return [dx, dmean.astype(np.float32), dvar.astype(np.float32),
                dscale.astype(np.float32), dshift.astype(np.float32)]

    return _op(out, (x, mean, var, scale, shift), bwd, "batchnorm")


def batchnorm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5):
    """Batch-statistics normalization for training.

    Returns (y, batch_mean, batch_var) where the stats are plain float32
    arrays (biased variance) for running-buffer updates.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm_train expects a rank-4 tensor")
    c = x.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"batchnorm_train scale/shift must have shape ({c},)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
    xc = x.data - mu[None, :, None, None].astype(np.float32)
    var = (xc.astype(np.float64) ** 2).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = xc * inv[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bwd(g):
        dxhat = g * scale.data[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - s1[None, :, None, None].astype(np.float32)
            - xhat * s2[None, :, None, None].astype(np.float32))
        dscale = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        dshift = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return [dx.astype(np.float32), dscale.astype(np.float32),
                dshift.astype(np.float32)]

    y = _op(out, (x, scale, shift), bwd, "batchnorm_train")
    return y, mu.astype(np.float32), var.astype(np.float32)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Populates .grad on every participating requires_grad tensor; tensors not
    on a path to the loss keep their (zero) grad buffers.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar (single-element) loss")

    # iterative DFS topological sort (parents before dependents)
    order = []
    opened = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in opened:
            continue
        opened.add(nid)
        stack.append((node, True))
        for par in node.parents:
            if id(par) not in opened:
                stack.append((par, False))

    # a cycle leaves some parent sorted after its dependent
    pos = {id(node): i for i, node in enumerate(order)}
    for i, node in enumerate(order):
        for par in node.parents:
            if pos[id(par)] >= i:
                raise GraphCycleError("cycle detected in the recorded graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for par, pg in zip(node.parents, parent_grads):
            if pg is None or not _needs_grad(par):
                continue
            pg = np.ascontiguousarray(pg, dtype=np.float32)
            if pg.shape != par.data.shape:
                raise ShapeError(
                    f"backward produced grad {pg.shape} for parent {par.data.shape}")
            acc = grads.get(id(par))
            # fresh allocation on fan-in: closure outputs may alias g
            grads[id(par)] = pg if acc is None else acc + pg
