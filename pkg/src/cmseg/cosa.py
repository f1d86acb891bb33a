"""Correlation-assisted spatial attention.

CoR turns a feature tensor into a per-site similarity stack: reshape to
columns, L2-normalize each column, take the cosine-similarity gram matrix,
damp the near-diagonal band with a radial suppression mask, then keep the k
strongest responses per site in descending order. VRSA then reads that stack
through four dilated 3x3 convolutions fused by a 1x1, and adds a sigmoid
spatial-attention map from a 7x7 convolution over mean/max channel pools.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor

REQUIRED_DILATIONS = (4, 8, 12, 16)

# scales carrying a full CoR + VRSA module; scale 2 is VRSA-only, 1 and 6 none
FULL_COSA_SCALES = (3, 4, 5)
VRSA_ONLY_SCALE = 2

_NORM_EPS = 1e-12  # zero columns normalize to zero instead of NaN


@dataclass
class CoRConfig:
    gamma: float = 4.0
    k: Optional[int] = None  # None -> the scale's channel count

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class VrsaParams:
    """Four dilated 3x3 branches, a 1x1 fusion conv, and the 7x7 attention conv."""
    branches: Sequence[ConvParams]
    fuse: ConvParams
    attention: ConvParams

    def __post_init__(self):
        dil = tuple(b.dilation for b in self.branches)
        if dil != REQUIRED_DILATIONS:
            raise ValueError(f"branch dilations must be {REQUIRED_DILATIONS}, got {dil}")


def normalize_columns_batched(x: Tensor) -> Tensor:
    """(N,C,h,w) -> (N,C,h*w) with unit-L2 columns (zero columns stay zero)."""
    if x.data.ndim != 4:
        raise T.ShapeError("normalize_columns_batched expects rank-4 input")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    sumsq = np.einsum("ncs,ncs->ns", flat, flat)
    r = 1.0 / np.sqrt(sumsq + np.float32(_NORM_EPS ** 2))
    out = flat * r[:, None, :]

    def bwd(g):
        dot = np.einsum("ncs,ncs->ns", flat, g)
        dx = g * r[:, None, :] - flat * (dot * r ** 3)[:, None, :]
        return [dx.reshape(n, c, h, w)]

    return T._op(out.astype(np.float32), (x,), bwd, "normalize_columns")


def normalize_columns(x: Tensor) -> Tensor:
    """(C,h,w) -> (C, h*w); every column scaled to unit L2 norm."""
    if x.data.ndim != 3:
        raise T.ShapeError("normalize_columns expects rank-3 input")
    c, h, w = x.shape
    batched = normalize_columns_batched(T.reshape(x, (1, c, h, w)))
    return T.reshape(batched, (c, h * w))


_PHI_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()


def suppression_matrix(h: int, w: int, gamma: float) -> Tensor:
    """(h*w, h*w) radial mask 1 - exp(-d^2 / (2*gamma^2)) between site coords.

    Zero on the diagonal, symmetric, in [0,1), non-decreasing in squared
    distance; damps the trivial self-similarity band of the gram matrix.
    """
    if h < 1 or w < 1:
        raise ValueError("h and w must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    key = (h, w, float(gamma))
    phi = _PHI_CACHE.get(key)
    if phi is None:
        sites = np.arange(h * w)
        ys, xs = sites // w, sites % w
        d2 = ((ys[:, None] - ys[None, :]) ** 2
              + (xs[:, None] - xs[None, :]) ** 2).astype(np.float64)
        phi = (1.0 - np.exp(-d2 / (2.0 * float(gamma) ** 2))).astype(np.float32)
        np.fill_diagonal(phi, 0.0)
        _PHI_CACHE[key] = phi
        while len(_PHI_CACHE) > 8:
            _PHI_CACHE.popitem(last=False)
    return Tensor(phi)


def _topk_per_site(damped: Tensor, h: int, w: int, k: int) -> Tensor:
    """(N,S,S) symmetric damped affinity -> (N,k,h,w) strongest responses.

    Row i of the (symmetric) matrix is site i's similarity vector, so the
    selection runs along the contiguous last axis.
    """
    n, s, _ = damped.shape
    vals, idx = T.topk_last(damped.data, k)           # (N, S, k)
    out = np.ascontiguousarray(vals.transpose(0, 2, 1)).reshape(n, k, h, w)

    def bwd(g):
        gz = np.zeros((n, s, s), dtype=np.float32)
        gt = np.ascontiguousarray(g.reshape(n, k, s).transpose(0, 2, 1))
        np.put_along_axis(gz, idx, gt, axis=-1)
        return [gz]

    return T._op(out, (damped,), bwd, "topk_per_site")


def cor_forward_batched(x: Tensor, cfg: CoRConfig) -> Tensor:
    """(N,C,h,w) -> (N,k,h,w); CoR applied independently per batch element."""
    n, c, h, w = x.shape
    s = h * w
    k = cfg.k if cfg.k is not None else c
    if not 1 <= k <= s:
        raise ValueError(f"k={k} out of range for {s} sites")
    f = normalize_columns_batched(x)                  # (N, C, S)
    affinity = T.gram(f)                              # (N, S, S) cosine similarities
    phi = suppression_matrix(h, w, cfg.gamma)
    damped = T.mul(affinity, phi)                     # symmetric, zero diagonal
    return _topk_per_site(damped, h, w, k)


def cor_forward(x: Tensor, cfg: CoRConfig) -> Tensor:
    """(C,h,w) -> (k,h,w) similarity stack, strongest first at every site."""
    if x.data.ndim != 3:
        raise T.ShapeError("cor_forward expects rank-3 input")
    c, h, w = x.shape
    out = cor_forward_batched(T.reshape(x, (1, c, h, w)), cfg)
    return T.reshape(out, (out.shape[1], h, w))


def _aspp(x: Tensor, params: VrsaParams) -> Tensor:
    maps = [T.conv2d(x, b) for b in params.branches]
    return T.conv2d(T.concat_channels(maps), params.fuse)


def spatial_attention_map(x: Tensor, attention: ConvParams) -> Tensor:
    """Sigmoid 7x7 response over the mean/max channel-pool stack: (N,1,h,w)."""
    pooled = T.concat_channels([T.mean_channels(x), T.max_channels(x)])
    return T.sigmoid(T.conv2d(pooled, attention))


def apply_attention(x: Tensor, attention: ConvParams,
                    combine: str = "add") -> Tensor:
    m = spatial_attention_map(x, attention)
    if combine == "add":
        return T.add(x, m)
    if combine == "mul":
        return T.mul(x, m)
    raise ValueError(f"combine must be 'add' or 'mul', got {combine!r}")


def vrsa_forward(x: Tensor, params: VrsaParams, combine: str = "add") -> Tensor:
    """Dilated-pyramid features plus a broadcast sigmoid attention map."""
    return apply_attention(_aspp(x, params), params.attention, combine)


def cosa_forward(x: Tensor, scale: int, cfg: CoRConfig, params: VrsaParams,
                 combine: str = "add") -> Tensor:
    """Full CoR+VRSA at scales 3..5; VRSA-only at scale 2; undefined elsewhere."""
    if scale == VRSA_ONLY_SCALE:
        return vrsa_forward(x, params, combine)
    if scale in FULL_COSA_SCALES:
        return vrsa_forward(cor_forward_batched(x, cfg), params, combine)
    raise ValueError(f"no correlation-attention module is defined at scale {scale}")
