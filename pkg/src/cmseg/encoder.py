"""Feature-pyramid encoder producing T1..T6.

The encoding path follows the MobileNet-v2 layout: a stride-2 stem
convolution, seventeen inverted residual blocks, and a final 1x1 expansion,
tapped at channel widths (C2..C6) = (16, 24, 32, 96, 1280) and strides
(2, 4, 8, 16, 32). T1 is the parameter-free input-resolution representation
(the image itself); nothing downstream consumes it.

Archive naming scheme (frozen; the export utility targets it)::

    enc.stem.{w, bn_mean, bn_var, bn_scale, bn_shift}
    enc.block{j}.expand.{w, bn_*}     j = 1..17 (absent when expansion == 1)
    enc.block{j}.dw.{w, bn_*}         depthwise 3x3
    enc.block{j}.project.{w, bn_*}
    enc.head.{w, bn_*}

Convolutions are bias-free (the batchnorm shift provides the offset).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor
from .weights import WeightArchive

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_BN_KEYS = ("bn_mean", "bn_var", "bn_scale", "bn_shift")

# MobileNet-v2 block table: (expansion, raw_channels, repeats, first_stride).
# Entries with channels None take the configured tap width for that level.
_BLOCK_GROUPS = (
    (1, "C2", 1, 1),
    (6, "C3", 2, 2),
    (6, "C4", 3, 2),
    (6, 64, 4, 2),
    (6, "C5", 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
_STEM_RAW = 32
# tap after these block indices (1-based); T6 taps the head output
_TAPS = {1: 2, 3: 3, 6: 4, 13: 5}


class WeightInitError(ValueError):
    pass


def scale_channels(c: int, width_multiplier: float) -> int:
    """Width scaling: min 4, rounded to a multiple of 4."""
    return max(4, int(c * width_multiplier / 4.0 + 0.5) * 4)


@dataclass
class EncoderConfig:
    input_size: Tuple[int, int] = (256, 256)
    channels: Tuple[int, int, int, int, int] = (16, 24, 32, 96, 1280)
    width_multiplier: float = 1.0
    seed: int = 0
    freeze_bn_stats: bool = False

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError("input size must be divisible by 32")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channels must be strictly positive")

    def scaled_taps(self) -> Tuple[int, ...]:
        return tuple(scale_channels(c, self.width_multiplier) for c in self.channels)


@dataclass
class InvertedResidualSpec:
    in_ch: int
    out_ch: int
    expansion: int
    stride: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")

    @property
    def hidden(self) -> int:
        return self.in_ch * self.expansion

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


def block_specs(config: EncoderConfig) -> List[InvertedResidualSpec]:
    """The seventeen inverted residual blocks for this configuration."""
    wm = config.width_multiplier
    taps = {"C2": config.channels[0], "C3": config.channels[1],
            "C4": config.channels[2], "C5": config.channels[3]}
    specs = []
    in_ch = scale_channels(_STEM_RAW, wm)
    for t, raw, repeats, stride in _BLOCK_GROUPS:
        out_ch = scale_channels(taps.get(raw, raw) if isinstance(raw, str) else raw, wm)
        for i in range(repeats):
            specs.append(InvertedResidualSpec(
                in_ch=in_ch, out_ch=out_ch, expansion=t,
                stride=stride if i == 0 else 1))
            in_ch = out_ch
    return specs


def _conv_bn_spec(out_ch: int, in_ch: int, kh: int, kw: int) -> Dict[str, tuple]:
    spec = {"w": (out_ch, in_ch, kh, kw)}
    for k in _BN_KEYS:
        spec[k] = (out_ch,)
    return spec


def param_specs(config: EncoderConfig) -> Dict[str, tuple]:
    """Ordered name -> shape map of every encoder parameter."""
    wm = config.width_multiplier
    out: Dict[str, tuple] = {}

    def emit(prefix, spec):
        for k, shape in spec.items():
            out[f"{prefix}.{k}"] = shape

    stem_ch = scale_channels(_STEM_RAW, wm)
    emit("enc.stem", _conv_bn_spec(stem_ch, 3, 3, 3))
    for j, spec in enumerate(block_specs(config), start=1):
        if spec.expansion != 1:
            emit(f"enc.block{j}.expand", _conv_bn_spec(spec.hidden, spec.in_ch, 1, 1))
        emit(f"enc.block{j}.dw", _conv_bn_spec(spec.hidden, 1, 3, 3))
        emit(f"enc.block{j}.project", _conv_bn_spec(spec.out_ch, spec.hidden, 1, 1))
    c6 = config.scaled_taps()[4]
    last = block_specs(config)[-1].out_ch
    emit("enc.head", _conv_bn_spec(c6, last, 1, 1))
    return out


def init_random(specs: Dict[str, tuple], seed: int) -> Dict[str, Tensor]:
    """He-uniform fan-in init for conv kernels; identity batchnorm."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    params: Dict[str, Tensor] = {}
    for name, shape in specs.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "w":
            fan_in = int(np.prod(shape[1:]))
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf in ("bn_scale",):
            data = np.ones(shape, dtype=np.float32)
        elif leaf in ("bn_shift", "bn_mean", "b"):
            data = np.zeros(shape, dtype=np.float32)
        elif leaf == "bn_var":
            data = np.ones(shape, dtype=np.float32)
        else:
            raise WeightInitError(f"unknown parameter kind in {name!r}")
        params[name] = Tensor(data, requires_grad=True)
    return params


def init_from_archive(specs: Dict[str, tuple], archive: WeightArchive,
                      prefix: str = "enc.") -> Dict[str, Tensor]:
    """Exact copy from an archive; names the first missing/mismatched tensor."""
    params: Dict[str, Tensor] = {}
    for name, shape in specs.items():
        if not name.startswith(prefix):
            continue
        if name not in archive:
            raise WeightInitError(f"archive is missing tensor {name!r}")
        arr = archive.get(name)
        if tuple(arr.shape) != tuple(shape):
            raise WeightInitError(
                f"archive tensor {name!r} has shape {tuple(arr.shape)}, "
                f"expected {tuple(shape)}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    return params


def init_weights(config: EncoderConfig,
                 archive: Optional[WeightArchive] = None) -> Dict[str, Tensor]:
    """Encoder parameters, randomly initialized or copied from an archive."""
    specs = param_specs(config)
    if archive is None:
        return init_random(specs, config.seed)
    return init_from_archive(specs, archive)


def _bn_tensors(params: Dict[str, Tensor], prefix: str):
    return tuple(params[f"{prefix}.{k}"] for k in _BN_KEYS)


def conv_bn(x: Tensor, params: Dict[str, Tensor], prefix: str, *,
            stride: int = 1, padding: int = 0, groups: int = 1,
            act: bool = True, train: bool = False,
            freeze_stats: bool = False) -> Tensor:
    """conv -> batchnorm -> optional relu6, updating running stats in train mode."""
    w = params[f"{prefix}.w"]
    y = T.conv2d(x, ConvParams(kernel=w, stride=stride, padding=padding,
                               groups=groups))
    mean, var, scale, shift = _bn_tensors(params, prefix)
    if train and not freeze_stats:
        y, mu, v = T.batchnorm_train(y, scale, shift, eps=BN_EPS)
        mean.data += BN_MOMENTUM * (mu - mean.data)
        var.data += BN_MOMENTUM * (v - var.data)
    else:
        y = T.batchnorm(y, mean, var, scale, shift, eps=BN_EPS)
    return T.relu6(y) if act else y


def inverted_residual(x: Tensor, spec: InvertedResidualSpec,
                      params: Dict[str, Tensor], prefix: str = "",
                      train: bool = False, freeze_stats: bool = False) -> Tensor:
    """expand 1x1 -> depthwise 3x3 (stride) -> project 1x1, residual when
    stride is 1 and widths match."""
    if x.shape[1] != spec.in_ch:
        raise T.ShapeError(
            f"inverted_residual expects {spec.in_ch} channels, got {x.shape[1]}")
    p = prefix + "." if prefix and not prefix.endswith(".") else prefix
    y = x
    if spec.expansion != 1:
        y = conv_bn(y, params, f"{p}expand", train=train, freeze_stats=freeze_stats)
    y = conv_bn(y, params, f"{p}dw", stride=spec.stride, padding=1,
                groups=spec.hidden, train=train, freeze_stats=freeze_stats)
    y = conv_bn(y, params, f"{p}project", act=False, train=train,
                freeze_stats=freeze_stats)
    if spec.has_skip:
        y = T.add(y, x)
    return y


def encode(image: Tensor, params: Dict[str, Tensor], config: EncoderConfig,
           train: bool = False) -> List[Tensor]:
    """Image (N,3,H,W) -> pyramid [T1..T6] at strides (1,2,4,8,16,32)."""
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise T.ShapeError("encode expects an (N,3,H,W) image tensor")
    h, w = config.input_size
    if image.shape[2] != h or image.shape[3] != w:
        raise T.ShapeError(
            f"encode expects {h}x{w} input, got {image.shape[2]}x{image.shape[3]}")
    freeze = config.freeze_bn_stats
    pyramid = [image]
    x = conv_bn(image, params, "enc.stem", stride=2, padding=1,
                train=train, freeze_stats=freeze)
    for j, spec in enumerate(block_specs(config), start=1):
        x = inverted_residual(x, spec, params, prefix=f"enc.block{j}",
                              train=train, freeze_stats=freeze)
        if j in _TAPS:
            pyramid.append(x)
    x = conv_bn(x, params, "enc.head", train=train, freeze_stats=freeze)
    pyramid.append(x)
    return pyramid
