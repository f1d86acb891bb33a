"""Full segmentation network: encoder pyramid, correlation-attention skip
branches, inverted-residual decoding path, and the sigmoid prediction head.

Decoding recurrence (strides halve at every step; c = channel concat)::

    R5 = B5 c up5(IRB5(T6))
    Ri = Bi c upi(IRBi(R_{i+1}))   for i = 4, 3, 2
    R1 = up1(IRB1(R2))
    logits = 1x1 conv(R1)

Bi is the correlation-attention output at scale i (full CoR+VRSA at 3..5,
VRSA-only at 2). Ablation toggles swap components for their minimal stand-ins:
no CoR routes Ti straight into VRSA, no ASPP uses a 1x1 adapter, no SAM drops
the attention term, no IRB uses plain conv+bn+relu6 blocks in the decoder.

Weight names: ``enc.*`` (see encoder), ``cosa.{i}.*``, ``dec.*``, ``head.*``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import cosa, encoder, weights
from . import tensor as T
from .tensor import ConvParams, Tensor

META_CONFIG = "meta.config_json"
DECODER_SCALES = (5, 4, 3, 2)


@dataclass
class AblationFlags:
    use_cor: bool = True
    use_aspp: bool = True
    use_sam: bool = True
    use_irb: bool = True


@dataclass
class ModelConfig:
    encoder: encoder.EncoderConfig = field(default_factory=encoder.EncoderConfig)
    gamma: float = 4.0
    # per-scale overrides keyed 2..5; None entries fall back to the scale width
    k: Dict[int, Optional[int]] = field(default_factory=dict)
    cosa_out_channels: Dict[int, int] = field(default_factory=dict)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    threshold: float = 0.5
    attention_combine: str = "add"
    dec_expansion: int = 6
    head_channels: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0,1)")
        if self.attention_combine not in ("add", "mul"):
            raise ValueError("attention_combine must be 'add' or 'mul'")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    # channel bookkeeping ---------------------------------------------------

    def tap_channels(self) -> Dict[int, int]:
        taps = self.encoder.scaled_taps()
        return {2: taps[0], 3: taps[1], 4: taps[2], 5: taps[3], 6: taps[4]}

    def d_channels(self) -> Dict[int, int]:
        taps = self.tap_channels()
        return {i: self.cosa_out_channels.get(i, taps[i]) for i in (2, 3, 4, 5)}

    def k_at(self, scale: int) -> int:
        stride = {2: 2, 3: 4, 4: 8, 5: 16}[scale]
        h, w = self.encoder.input_size
        sites = (h // stride) * (w // stride)
        # k defaults to the scale width but can never exceed the site count
        return min(self.k.get(scale) or self.tap_channels()[scale], sites)

    def head_width(self) -> int:
        return self.head_channels or self.tap_channels()[2]

    def vrsa_in_channels(self, scale: int) -> int:
        if scale >= 3 and self.ablation.use_cor:
            return self.k_at(scale)
        return self.tap_channels()[scale]

    @classmethod
    def micro(cls, input_size=(128, 128), seed: int = 0, **kw) -> "ModelConfig":
        """Quarter-width configuration for CPU-scale training."""
        enc = encoder.EncoderConfig(input_size=input_size, width_multiplier=0.25,
                                    seed=seed)
        return cls(encoder=enc, **kw)

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["input_size"] = list(self.encoder.input_size)
        d["encoder"]["channels"] = list(self.encoder.channels)
        d["k"] = {str(i): v for i, v in self.k.items()}
        d["cosa_out_channels"] = {str(i): v for i, v in self.cosa_out_channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc_d = dict(d.pop("encoder", {}))
        enc_known = {"input_size", "channels", "width_multiplier", "seed",
                     "freeze_bn_stats"}
        unknown = set(enc_d) - enc_known
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        if "input_size" in enc_d:
            enc_d["input_size"] = tuple(enc_d["input_size"])
        if "channels" in enc_d:
            enc_d["channels"] = tuple(enc_d["channels"])
        enc = encoder.EncoderConfig(**enc_d)
        abl = AblationFlags(**d.pop("ablation", {}))
        k = {int(i): v for i, v in d.pop("k", {}).items()}
        dch = {int(i): v for i, v in d.pop("cosa_out_channels", {}).items()}
        known = {"gamma", "threshold", "attention_combine", "dec_expansion",
                 "head_channels"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(encoder=enc, ablation=abl, k=k, cosa_out_channels=dch, **d)


# ---------------------------------------------------------------------------
# parameter layout


def _conv_spec(out_ch, in_ch, kh, kw):
    return {"w": (out_ch, in_ch, kh, kw), "b": (out_ch,)}


def param_specs(cfg: ModelConfig) -> Dict[str, tuple]:
    """Ordered name -> shape map over the whole network."""
    specs: Dict[str, tuple] = dict(encoder.param_specs(cfg.encoder))
    taps = cfg.tap_channels()
    d_ch = cfg.d_channels()

    def emit(prefix, sub):
        for k, shape in sub.items():
            specs[f"{prefix}.{k}"] = shape

    for i in (2, 3, 4, 5):
        cin = cfg.vrsa_in_channels(i)
        d = d_ch[i]
        if cfg.ablation.use_aspp:
            for bi in range(4):
                emit(f"cosa.{i}.aspp{bi}", _conv_spec(d, cin, 3, 3))
            emit(f"cosa.{i}.fuse", _conv_spec(d, 4 * d, 1, 1))
        else:
            emit(f"cosa.{i}.adapter", _conv_spec(d, cin, 1, 1))
        if cfg.ablation.use_sam:
            emit(f"cosa.{i}.sam", _conv_spec(1, 2, 7, 7))

    def emit_block(prefix, in_ch, out_ch):
        if cfg.ablation.use_irb:
            hidden = in_ch * cfg.dec_expansion
            if cfg.dec_expansion != 1:
                emit(f"{prefix}.expand", encoder._conv_bn_spec(hidden, in_ch, 1, 1))
            emit(f"{prefix}.dw", encoder._conv_bn_spec(hidden, 1, 3, 3))
            emit(f"{prefix}.project", encoder._conv_bn_spec(out_ch, hidden, 1, 1))
        else:
            emit(prefix, encoder._conv_bn_spec(out_ch, in_ch, 3, 3))

    in_ch = taps[6]
    for i in DECODER_SCALES:
        emit_block(f"dec.irb{i}", in_ch, d_ch[i])
        emit(f"dec.up{i}", _conv_spec(d_ch[i], d_ch[i], 2, 2))
        in_ch = 2 * d_ch[i]
    hw = cfg.head_width()
    emit_block("dec.irb1", in_ch, hw)
    emit("dec.up1", _conv_spec(hw, hw, 2, 2))
    emit("head.out", _conv_spec(1, hw, 1, 1))
    return specs


def init_params(cfg: ModelConfig,
                encoder_archive: Optional[weights.WeightArchive] = None
                ) -> Dict[str, Tensor]:
    """All model parameters; encoder optionally copied from an archive.

    The non-encoder stream is seeded independently of the encoder mode so
    swapping random/pretrained encoders leaves the rest identical.
    """
    specs = param_specs(cfg)
    enc_specs = {k: v for k, v in specs.items() if k.startswith("enc.")}
    rest_specs = {k: v for k, v in specs.items() if not k.startswith("enc.")}
    if encoder_archive is None:
        params = encoder.init_random(enc_specs, cfg.encoder.seed)
    else:
        params = encoder.init_from_archive(enc_specs, encoder_archive)
    rng = np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence([cfg.encoder.seed, 7])))
    for name, shape in rest_specs.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "w":
            fan_in = int(np.prod(shape[1:]))
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf in ("b", "bn_shift", "bn_mean"):
            data = np.zeros(shape, dtype=np.float32)
        elif leaf in ("bn_scale", "bn_var"):
            data = np.ones(shape, dtype=np.float32)
        else:
            raise encoder.WeightInitError(f"unknown parameter kind in {name!r}")
        params[name] = Tensor(data, requires_grad=True)
    return params


def trainable_names(params: Dict[str, Tensor]) -> List[str]:
    """Gradient-updated parameters (batchnorm statistics are buffers)."""
    return [n for n in sorted(params)
            if not n.endswith(("bn_mean", "bn_var"))]


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_specs(cfg).values())


# ---------------------------------------------------------------------------
# forward paths


def _conv_params(params, prefix, **kw) -> ConvParams:
    return ConvParams(kernel=params[f"{prefix}.w"], bias=params[f"{prefix}.b"], **kw)


def _vrsa_params(params, scale) -> cosa.VrsaParams:
    branches = [
        _conv_params(params, f"cosa.{scale}.aspp{bi}", padding=d, dilation=d)
        for bi, d in enumerate(cosa.REQUIRED_DILATIONS)]
    fuse = _conv_params(params, f"cosa.{scale}.fuse")
    attention = _conv_params(params, f"cosa.{scale}.sam", padding=3)
    return cosa.VrsaParams(branches=branches, fuse=fuse, attention=attention)


def _cosa_branch(t_i: Tensor, scale: int, params, cfg: ModelConfig) -> Tensor:
    abl = cfg.ablation
    x = t_i
    if abl.use_cor and scale in cosa.FULL_COSA_SCALES:
        x = cosa.cor_forward_batched(
            x, cosa.CoRConfig(gamma=cfg.gamma, k=cfg.k_at(scale)))
    if abl.use_aspp:
        kt = cosa._aspp(x, _vrsa_params(params, scale))
    else:
        kt = T.conv2d(x, _conv_params(params, f"cosa.{scale}.adapter"))
    if abl.use_sam:
        attention = _conv_params(params, f"cosa.{scale}.sam", padding=3)
        return cosa.apply_attention(kt, attention, cfg.attention_combine)
    return kt


def _decoder_block(x: Tensor, prefix: str, in_ch: int, out_ch: int,
                   params, cfg: ModelConfig, train: bool) -> Tensor:
    freeze = cfg.encoder.freeze_bn_stats
    if cfg.ablation.use_irb:
        spec = encoder.InvertedResidualSpec(
            in_ch=in_ch, out_ch=out_ch, expansion=cfg.dec_expansion, stride=1)
        return encoder.inverted_residual(x, spec, params, prefix=prefix,
                                         train=train, freeze_stats=freeze)
    return encoder.conv_bn(x, params, prefix, padding=1, train=train,
                           freeze_stats=freeze)


def decode(pyramid: List[Tensor], params: Dict[str, Tensor], cfg: ModelConfig,
           train: bool = False) -> Tensor:
    """Pyramid [T2..T6] (or [T1..T6]) -> logits (N,1,H,W)."""
    if len(pyramid) == 6:
        pyramid = pyramid[1:]
    if len(pyramid) != 5:
        raise T.ShapeError("decode expects the five tensors T2..T6")
    by_scale = {i: t for i, t in zip((2, 3, 4, 5, 6), pyramid)}
    taps = cfg.tap_channels()
    d_ch = cfg.d_channels()

    r = by_scale[6]
    in_ch = taps[6]
    for i in DECODER_SCALES:
        y = _decoder_block(r, f"dec.irb{i}", in_ch, d_ch[i], params, cfg, train)
        up = T.conv_transpose2d(y, _conv_params(params, f"dec.up{i}", stride=2))
        b_i = _cosa_branch(by_scale[i], i, params, cfg)
        r = T.concat_channels([b_i, up])
        in_ch = 2 * d_ch[i]
    y = _decoder_block(r, "dec.irb1", in_ch, cfg.head_width(), params, cfg, train)
    r1 = T.conv_transpose2d(y, _conv_params(params, "dec.up1", stride=2))
    return T.conv2d(r1, _conv_params(params, "head.out"))


def forward(image: Tensor, params: Dict[str, Tensor], cfg: ModelConfig,
            train: bool = False) -> Tensor:
    """Image in [0,1] -> per-pixel duplication probability (N,1,H,W)."""
    pyramid = encoder.encode(image, params, cfg.encoder, train=train)
    return T.sigmoid(decode(pyramid, params, cfg, train=train))


def threshold_mask(prob: Tensor, threshold: float) -> Tensor:
    """probability >= threshold -> 1 else 0."""
    return Tensor((prob.data >= threshold).astype(np.float32))


def predict_mask(image: Tensor, params: Dict[str, Tensor],
                 cfg: ModelConfig) -> Tensor:
    """Binary duplication mask (N,1,H,W) at the configured threshold."""
    return threshold_mask(forward(image, params, cfg), cfg.threshold)


# ---------------------------------------------------------------------------
# persistence (model config rides inside the archive as a meta entry)


def save_model(path, params: Dict[str, Tensor], cfg: ModelConfig) -> None:
    arrays = {name: t.data for name, t in params.items()}
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    blob += b" " * (-len(blob) % 4)
    arrays[META_CONFIG] = np.frombuffer(blob, dtype="<f4").copy()
    weights.save(weights.WeightArchive(arrays), path)


def load_model(path):
    """-> (params, cfg); validates names and shapes against the config."""
    arch = weights.load(path)
    if META_CONFIG not in arch:
        raise weights.ArchiveError(
            f"{path}: not a model file (missing {META_CONFIG})")
    blob = arch.get(META_CONFIG).astype("<f4").tobytes()
    cfg = ModelConfig.from_dict(json.loads(blob.decode("utf-8").strip()))
    specs = param_specs(cfg)
    params: Dict[str, Tensor] = {}
    for name, shape in specs.items():
        if name not in arch:
            raise encoder.WeightInitError(f"model file is missing tensor {name!r}")
        arr = arch.get(name)
        if tuple(arr.shape) != tuple(shape):
            raise encoder.WeightInitError(
                f"model tensor {name!r} has shape {tuple(arr.shape)}, "
                f"expected {tuple(shape)}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    return params, cfg
