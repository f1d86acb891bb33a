"""Convert a published MobileNet-v2 checkpoint into a .cmsw encoder archive.

Reads a torchvision-style state dict (.pt/.pth via torch, or an .npz with the
same keys) and writes the segmentation runtime's encoder weights under its
frozen naming scheme:

    enc.stem.{w, bn_mean, bn_var, bn_scale, bn_shift}
    enc.block{j}.{expand|dw|project}.{w, bn_*}    j = 1..17
    enc.head.{w, bn_*}

Output is the .cmsw container: magic "CMSW", u32 LE version 1, u64 LE header
length, a sorted-key JSON header {name: {shape, offset, nbytes}}, then raw
little-endian float32 payload. Entries are laid out in sorted-name order so
the file is byte-deterministic. The width-multiplier-1.0 layout is the only
published one, so it is the only one mapped.

The tool is standalone on purpose: it speaks the file format and naming
contract, not the runtime's internals.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

MAGIC = b"CMSW"
VERSION = 1

# MobileNet-v2 inverted-residual table: (expansion, out_channels, repeats, stride)
BLOCK_GROUPS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
STEM_CH = 32
HEAD_CH = 1280

BN_PARTS = (("bn_scale", "weight"), ("bn_shift", "bias"),
            ("bn_mean", "running_mean"), ("bn_var", "running_var"))


class ExportError(RuntimeError):
    pass


def export_map():
    """Ordered list of (target name, source checkpoint key, expected shape)."""
    entries = []

    def conv_bn(prefix, feature, conv_idx, bn_idx, out_ch, in_ch, k):
        entries.append((f"{prefix}.w", f"features.{feature}.{conv_idx}.weight",
                        (out_ch, in_ch, k, k)))
        for target, src in BN_PARTS:
            entries.append((f"{prefix}.{target}",
                            f"features.{feature}.{bn_idx}.{src}", (out_ch,)))

    conv_bn("enc.stem", 0, 0, 1, STEM_CH, 3, 3)
    feature = 1
    block = 1
    in_ch = STEM_CH
    for t, out_ch, repeats, _stride in BLOCK_GROUPS:
        for _ in range(repeats):
            hidden = in_ch * t
            prefix = f"enc.block{block}"
            if t == 1:
                # dw conv.0.{0,1}, project conv.1 / bn conv.2
                entries.append((f"{prefix}.dw.w",
                                f"features.{feature}.conv.0.0.weight",
                                (hidden, 1, 3, 3)))
                for target, src in BN_PARTS:
                    entries.append((f"{prefix}.dw.{target}",
                                    f"features.{feature}.conv.0.1.{src}",
                                    (hidden,)))
                entries.append((f"{prefix}.project.w",
                                f"features.{feature}.conv.1.weight",
                                (out_ch, hidden, 1, 1)))
                for target, src in BN_PARTS:
                    entries.append((f"{prefix}.project.{target}",
                                    f"features.{feature}.conv.2.{src}",
                                    (out_ch,)))
            else:
                entries.append((f"{prefix}.expand.w",
                                f"features.{feature}.conv.0.0.weight",
                                (hidden, in_ch, 1, 1)))
                for target, src in BN_PARTS:
                    entries.append((f"{prefix}.expand.{target}",
                                    f"features.{feature}.conv.0.1.{src}",
                                    (hidden,)))
                entries.append((f"{prefix}.dw.w",
                                f"features.{feature}.conv.1.0.weight",
                                (hidden, 1, 3, 3)))
                for target, src in BN_PARTS:
                    entries.append((f"{prefix}.dw.{target}",
                                    f"features.{feature}.conv.1.1.{src}",
                                    (hidden,)))
                entries.append((f"{prefix}.project.w",
                                f"features.{feature}.conv.2.weight",
                                (out_ch, hidden, 1, 1)))
                for target, src in BN_PARTS:
                    entries.append((f"{prefix}.project.{target}",
                                    f"features.{feature}.conv.3.{src}",
                                    (out_ch,)))
            in_ch = out_ch
            feature += 1
            block += 1
    conv_bn("enc.head", 18, 0, 1, HEAD_CH, in_ch, 1)
    return entries


def load_checkpoint(path) -> dict:
    """state dict as {key: float32 ndarray}; .npz or torch serialized."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"checkpoint not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as data:
            return {k: np.asarray(data[k]) for k in data.files}
    try:
        import torch
    except ImportError:
        raise ExportError(
            f"{path}: torch is required to read {path.suffix} checkpoints "
            "(or supply an .npz)") from None
    state = torch.load(path, map_location="cpu", weights_only=True)
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    out = {}
    for key, value in state.items():
        if hasattr(value, "detach"):
            arr = value.detach().cpu().numpy()
            if arr.dtype.kind == "f":
                out[key] = arr
    return out


def convert(state: dict) -> dict:
    """checkpoint state dict -> {cmsw name: float32 array}; total or error."""
    arrays = {}
    for target, source, shape in export_map():
        if source not in state:
            raise ExportError(f"checkpoint is missing tensor {source!r} "
                              f"(needed for {target})")
        arr = np.asarray(state[source], dtype=np.float32)
        if tuple(arr.shape) != shape:
            raise ExportError(
                f"checkpoint tensor {source!r} has shape {tuple(arr.shape)}, "
                f"expected {shape} for {target}")
        arrays[target] = arr
    return arrays


def write_cmsw(arrays: dict, out_path) -> None:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        header[name] = {"shape": list(arrays[name].shape), "offset": offset,
                        "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(out_path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(hjson)))
        fh.write(hjson)
        for raw in chunks:
            fh.write(raw)


def export(checkpoint_path, out_path, report=print) -> None:
    """Convert and write; never leaves a partial output file behind."""
    state = load_checkpoint(checkpoint_path)
    arrays = convert(state)  # validates everything before any write
    write_cmsw(arrays, out_path)
    for name in sorted(arrays):
        report(f"{name}  {tuple(arrays[name].shape)}")
    report(f"wrote {len(arrays)} tensors to {out_path}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cmseg-export",
        description="Convert a MobileNet-v2 checkpoint to a .cmsw encoder archive")
    parser.add_argument("checkpoint", help=".pt/.pth state dict or .npz")
    parser.add_argument("out", help="output .cmsw path")
    args = parser.parse_args(argv)
    try:
        export(args.checkpoint, args.out)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
