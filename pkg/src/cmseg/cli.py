"""Command-line entry point.

Subcommands: synth (build a forgery dataset), train, infer (masks +
overlays), eval (metrics report), verify (self-check suite). Exit codes:
0 success, 1 runtime failure, 2 usage/config error. Every artifact-producing
subcommand records its seed in the outputs it writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _cap_threads() -> None:
    """CMSEG_THREADS caps BLAS parallelism; must run before numpy loads."""
    cap = os.environ.get("CMSEG_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


class UsageError(Exception):
    pass


def _merge_config(args, sub_parser: argparse.ArgumentParser, keys) -> dict:
    """Precedence: flags > config file > defaults. Unknown file keys rejected."""
    merged = {}
    defaults = {k: sub_parser.get_default(k) for k in keys}
    file_vals = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                file_vals = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        unknown = set(file_vals) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for k in keys:
        flag_val = getattr(args, k)
        if flag_val != defaults[k]:
            merged[k] = flag_val
        elif k in file_vals:
            merged[k] = file_vals[k]
        else:
            merged[k] = defaults[k]
    return merged


def cmd_synth(args, sub_parser) -> int:
    from . import synth

    opts = _merge_config(args, sub_parser, ["sources", "count", "seed", "out",
                                        "attacks", "mask_mode"])
    if not opts["sources"]:
        raise UsageError("--sources is required")
    if not opts["out"]:
        raise UsageError("--out is required")
    src_path = Path(opts["sources"])
    if not src_path.exists():
        raise UsageError(f"sources manifest not found: {src_path}")
    try:
        sources = synth.load_sources(src_path)
        menu = [synth.AttackSpec.parse(a)
                for a in opts["attacks"].split(",")] if opts["attacks"] else None
        manifest = synth.generate_dataset(
            sources, count=opts["count"], seed=opts["seed"],
            out_dir=opts["out"], attack_menu=menu, mask_mode=opts["mask_mode"])
    except synth.SynthError as exc:
        raise UsageError(str(exc)) from None
    records = synth.read_manifest(manifest)
    skipped = sum(1 for r in records if r.get("skipped"))
    print(f"wrote {len(records) - skipped} samples ({skipped} skipped) "
          f"to {opts['out']} [seed {opts['seed']}]")
    return EXIT_OK


def cmd_train(args, sub_parser) -> int:
    from . import model, train

    opts = _merge_config(args, sub_parser, ["data", "epochs", "lr", "seed", "out",
                                        "batch_size", "holdout_frac",
                                        "width_multiplier", "input_size",
                                        "no_cor"])
    if not opts["data"]:
        raise UsageError("--data is required")
    if not opts["out"]:
        raise UsageError("--out is required")
    try:
        data = train.load_dataset(opts["data"])
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    h, w = data.images.shape[2], data.images.shape[3]
    if opts["input_size"] and opts["input_size"] != f"{h}x{w}":
        raise UsageError(f"--input-size {opts['input_size']} does not match "
                         f"dataset images ({h}x{w})")
    from .encoder import EncoderConfig
    cfg = model.ModelConfig(encoder=EncoderConfig(
        input_size=(h, w), width_multiplier=opts["width_multiplier"],
        seed=opts["seed"]))
    if opts["no_cor"]:
        cfg.ablation.use_cor = False

    log_path = Path(opts["out"]).with_suffix(".log.jsonl")
    try:
        result = train.train(
            data, cfg, epochs=opts["epochs"], lr=opts["lr"], seed=opts["seed"],
            out_path=opts["out"], log_path=log_path,
            batch_size=opts["batch_size"], holdout_frac=opts["holdout_frac"],
            on_epoch=lambda row: print(json.dumps(row)))
    except train.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {opts['out']} (holdout mF1 "
          f"{result.final_holdout_f1:.4f}) [seed {opts['seed']}]")
    return EXIT_OK


def _overlay(image01, mask01):
    """Highlight mask boundaries in red, leaving interior pixels inspectable."""
    import numpy as np

    m = mask01[0] > 0.5
    inner = m.copy()
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    boundary = m & ~inner
    out = (image01.transpose(1, 2, 0) * 255).astype(np.uint8).copy()
    out[boundary] = (255, 0, 0)
    return out


def cmd_infer(args, sub_parser) -> int:
    import numpy as np

    from . import model, synth, train
    from . import tensor as T

    opts = _merge_config(args, sub_parser, ["weights", "input", "out_mask",
                                        "out_overlay", "threshold"])
    for req in ("weights", "input", "out_mask"):
        if not opts[req]:
            raise UsageError(f"--{req.replace('_', '-')} is required")
    try:
        params, cfg = model.load_model(opts["weights"])
    except Exception as exc:
        raise UsageError(f"cannot load weights {opts['weights']}: {exc}") from None
    cfg.threshold = opts["threshold"]

    inp = Path(opts["input"])
    paths = sorted(p for p in inp.glob("*")
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg")) \
        if inp.is_dir() else [inp]
    if not paths:
        raise UsageError(f"no images under {inp}")

    mask_dir = Path(opts["out_mask"])
    mask_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir = None
    if opts["out_overlay"]:
        overlay_dir = Path(opts["out_overlay"])
        overlay_dir.mkdir(parents=True, exist_ok=True)

    failures = []
    for path in paths:
        try:
            img = train.load_image_01(path)
        except OSError as exc:
            failures.append(f"{path}: {exc}")
            continue
        h, w = img.shape[1:]
        if (h, w) != tuple(cfg.encoder.input_size):
            failures.append(f"{path}: size {h}x{w} does not match model "
                            f"{cfg.encoder.input_size}")
            continue
        mask = model.predict_mask(T.tensor(img[None]), params, cfg)
        mask255 = (mask.data[0, 0] * 255).astype(np.uint8)
        synth.save_png(mask255, mask_dir / f"{path.stem}.png")
        if overlay_dir is not None:
            synth.save_png(_overlay(img, mask.data[0]),
                           overlay_dir / f"{path.stem}.png")
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(paths)} masks to {mask_dir}"
          + (f" and overlays to {overlay_dir}" if overlay_dir else ""))
    return EXIT_OK


def cmd_eval(args, sub_parser) -> int:
    import numpy as np
    from PIL import Image

    from . import losses

    opts = _merge_config(args, sub_parser, ["pred", "gt", "report", "f1_threshold"])
    for req in ("pred", "gt", "report"):
        if not opts[req]:
            raise UsageError(f"--{req} is required")
    pred_dir, gt_dir = Path(opts["pred"]), Path(opts["gt"])
    pred_files = {p.stem: p for p in pred_dir.glob("*.png")}
    gt_files = {p.stem: p for p in gt_dir.glob("*.png")}
    common = sorted(set(pred_files) & set(gt_files))
    unmatched = sorted(set(pred_files) ^ set(gt_files))
    if not common:
        print(f"error: no matching filenames between {pred_dir} and {gt_dir}",
              file=sys.stderr)
        return EXIT_RUNTIME
    if unmatched:
        for name in unmatched:
            print(f"error: unmatched file {name}", file=sys.stderr)
        return EXIT_RUNTIME

    def load(p):
        with Image.open(p) as im:
            return (np.asarray(im.convert("L")) > 127).astype(np.float32)

    report = losses.evaluate_pairs(
        ((name, load(pred_files[name]), load(gt_files[name])) for name in common),
        f1_threshold=opts["f1_threshold"])
    with open(opts["report"], "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    d = report.to_dict()
    print(f"{d['image_count']} images: mF1 {d['mean_f1']:.4f}, "
          f"mIoU {d['mean_iou']:.4f}, detected {d['detected_count']}")
    return EXIT_OK


def cmd_verify(args, sub_parser) -> int:
    from . import verify

    results = verify.run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:7.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmseg",
        description="Copy-move forgery segmentation: synthesize, train, "
                    "infer, evaluate, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a copy-move forgery dataset")
    p.add_argument("--sources", help="sources manifest (JSON list)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--attacks", default="",
                   help="comma list of KIND:LEVEL (e.g. JC:9,Ro:2) or none")
    p.add_argument("--mask-mode", dest="mask_mode", default="union",
                   choices=("union", "target_only"))
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.set_defaults(fn=cmd_synth, sub=p)

    p = sub.add_parser("train", help="train a segmentation model")
    p.add_argument("--data", help="dataset directory (from synth)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output weights path (.cmsw)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    p.add_argument("--holdout-frac", dest="holdout_frac", type=float, default=0.1)
    p.add_argument("--width-multiplier", dest="width_multiplier", type=float,
                   default=0.25)
    p.add_argument("--input-size", dest="input_size", default="",
                   help="expected HxW, validated against the dataset")
    p.add_argument("--no-cor", dest="no_cor", action="store_true",
                   help="ablation: disable the correlation branch")
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.set_defaults(fn=cmd_train, sub=p)

    p = sub.add_parser("infer", help="predict masks and overlays")
    p.add_argument("--weights")
    p.add_argument("--input", help="image file or directory")
    p.add_argument("--out-mask", dest="out_mask")
    p.add_argument("--out-overlay", dest="out_overlay", default="")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.set_defaults(fn=cmd_infer, sub=p)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", help="directory of predicted masks")
    p.add_argument("--gt", help="directory of ground-truth masks")
    p.add_argument("--report", help="output JSON report path")
    p.add_argument("--f1-threshold", dest="f1_threshold", type=float, default=0.5)
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.set_defaults(fn=cmd_eval, sub=p)

    p = sub.add_parser("verify", help="run the self-check suite")
    p.set_defaults(fn=cmd_verify, sub=p)
    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args, getattr(args, "sub", parser))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
