"""Training loop: Adam on bce+dice, seeded shuffling, holdout mean-F1 logging.

Single-threaded and deterministic for a fixed seed: batches, init and every
update depend only on (dataset, seed).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from . import losses, model, synth
from . import tensor as T
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {value}")
        self.epoch, self.step = epoch, step


class Adam:
    """Adam with bias correction; lr 0 leaves parameters bit-identical."""

    def __init__(self, params: Dict[str, Tensor], lr=1e-3, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.names = model.trainable_names(params)
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (self.lr * (m / c1)
                       / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].zero_grad()


def load_image_01(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_mask_01(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr > 127).astype(np.float32)[None]


@dataclass
class Dataset:
    images: np.ndarray  # (N,3,H,W) float32 in [0,1]
    masks: np.ndarray   # (N,1,H,W) float32 {0,1}
    names: List[str]

    def __len__(self):
        return len(self.names)


def load_dataset(data_dir) -> Dataset:
    """Load a synthesized dataset directory (manifest.jsonl + images/masks)."""
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    images, masks, names = [], [], []
    for rec in synth.read_manifest(manifest):
        if rec.get("skipped"):
            continue
        images.append(load_image_01(root / rec["image_path"]))
        masks.append(load_mask_01(root / rec["mask_path"]))
        names.append(rec["id"])
    if not names:
        raise ValueError(f"{manifest}: no usable records")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"dataset images disagree on shape: {sorted(shapes)}")
    return Dataset(images=np.stack(images), masks=np.stack(masks), names=names)


def holdout_mean_f1(params, cfg, data: Dataset, idx, batch_size=4) -> float:
    scores = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        img = T.tensor(data.images[chunk])
        pred = model.predict_mask(img, params, cfg)
        for j, di in enumerate(chunk):
            c = losses.metrics(pred.data[j], data.masks[di])
            scores.append(c.f1)
    return float(np.mean(scores)) if scores else float("nan")


def recalibrate_bn_stats(params, cfg, data: Dataset, idx, batch_size=4,
                         max_batches=12) -> None:
    """Replace batchnorm running buffers with the plain average of batch
    statistics over training batches (batch-4 EMA estimates are noisy)."""
    from . import encoder

    saved = encoder.BN_MOMENTUM
    try:
        for i, start in enumerate(range(0, min(len(idx), max_batches * batch_size),
                                        batch_size), start=1):
            chunk = idx[start:start + batch_size]
            if len(chunk) == 0:
                break
            encoder.BN_MOMENTUM = 1.0 / i  # running arithmetic mean
            model.forward(T.tensor(data.images[chunk]), params, cfg, train=True)
    finally:
        encoder.BN_MOMENTUM = saved


@dataclass
class TrainResult:
    weights_path: Optional[Path]
    log_path: Optional[Path]
    epochs: List[dict]
    final_holdout_f1: float


def train(data: Dataset, cfg: model.ModelConfig, epochs: int, lr: float,
          seed: int, out_path=None, log_path=None, batch_size: int = 4,
          holdout_frac: float = 0.1,
          params: Optional[Dict[str, Tensor]] = None,
          augment_flips: bool = True, lr_schedule: str = "cosine",
          on_epoch=None) -> TrainResult:
    """Train on `data`, holding out a seeded fraction for mean-F1 tracking.

    `augment_flips` mirrors batches horizontally/vertically (mask too) on
    seeded draws; `lr_schedule` is "cosine" (decay to lr/10) or "constant".
    """
    if params is None:
        params = model.init_params(cfg)
    if lr_schedule not in ("cosine", "constant"):
        raise ValueError("lr_schedule must be 'cosine' or 'constant'")
    rng = np.random.default_rng(np.random.PCG64([seed, 0xA11]))
    order = rng.permutation(len(data))
    n_hold = int(round(holdout_frac * len(data))) if holdout_frac > 0 else 0
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    if len(train_idx) == 0:
        raise ValueError("holdout fraction leaves no training samples")

    opt = Adam(params, lr=lr)
    log_rows = []
    final_f1 = float("nan")
    for epoch in range(1, epochs + 1):
        t0 = time.time()
        if lr_schedule == "cosine":
            frac = (epoch - 1) / max(1, epochs - 1)
            opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        perm = rng.permutation(len(train_idx))
        epoch_losses = []
        for step, start in enumerate(range(0, len(perm), batch_size)):
            chunk = train_idx[perm[start:start + batch_size]]
            imgs = data.images[chunk]
            gts = data.masks[chunk]
            if augment_flips:
                if rng.integers(2):
                    imgs, gts = imgs[:, :, :, ::-1], gts[:, :, :, ::-1]
                if rng.integers(2):
                    imgs, gts = imgs[:, :, ::-1, :], gts[:, :, ::-1, :]
                quarter = int(rng.integers(4))
                if quarter and imgs.shape[2] == imgs.shape[3]:
                    imgs = np.rot90(imgs, quarter, axes=(2, 3))
                    gts = np.rot90(gts, quarter, axes=(2, 3))
            img = T.tensor(np.ascontiguousarray(imgs))
            gt = T.tensor(np.ascontiguousarray(gts))
            prob = model.forward(img, params, cfg, train=True)
            loss = losses.total_loss(prob, gt)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step, value)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            epoch_losses.append(value)
        row = {"epoch": epoch,
               "mean_loss": float(np.mean(epoch_losses)),
               "seconds": round(time.time() - t0, 3)}
        if n_hold:
            final_f1 = holdout_mean_f1(params, cfg, data, hold_idx, batch_size)
            row["holdout_mf1"] = final_f1
        log_rows.append(row)
        if on_epoch is not None:
            on_epoch(row)

    recalibrate_bn_stats(params, cfg, data, train_idx, batch_size)
    if n_hold:
        final_f1 = holdout_mean_f1(params, cfg, data, hold_idx, batch_size)
        if log_rows:
            log_rows[-1]["holdout_mf1"] = final_f1

    if out_path is not None:
        model.save_model(out_path, params, cfg)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")
    return TrainResult(weights_path=Path(out_path) if out_path else None,
                       log_path=Path(log_path) if log_path else None,
                       epochs=log_rows, final_holdout_f1=final_f1)
