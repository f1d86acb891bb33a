"""Training losses (binary cross-entropy + Dice) and evaluation metrics.

Rates follow the usual confusion-matrix definitions with explicit 0/0
conventions: precision/recall/specificity are 1 when their denominator is
empty (nothing to get wrong), F1 is 1 iff both masks are empty. Mean scores
are image-macro averages; the detection count uses strict F1 > threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1.0


def bce_loss(prob: Tensor, gt: Tensor) -> Tensor:
    """Mean over pixels of -[g*log p + (1-g)*log(1-p)], p clamped to
    [1e-7, 1-1e-7]."""
    if prob.shape != gt.shape:
        raise T.ShapeError(f"bce_loss shape mismatch: {prob.shape} vs {gt.shape}")
    p = T.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = T.mul(gt, T.log(p))
    neg = T.mul(T.sub(1.0, gt), T.log(T.sub(1.0, p)))
    return T.neg(T.mean_all(T.add(pos, neg)))


def dice_loss(prob: Tensor, gt: Tensor) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), eps = 1."""
    if prob.shape != gt.shape:
        raise T.ShapeError(f"dice_loss shape mismatch: {prob.shape} vs {gt.shape}")
    inter = T.sum_all(T.mul(prob, gt))
    denom = T.add(T.add(T.sum_all(prob), T.sum_all(gt)), DICE_EPS)
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), DICE_EPS), denom))


def total_loss(prob: Tensor, gt: Tensor) -> Tensor:
    """bce + dice, weighted 1:1."""
    return T.add(bce_loss(prob, gt), dice_loss(prob, gt))


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 1.0

    @property
    def f1(self) -> float:
        if self.tp == 0 and self.fp == 0 and self.fn == 0:
            return 1.0  # both masks empty
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    def rates(self) -> Dict[str, float]:
        return {"f1": self.f1, "iou": self.iou, "precision": self.precision,
                "recall": self.recall, "specificity": self.specificity}


def _as_binary(mask) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    arr = arr.astype(np.float32)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("metrics expect binary {0,1} masks")
    return arr.reshape(-1) > 0.5


def metrics(pred_mask, gt_mask) -> Confusion:
    """Pixel confusion between two binary masks of identical shape."""
    p = pred_mask.data if isinstance(pred_mask, Tensor) else np.asarray(pred_mask)
    g = gt_mask.data if isinstance(gt_mask, Tensor) else np.asarray(gt_mask)
    if p.shape != g.shape:
        raise T.ShapeError(f"metrics shape mismatch: {p.shape} vs {g.shape}")
    pb, gb = _as_binary(p), _as_binary(g)
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    return Confusion(tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass
class ImageReport:
    name: str
    f1: float
    iou: float
    precision: float
    recall: float
    specificity: float

    @classmethod
    def from_confusion(cls, name: str, c: Confusion) -> "ImageReport":
        return cls(name=name, **c.rates())


@dataclass
class EvalReport:
    """Per-image rates plus macro means and the strict-F1 detection count."""
    images: List[ImageReport]
    f1_threshold: float = 0.5

    def mean(self, attr: str) -> float:
        if not self.images:
            return 0.0
        return float(np.mean([getattr(r, attr) for r in self.images]))

    @property
    def detected_count(self) -> int:
        return detection_count([r.f1 for r in self.images], self.f1_threshold)

    def to_dict(self) -> dict:
        return {
            "images": [vars(r) for r in self.images],
            "image_count": len(self.images),
            "mean_f1": self.mean("f1"),
            "mean_iou": self.mean("iou"),
            "mean_precision": self.mean("precision"),
            "mean_recall": self.mean("recall"),
            "mean_specificity": self.mean("specificity"),
            "detected_count": self.detected_count,
            "f1_threshold": self.f1_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def detection_count(f1_scores: Sequence[float], f1_threshold: float = 0.5) -> int:
    """Count of images whose F1 strictly exceeds the threshold."""
    return sum(1 for f in f1_scores if f > f1_threshold)


def evaluate_pairs(pairs, f1_threshold: float = 0.5) -> EvalReport:
    """pairs: iterable of (name, pred_mask, gt_mask) binary arrays."""
    rows = [ImageReport.from_confusion(name, metrics(p, g))
            for name, p, g in pairs]
    return EvalReport(images=rows, f1_threshold=f1_threshold)
