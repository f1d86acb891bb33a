"""Toy source images for desk-scale experiments: textured backgrounds with
several geometric shapes, one of which is designated as the copyable object
(bbox + silhouette alpha). Distractor shapes force a detector to rely on
actual duplication rather than shape-ness.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image, ImageDraw

from .synth import SourceSpec, save_png


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of random low-frequency waves per channel plus pixel noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3), dtype=np.float64)
    for c in range(3):
        base = rng.uniform(60, 180)
        img[:, :, c] = base
        for _ in range(3):
            fx, fy = rng.uniform(1.0, 5.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(10, 35)
            img[:, :, c] += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img += rng.normal(0, 6.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, box, color) -> None:
    if kind == "ellipse":
        draw.ellipse(box, fill=color)
    elif kind == "rect":
        draw.rectangle(box, fill=color)
    else:
        x0, y0, x1, y1 = box
        draw.polygon([(x0, y1), ((x0 + x1) // 2, y0), (x1, y1)], fill=color)


def _shape_silhouette(kind: str, w: int, h: int) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    _draw_shape(ImageDraw.Draw(im), kind, (0, 0, w - 1, h - 1), 255)
    return np.asarray(im, dtype=np.uint8)


def _textured_fill(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Distinctive per-shape fill: base color plus oriented waves and speckle.
    Flat fills would make every shape interior correlate with every other
    smooth region; texture keeps duplicated interiors uniquely matchable."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fill = np.zeros((h, w, 3), dtype=np.float64)
    for c in range(3):
        base = rng.uniform(40, 215)
        fx, fy = rng.uniform(0.08, 0.35, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(20, 45)
        fill[:, :, c] = base + amp * np.sin(fx * xx + fy * yy + phase)
    fill += rng.normal(0, 12.0, size=fill.shape)
    return np.clip(fill, 0, 255).astype(np.uint8)


def make_toy_sources(out_dir, count: int, seed: int, size: int = 128) -> Path:
    """Write `count` source images + object alphas and a sources.json
    manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    kinds = ("ellipse", "rect", "triangle")
    for i in range(count):
        rng = np.random.default_rng(np.random.PCG64([seed, i]))
        canvas = _textured_background(rng, size)

        n_shapes = int(rng.integers(3, 6))
        last = None
        for s in range(n_shapes):
            w = int(rng.integers(34, 57))
            h = int(rng.integers(34, 57))
            x = int(rng.integers(2, size - w - 2))
            y = int(rng.integers(2, size - h - 2))
            kind = kinds[int(rng.integers(len(kinds)))]
            sil = _shape_silhouette(kind, w, h)
            fill = _textured_fill(rng, w, h)
            region = canvas[y:y + h, x:x + w]
            region[sil > 127] = fill[sil > 127]
            last = (x, y, w, h, sil)

        # the last-drawn shape is fully visible; it becomes the object
        x, y, w, h, sil = last
        bbox = (x, y, w, h)

        img_name = f"src_{i:04d}.png"
        alpha_name = f"src_{i:04d}_alpha.png"
        save_png(canvas, out / img_name)
        save_png(sil, out / alpha_name)
        entries.append({"image": img_name, "bbox": list(bbox),
                        "alpha": alpha_name})

    manifest = out / "sources.json"
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)
    return manifest


def toy_sources(out_dir, count: int, seed: int, size: int = 128) -> List[SourceSpec]:
    """Convenience wrapper returning SourceSpec objects directly."""
    from .synth import load_sources
    return load_sources(make_toy_sources(out_dir, count, seed, size=size))
