"""Copy-move forgery synthesizer.

Pipeline per sample: crop an object by bounding box (with an optional alpha
silhouette), geometrically transform patch and alpha together (mirror, then
rotate, then scale; bilinear), paste at a random position by replacing pixels
where the transformed alpha exceeds 127, and emit the forged image plus a
{0,255} ground-truth mask marking the duplicated regions. Photometric
attacks (BC/CA/CR/IB/JC/NA) perturb the finished image and never touch the
mask; geometric attacks (Ro/Sc/SR/MIR) are patch transforms.

Generation is deterministic: every sample derives its own RNG from
(dataset seed, sample index), so outputs are independent of generation
order. Gaussian noise uses an explicit integer-lattice Box-Muller transform
on that RNG rather than a library sampler.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageFilter

ALPHA_THRESHOLD = 127  # alpha > 127 counts as object
PLACEMENT_TRIES = 100

PHOTOMETRIC_KINDS = ("BC", "CA", "CR", "IB", "JC", "NA")
GEOMETRIC_KINDS = ("Ro", "Sc", "SR", "MIR")

BC_DELTAS = {1: 10, 2: 20, 3: 30, 4: -10, 5: -20, 6: -30}
CA_FACTORS = {1: 0.8, 2: 0.6, 3: 0.4}
CR_LEVELS = {1: 128, 2: 64, 3: 32}
IB_RADII = {1: 1, 2: 2, 3: 3}
JC_QUALITY = {i: 100 - 10 * i for i in range(1, 10)}
NA_SIGMAS = {1: 2.0, 2: 5.0, 3: 10.0}
RO_ANGLES = {1: 2.0, 2: 6.0, 3: 10.0, 4: 30.0, 5: 60.0}
SC_FACTORS = {1: 0.5, 2: 0.8, 3: 0.91, 4: 1.09, 5: 1.25}

_LEVELS = {
    "none": {0: None},
    "BC": BC_DELTAS, "CA": CA_FACTORS, "CR": CR_LEVELS, "IB": IB_RADII,
    "JC": JC_QUALITY, "NA": NA_SIGMAS,
    "Ro": RO_ANGLES, "Sc": SC_FACTORS, "SR": SC_FACTORS, "MIR": {1: True},
}


class SynthError(ValueError):
    pass


@dataclass
class AttackSpec:
    kind: str = "none"
    level: int = 0

    def __post_init__(self):
        if self.kind not in _LEVELS:
            raise SynthError(f"unknown attack kind {self.kind!r}")
        if self.level not in _LEVELS[self.kind]:
            raise SynthError(
                f"level {self.level} invalid for {self.kind} "
                f"(valid: {sorted(_LEVELS[self.kind])})")

    @property
    def is_geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level}

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """'JC:9' -> AttackSpec('JC', 9); bare 'none' allowed."""
        text = text.strip()
        if text == "none":
            return cls()
        if ":" not in text:
            raise SynthError(f"attack must look like KIND:LEVEL, got {text!r}")
        kind, level = text.split(":", 1)
        return cls(kind=kind.strip(), level=int(level))


@dataclass
class SourceSpec:
    image_path: str
    bbox: Tuple[int, int, int, int]  # x, y, w, h
    alpha_path: Optional[str] = None


@dataclass
class Transform:
    angle: float = 0.0
    scale: float = 1.0
    mirror: bool = False

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and self.scale == 1.0 and not self.mirror

    def to_dict(self) -> dict:
        return {"angle": self.angle, "scale": self.scale, "mirror": self.mirror}


@dataclass
class SampleRecord:
    id: str
    image_path: str
    mask_path: str
    source_bbox: Tuple[int, int, int, int]
    target_bbox: Tuple[int, int, int, int]
    transform: Transform
    attack: AttackSpec
    seed: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "source_bbox": list(self.source_bbox),
            "target_bbox": list(self.target_bbox),
            "transform": self.transform.to_dict(),
            "attack": self.attack.to_dict(),
            "seed": self.seed,
        }


def sample_seed(seed: int, index: int) -> int:
    """splitmix64-style mix so per-sample streams are order-independent."""
    mask = (1 << 64) - 1
    x = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & mask
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & mask
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & mask
    x ^= x >> 31
    return x


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def extract_object(src: SourceSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Crop the bbox patch and its alpha (all-opaque when no mask supplied)."""
    image = load_rgb(src.image_path)
    ih, iw = image.shape[:2]
    x, y, w, h = src.bbox
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > iw or y + h > ih:
        raise SynthError(f"bbox {src.bbox} outside {iw}x{ih} image "
                         f"{src.image_path}")
    patch = image[y:y + h, x:x + w].copy()
    if src.alpha_path is None:
        alpha = np.full((h, w), 255, dtype=np.uint8)
    else:
        with Image.open(src.alpha_path) as am:
            alpha = np.asarray(am.convert("L"), dtype=np.uint8)
        if alpha.shape != (h, w):
            raise SynthError(
                f"alpha {alpha.shape} does not match bbox {h}x{w} for "
                f"{src.alpha_path}")
    return patch, alpha


def transform_patch(patch: np.ndarray, alpha: np.ndarray,
                    t: Transform) -> Tuple[np.ndarray, np.ndarray]:
    """mirror -> rotate (bilinear, expanded canvas) -> scale, patch and alpha
    transformed identically."""
    pim = Image.fromarray(patch)
    aim = Image.fromarray(alpha)
    if t.mirror:
        pim = pim.transpose(Image.FLIP_LEFT_RIGHT)
        aim = aim.transpose(Image.FLIP_LEFT_RIGHT)
    if t.angle:
        pim = pim.rotate(t.angle, resample=Image.BILINEAR, expand=True)
        aim = aim.rotate(t.angle, resample=Image.BILINEAR, expand=True)
    if t.scale != 1.0:
        nw = max(1, round(pim.width * t.scale))
        nh = max(1, round(pim.height * t.scale))
        pim = pim.resize((nw, nh), resample=Image.BILINEAR)
        aim = aim.resize((nw, nh), resample=Image.BILINEAR)
    return np.asarray(pim, dtype=np.uint8), np.asarray(aim, dtype=np.uint8)


def composite(image: np.ndarray, patch: np.ndarray, alpha: np.ndarray,
              source_bbox: Tuple[int, int, int, int],
              position: Tuple[int, int], t: Transform,
              mask_mode: str = "union") -> Tuple[np.ndarray, np.ndarray]:
    """Paste the transformed patch; return (forged image, {0,255} gt mask).

    The mask marks the target footprint plus (in union mode) the source
    footprint. The transformed patch must fit entirely inside the image.
    """
    if mask_mode not in ("union", "target_only"):
        raise SynthError(f"mask_mode must be union|target_only, got {mask_mode!r}")
    ih, iw = image.shape[:2]
    tp, ta = transform_patch(patch, alpha, t)
    ph, pw = ta.shape
    x, y = position
    if x < 0 or y < 0 or x + pw > iw or y + ph > ih:
        raise SynthError(
            f"placement ({x},{y}) of {pw}x{ph} patch outside {iw}x{ih} image")
    target_fp = ta > ALPHA_THRESHOLD
    if not target_fp.any():
        raise SynthError("transformed footprint is empty")
    forged = image.copy()
    region = forged[y:y + ph, x:x + pw]
    region[target_fp] = tp[target_fp]
    mask = np.zeros((ih, iw), dtype=np.uint8)
    mask[y:y + ph, x:x + pw][target_fp] = 255
    if mask_mode == "union":
        sx, sy, sw, sh = source_bbox
        mask[sy:sy + sh, sx:sx + sw][alpha > ALPHA_THRESHOLD] = 255
    return forged, mask


def _box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Gaussian draws from two u32 lattices: (k + 0.5) / 2^32 uniforms."""
    count = int(np.prod(shape))
    u1 = (rng.integers(0, 2 ** 32, size=count, dtype=np.uint64) + 0.5) / 2 ** 32
    u2 = (rng.integers(0, 2 ** 32, size=count, dtype=np.uint64) + 0.5) / 2 ** 32
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return z.reshape(shape)


def apply_attack(image: np.ndarray, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Photometric attacks on the composited image; geometric kinds are
    patch-level (already realized inside composite) and pass through."""
    if spec.kind == "none" or spec.is_geometric:
        return image
    if spec.kind == "BC":
        delta = BC_DELTAS[spec.level]
        return np.clip(image.astype(np.int16) + delta, 0, 255).astype(np.uint8)
    if spec.kind == "CA":
        f = CA_FACTORS[spec.level]
        mean = image.astype(np.float64).mean(axis=(0, 1), keepdims=True)
        out = mean + (image.astype(np.float64) - mean) * f
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if spec.kind == "CR":
        step = 256 // CR_LEVELS[spec.level]
        return (image // step * step).astype(np.uint8)
    if spec.kind == "IB":
        radius = IB_RADII[spec.level]
        im = Image.fromarray(image).filter(ImageFilter.BoxBlur(radius))
        return np.asarray(im, dtype=np.uint8)
    if spec.kind == "JC":
        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="JPEG",
                                    quality=JC_QUALITY[spec.level])
        buf.seek(0)
        with Image.open(buf) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    if spec.kind == "NA":
        sigma = NA_SIGMAS[spec.level]
        rng = np.random.default_rng(np.random.PCG64(seed))
        noise = _box_muller(rng, image.shape) * sigma
        return np.clip(np.rint(image.astype(np.float64) + noise),
                       0, 255).astype(np.uint8)
    raise SynthError(f"unhandled attack kind {spec.kind!r}")


def attack_transform(spec: AttackSpec, rng: np.random.Generator) -> Transform:
    """Patch transform realizing a geometric attack (identity otherwise).
    Ro/Sc/SR levels index fixed tables; the rotation sign is a seeded draw."""
    if spec.kind == "Ro":
        sign = 1.0 if rng.integers(2) else -1.0
        return Transform(angle=sign * RO_ANGLES[spec.level])
    if spec.kind == "Sc":
        return Transform(scale=SC_FACTORS[spec.level])
    if spec.kind == "SR":
        sign = 1.0 if rng.integers(2) else -1.0
        return Transform(angle=sign * RO_ANGLES[spec.level],
                         scale=SC_FACTORS[spec.level])
    if spec.kind == "MIR":
        return Transform(mirror=True)
    return Transform()


def load_sources(path) -> List[SourceSpec]:
    """Sources manifest: JSON list of {image, bbox [x,y,w,h], alpha?}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise SynthError(f"{path}: sources manifest must be a nonempty list")
    base = Path(path).parent
    sources = []
    for i, ent in enumerate(raw):
        try:
            image = ent["image"]
            bbox = tuple(int(v) for v in ent["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SynthError(f"{path}: bad source entry {i}: {exc}") from None
        alpha = ent.get("alpha")
        sources.append(SourceSpec(
            image_path=str(base / image),
            bbox=bbox,
            alpha_path=str(base / alpha) if alpha else None))
    return sources


def generate_dataset(sources: Sequence[SourceSpec], count: int, seed: int,
                     out_dir, attack_menu: Optional[Sequence[AttackSpec]] = None,
                     mask_mode: str = "union") -> Path:
    """Synthesize `count` forgeries; returns the manifest path.

    Layout: out_dir/images/NNNNNN.{png|jpg}, out_dir/masks/NNNNNN.png and
    out_dir/manifest.jsonl with one record per line (skipped samples carry
    a "skipped" reason instead of paths).
    """
    if count < 1:
        raise SynthError("count must be >= 1")
    if not sources:
        raise SynthError("sources must be nonempty")
    menu = list(attack_menu) if attack_menu else [AttackSpec()]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    image_cache: Dict[str, np.ndarray] = {}
    records = []
    for i in range(count):
        sseed = sample_seed(seed, i)
        rng = np.random.default_rng(np.random.PCG64(sseed))
        src = sources[int(rng.integers(len(sources)))]
        attack = menu[int(rng.integers(len(menu)))]
        rec = _generate_one(i, src, attack, rng, sseed, out, mask_mode,
                            image_cache)
        records.append(rec)

    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def _generate_one(index, src, attack, rng, sseed, out, mask_mode, cache):
    sid = f"{index:06d}"

    def skip(reason):
        return {"id": sid, "skipped": True, "reason": reason, "seed": sseed}

    try:
        if src.image_path not in cache:
            cache[src.image_path] = load_rgb(src.image_path)
        image = cache[src.image_path]
        x, y, w, h = src.bbox
        patch = image[y:y + h, x:x + w].copy()
        if src.alpha_path is None:
            alpha = np.full((h, w), 255, dtype=np.uint8)
        else:
            with Image.open(src.alpha_path) as am:
                alpha = np.asarray(am.convert("L"), dtype=np.uint8)
            if alpha.shape != (h, w):
                raise SynthError("alpha dims do not match bbox")
    except (OSError, SynthError) as exc:
        return skip(str(exc))

    if not (alpha > ALPHA_THRESHOLD).any():
        return skip("alpha footprint empty")

    t = attack_transform(attack, rng)
    tp, ta = transform_patch(patch, alpha, t)
    ph, pw = ta.shape
    ih, iw = image.shape[:2]
    if not (ta > ALPHA_THRESHOLD).any():
        return skip("transformed footprint empty")

    placed = None
    for _ in range(PLACEMENT_TRIES):
        if pw > iw or ph > ih:
            break
        px = int(rng.integers(0, iw - pw + 1))
        py = int(rng.integers(0, ih - ph + 1))
        placed = (px, py)
        break
    if placed is None:
        return skip(f"no valid placement for {pw}x{ph} patch in {iw}x{ih}")

    forged, mask = composite(image, patch, alpha, src.bbox, placed, t,
                             mask_mode=mask_mode)

    ext = "jpg" if attack.kind == "JC" else "png"
    image_rel = f"images/{sid}.{ext}"
    mask_rel = f"masks/{sid}.png"
    if attack.kind == "JC":
        # the stored lossy file realizes the attack; no second compression
        Image.fromarray(forged).save(out / image_rel, format="JPEG",
                                     quality=JC_QUALITY[attack.level])
    else:
        forged = apply_attack(forged, attack, seed=sample_seed(sseed, 1))
        save_png(forged, out / image_rel)
    save_png(mask, out / mask_rel)

    return SampleRecord(
        id=sid, image_path=image_rel, mask_path=mask_rel,
        source_bbox=src.bbox, target_bbox=(placed[0], placed[1], pw, ph),
        transform=t, attack=attack, seed=sseed).to_dict()


def read_manifest(path) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
