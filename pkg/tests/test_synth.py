import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cmseg import synth, toydata
from cmseg.synth import AttackSpec, SourceSpec, Transform


@pytest.fixture(scope="module")
def source_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    toydata.make_toy_sources(d, count=6, seed=11, size=128)
    return d


@pytest.fixture(scope="module")
def sources(source_dir):
    return synth.load_sources(source_dir / "sources.json")


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --- extract_object -------------------------------------------------------------

def test_extract_full_image_no_mask(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (20, 30, 3)).astype(np.uint8)
    path = tmp_path / "img.png"
    synth.save_png(arr, path)
    patch, alpha = synth.extract_object(
        SourceSpec(image_path=str(path), bbox=(0, 0, 30, 20)))
    assert np.array_equal(patch, arr)
    assert (alpha == 255).all()


def test_extract_bbox_out_of_bounds(tmp_path):
    arr = np.zeros((10, 10, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    synth.save_png(arr, path)
    with pytest.raises(synth.SynthError):
        synth.extract_object(SourceSpec(image_path=str(path), bbox=(5, 5, 10, 10)))


def test_checkerboard_alpha_composites_only_opaque(tmp_path):
    rng = np.random.default_rng(1)
    image = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
    patch = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    alpha = np.zeros((8, 8), dtype=np.uint8)
    alpha[::2, ::2] = 255
    forged, mask = synth.composite(image, patch, alpha, (0, 0, 8, 8),
                                   (20, 20), Transform(), mask_mode="target_only")
    changed = np.argwhere((forged != image).any(axis=2))
    for (r, c) in changed:
        assert alpha[r - 20, c - 20] > 127
    assert np.array_equal(mask[20:28, 20:28] > 0, alpha > 127)


# --- composite -------------------------------------------------------------------

def test_self_paste_identity():
    rng = np.random.default_rng(2)
    image = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
    bbox = (4, 6, 10, 8)
    x, y, w, h = bbox
    patch = image[y:y + h, x:x + w].copy()
    alpha = np.full((h, w), 255, dtype=np.uint8)
    forged, mask = synth.composite(image, patch, alpha, bbox, (x, y), Transform())
    assert np.array_equal(forged, image)
    expect = np.zeros((32, 32), dtype=np.uint8)
    expect[y:y + h, x:x + w] = 255
    assert np.array_equal(mask, expect)


def test_opaque_patch_pixel_counts():
    rng = np.random.default_rng(3)
    image = rng.integers(0, 256, (80, 80, 3)).astype(np.uint8)
    bbox = (0, 0, 10, 10)
    patch = image[0:10, 0:10].copy()
    alpha = np.full((10, 10), 255, dtype=np.uint8)
    forged, mask = synth.composite(image, patch, alpha, bbox, (50, 60), Transform())
    diff = (forged != image).any(axis=2)
    assert diff[60:70, 50:60].sum() == diff.sum()  # changes confined to target
    # union mask = source 100 px + target 100 px, disjoint here
    assert (mask > 0).sum() == 200


def test_mirror_transform_footprint():
    rng = np.random.default_rng(4)
    image = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
    patch = rng.integers(0, 256, (6, 9, 3)).astype(np.uint8)
    alpha = np.zeros((6, 9), dtype=np.uint8)
    alpha[:, :4] = 255  # asymmetric footprint
    t = Transform(mirror=True)
    forged, mask = synth.composite(image, patch, alpha, (0, 0, 9, 6),
                                   (10, 10), t, mask_mode="target_only")
    expect = np.fliplr(alpha) > 127
    assert np.array_equal(mask[10:16, 10:19] > 0, expect)


def test_composite_out_of_bounds_and_empty():
    image = np.zeros((20, 20, 3), dtype=np.uint8)
    patch = np.zeros((8, 8, 3), dtype=np.uint8)
    opaque = np.full((8, 8), 255, dtype=np.uint8)
    with pytest.raises(synth.SynthError):
        synth.composite(image, patch, opaque, (0, 0, 8, 8), (15, 15), Transform())
    with pytest.raises(synth.SynthError):
        synth.composite(image, patch, np.zeros((8, 8), np.uint8),
                        (0, 0, 8, 8), (5, 5), Transform())


# --- attacks ---------------------------------------------------------------------

def rand_image(seed, size=48):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(np.uint8)


def test_attack_none_identity():
    img = rand_image(5)
    assert np.array_equal(synth.apply_attack(img, AttackSpec()), img)


def test_attack_cr_fixpoint():
    img = rand_image(6)
    once = synth.apply_attack(img, AttackSpec("CR", 1))
    twice = synth.apply_attack(once, AttackSpec("CR", 1))
    assert np.array_equal(once, twice)


def test_attack_jc_roundtrip():
    img = rand_image(7)
    out = synth.apply_attack(img, AttackSpec("JC", 9))
    assert out.shape == img.shape
    assert not np.array_equal(out, img)


def test_attack_bc_clips():
    img = np.full((8, 8, 3), 250, dtype=np.uint8)
    out = synth.apply_attack(img, AttackSpec("BC", 3))
    assert (out == 255).all()
    dark = synth.apply_attack(np.full((8, 8, 3), 5, dtype=np.uint8),
                              AttackSpec("BC", 6))
    assert (dark == 0).all()


def test_attack_na_seeded_deterministic():
    img = rand_image(8)
    a = synth.apply_attack(img, AttackSpec("NA", 2), seed=42)
    b = synth.apply_attack(img, AttackSpec("NA", 2), seed=42)
    c = synth.apply_attack(img, AttackSpec("NA", 2), seed=43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_attack_invalid_level():
    with pytest.raises(synth.SynthError):
        AttackSpec("BC", 9)
    with pytest.raises(synth.SynthError):
        AttackSpec("XX", 1)


def test_attack_parse():
    spec = AttackSpec.parse("JC:9")
    assert spec.kind == "JC" and spec.level == 9
    assert AttackSpec.parse("none").kind == "none"
    with pytest.raises(synth.SynthError):
        AttackSpec.parse("JC9")


def test_geometric_attacks_route_through_transform():
    rng = np.random.default_rng(9)
    t = synth.attack_transform(AttackSpec("Sc", 1), rng)
    assert t.scale == 0.5 and t.angle == 0.0
    t = synth.attack_transform(AttackSpec("MIR", 1), rng)
    assert t.mirror
    t = synth.attack_transform(AttackSpec("SR", 3), rng)
    assert t.scale == 0.91 and abs(t.angle) == 10.0
    img = rand_image(10)
    assert np.array_equal(synth.apply_attack(img, AttackSpec("Ro", 2)), img)


# --- generate_dataset --------------------------------------------------------------

def test_generate_deterministic_tree(tmp_path, sources):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    menu = [AttackSpec("Ro", 2), AttackSpec("MIR", 1), AttackSpec()]
    synth.generate_dataset(sources, count=8, seed=7, out_dir=d1, attack_menu=menu)
    synth.generate_dataset(sources, count=8, seed=7, out_dir=d2, attack_menu=menu)
    assert tree_digest(d1) == tree_digest(d2)
    d3 = tmp_path / "c"
    synth.generate_dataset(sources, count=8, seed=8, out_dir=d3, attack_menu=menu)
    assert tree_digest(d1) != tree_digest(d3)


def test_generate_masks_nonempty_and_binary(tmp_path, sources):
    out = tmp_path / "ds"
    manifest = synth.generate_dataset(sources, count=10, seed=3, out_dir=out)
    records = synth.read_manifest(manifest)
    assert len(records) == 10
    for rec in records:
        assert not rec.get("skipped"), rec
        mask = np.asarray(Image.open(out / rec["mask_path"]))
        assert set(np.unique(mask)).issubset({0, 255})
        assert (mask == 255).sum() > 0
        assert set(rec) == {"id", "image_path", "mask_path", "source_bbox",
                            "target_bbox", "transform", "attack", "seed"}


def test_photometric_attacks_preserve_masks(tmp_path, sources):
    base = synth.generate_dataset(sources, count=5, seed=21,
                                  out_dir=tmp_path / "plain")
    plain = synth.read_manifest(base)
    for kind, levels in (("BC", (1, 4)), ("CA", (2,)), ("CR", (3,)),
                         ("IB", (1,)), ("JC", (5,)), ("NA", (2,))):
        for level in levels:
            out = tmp_path / f"{kind}{level}"
            man = synth.generate_dataset(
                sources, count=5, seed=21, out_dir=out,
                attack_menu=[AttackSpec(kind, level)])
            for prec, arec in zip(plain, synth.read_manifest(man)):
                a = (tmp_path / "plain" / prec["mask_path"]).read_bytes()
                b = (out / arec["mask_path"]).read_bytes()
                assert a == b, (kind, level)


def test_mask_union_vs_target_only(tmp_path, sources):
    u = synth.generate_dataset(sources, count=4, seed=5,
                               out_dir=tmp_path / "u", mask_mode="union")
    t = synth.generate_dataset(sources, count=4, seed=5,
                               out_dir=tmp_path / "t", mask_mode="target_only")
    for ru, rt in zip(synth.read_manifest(u), synth.read_manifest(t)):
        mu = np.asarray(Image.open(tmp_path / "u" / ru["mask_path"])) > 0
        mt = np.asarray(Image.open(tmp_path / "t" / rt["mask_path"])) > 0
        assert (mu | mt == mu).all()      # target footprint subset of union
        assert mu.sum() >= mt.sum()


def test_jc_attacked_samples_stored_lossy(tmp_path, sources):
    out = tmp_path / "jc"
    man = synth.generate_dataset(sources, count=3, seed=9, out_dir=out,
                                 attack_menu=[AttackSpec("JC", 9)])
    for rec in synth.read_manifest(man):
        assert rec["image_path"].endswith(".jpg")
        assert rec["attack"] == {"kind": "JC", "level": 9}
        with Image.open(out / rec["image_path"]) as im:
            assert im.format == "JPEG"


def test_sample_seed_mixing_order_independent():
    seeds = {synth.sample_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert synth.sample_seed(7, 3) != synth.sample_seed(8, 3)


def test_sources_manifest_roundtrip(source_dir, sources):
    assert len(sources) == 6
    for s in sources:
        assert Path(s.image_path).exists()
        assert s.alpha_path and Path(s.alpha_path).exists()
