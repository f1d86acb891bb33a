import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cmseg import cli, model, synth, toydata, train
from cmseg import weights as W


def run(argv):
    return cli.main(argv)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    toydata.make_toy_sources(root / "src", count=5, seed=3, size=64)
    return root


@pytest.fixture(scope="module")
def dataset(toy):
    out = toy / "ds"
    rc = run(["synth", "--sources", str(toy / "src" / "sources.json"),
              "--count", "10", "--seed", "7", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def weights_path(toy, dataset):
    import time
    out = toy / "model.cmsw"
    t0 = time.perf_counter()
    rc = run(["train", "--data", str(dataset), "--epochs", "1",
              "--lr", "0.001", "--seed", "3", "--out", str(out),
              "--holdout-frac", "0.2"])
    assert rc == 0
    assert time.perf_counter() - t0 < 300.0  # 1-epoch smoke run stays small
    return out


def test_synth_deterministic(toy, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = run(["synth", "--sources", str(toy / "src" / "sources.json"),
                  "--count", "6", "--seed", "11", "--out", str(out)])
        assert rc == 0
    assert tree_digest(a) == tree_digest(b)


def test_synth_missing_sources(tmp_path, capsys):
    rc = run(["synth", "--sources", str(tmp_path / "nope.json"),
              "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "nope.json" in capsys.readouterr().err


def test_synth_attack_recorded(toy, tmp_path):
    out = tmp_path / "jc"
    rc = run(["synth", "--sources", str(toy / "src" / "sources.json"),
              "--count", "4", "--seed", "2", "--out", str(out),
              "--attacks", "JC:9"])
    assert rc == 0
    for rec in synth.read_manifest(out / "manifest.jsonl"):
        assert rec["attack"] == {"kind": "JC", "level": 9}


def test_train_writes_weights_and_log(weights_path):
    assert weights_path.exists()
    log = weights_path.with_suffix(".log.jsonl")
    rows = [json.loads(l) for l in log.read_text().splitlines()]
    assert rows and {"epoch", "mean_loss", "holdout_mf1"} <= set(rows[0])
    params, cfg = model.load_model(weights_path)
    assert cfg.encoder.input_size == (64, 64)


def test_train_same_seed_bitwise(dataset, tmp_path):
    outs = []
    for name in ("m1.cmsw", "m2.cmsw"):
        out = tmp_path / name
        rc = run(["train", "--data", str(dataset), "--epochs", "1",
                  "--lr", "0.001", "--seed", "5", "--out", str(out)])
        assert rc == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_train_lr_zero_keeps_weights(dataset, tmp_path):
    out = tmp_path / "frozen.cmsw"
    rc = run(["train", "--data", str(dataset), "--epochs", "1",
              "--lr", "0", "--seed", "9", "--out", str(out)])
    assert rc == 0
    params, cfg = model.load_model(out)
    init = model.init_params(cfg)
    # trainable weights bit-identical to init; bn statistics are buffers
    # and do move during a training pass
    for name in model.trainable_names(params):
        assert np.array_equal(params[name].data, init[name].data), name


def test_train_missing_data(tmp_path, capsys):
    rc = run(["train", "--data", str(tmp_path / "none"), "--out",
              str(tmp_path / "w.cmsw")])
    assert rc == 2


def test_infer_masks_and_overlays(weights_path, dataset, tmp_path):
    masks = tmp_path / "masks"
    overlays = tmp_path / "ov"
    rc = run(["infer", "--weights", str(weights_path),
              "--input", str(dataset / "images"),
              "--out-mask", str(masks), "--out-overlay", str(overlays)])
    assert rc == 0
    mask_files = sorted(masks.glob("*.png"))
    assert len(mask_files) == 10
    assert len(sorted(overlays.glob("*.png"))) == 10
    for mf in mask_files:
        vals = set(np.unique(np.asarray(Image.open(mf))))
        assert vals.issubset({0, 255})


def test_infer_threshold_monotone(weights_path, dataset, tmp_path):
    lo, hi = tmp_path / "lo", tmp_path / "hi"
    img = sorted((dataset / "images").glob("*"))[0]
    for thr, out in (("0.1", lo), ("0.9", hi)):
        rc = run(["infer", "--weights", str(weights_path), "--input", str(img),
                  "--out-mask", str(out), "--threshold", thr])
        assert rc == 0
    m_lo = np.asarray(Image.open(next(lo.glob("*.png")))) > 0
    m_hi = np.asarray(Image.open(next(hi.glob("*.png")))) > 0
    assert not (m_hi & ~m_lo).any()


def test_infer_bad_weights(tmp_path, capsys):
    bad = tmp_path / "bad.cmsw"
    bad.write_bytes(b"junk")
    rc = run(["infer", "--weights", str(bad), "--input", str(tmp_path),
              "--out-mask", str(tmp_path / "m")])
    assert rc == 2


def test_eval_identical_dirs(dataset, tmp_path, capsys):
    report = tmp_path / "r.json"
    rc = run(["eval", "--pred", str(dataset / "masks"),
              "--gt", str(dataset / "masks"), "--report", str(report)])
    assert rc == 0
    data = json.loads(report.read_text())
    assert data["mean_f1"] == 1.0
    assert data["detected_count"] == data["image_count"]


def test_eval_no_overlap(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(a / "x.png")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(b / "y.png")
    rc = run(["eval", "--pred", str(a), "--gt", str(b),
              "--report", str(tmp_path / "r.json")])
    assert rc == 1


def test_eval_hand_computed_fixture(tmp_path):
    pred_dir, gt_dir = tmp_path / "p", tmp_path / "g"
    pred_dir.mkdir(), gt_dir.mkdir()
    # image 1: perfect; image 2: pred empty, gt 4 px; image 3: tp=2, fp=2, fn=0
    g1 = np.zeros((8, 8), np.uint8); g1[0:2, 0:2] = 255
    p1 = g1.copy()
    g2 = np.zeros((8, 8), np.uint8); g2[4:6, 4:6] = 255
    p2 = np.zeros((8, 8), np.uint8)
    g3 = np.zeros((8, 8), np.uint8); g3[0, 0:2] = 255
    p3 = np.zeros((8, 8), np.uint8); p3[0, 0:4] = 255
    for name, p, g in (("a", p1, g1), ("b", p2, g2), ("c", p3, g3)):
        Image.fromarray(p).save(pred_dir / f"{name}.png")
        Image.fromarray(g).save(gt_dir / f"{name}.png")
    report = tmp_path / "r.json"
    rc = run(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
              "--report", str(report)])
    assert rc == 0
    data = json.loads(report.read_text())
    by_name = {r["name"]: r for r in data["images"]}
    assert by_name["a"]["f1"] == 1.0
    assert by_name["b"]["f1"] == 0.0 and by_name["b"]["recall"] == 0.0
    assert abs(by_name["c"]["f1"] - 2 * 2 / (2 * 2 + 2 + 0)) < 1e-12
    assert abs(data["mean_f1"] - (1.0 + 0.0 + 2 / 3) / 3) < 1e-12
    assert data["detected_count"] == 2  # f1 of 1.0 and 0.667 exceed 0.5


def test_verify_passes():
    import time
    t0 = time.perf_counter()
    assert run(["verify"]) == 0
    assert time.perf_counter() - t0 < 600.0  # release gate stays under 10 min


def test_verify_names_injected_failure(monkeypatch, capsys):
    from cmseg import cosa, verify

    orig = cosa.suppression_matrix

    def flipped(h, w, gamma):
        t = orig(h, w, gamma)
        return type(t)(-t.data)

    monkeypatch.setattr(cosa, "suppression_matrix", flipped)
    rc = run(["verify"])
    assert rc == 1
    out = capsys.readouterr()
    assert "suppression_matrix" in out.err or "suppression_matrix" in out.out


def test_config_file_merging(toy, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 21}))
    out = tmp_path / "via_cfg"
    rc = run(["synth", "--sources", str(toy / "src" / "sources.json"),
              "--out", str(out), "--config", str(cfg)])
    assert rc == 0
    assert len(synth.read_manifest(out / "manifest.jsonl")) == 3


def test_config_file_unknown_key(toy, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frobnicate": 1}))
    rc = run(["synth", "--sources", str(toy / "src" / "sources.json"),
              "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert rc == 2
    assert "frobnicate" in capsys.readouterr().err


def test_usage_error_exit_code():
    assert run(["synth"]) == 2          # missing required options
    assert run(["bogus-subcommand"]) == 2
