import numpy as np
import pytest

from cmseg import encoder as E
from cmseg import tensor as T
from cmseg import weights as W
from cmseg.gradcheck import check_grads


def micro_config(size=(64, 64), seed=0):
    return E.EncoderConfig(input_size=size, width_multiplier=0.25, seed=seed)


def test_default_pyramid_shapes_256():
    cfg = E.EncoderConfig(input_size=(256, 256), seed=1)
    params = E.init_weights(cfg)
    img = T.tensor(np.random.default_rng(0).random((1, 3, 256, 256), dtype=np.float32))
    pyr = E.encode(img, params, cfg)
    shapes = [tuple(t.shape) for t in pyr]
    assert shapes[0] == (1, 3, 256, 256)
    assert shapes[1] == (1, 16, 128, 128)
    assert shapes[2] == (1, 24, 64, 64)
    assert shapes[3] == (1, 32, 32, 32)
    assert shapes[4] == (1, 96, 16, 16)
    assert shapes[5] == (1, 1280, 8, 8)


def test_width_multiplier_scaling():
    cfg = micro_config()
    assert cfg.scaled_taps() == (4, 8, 8, 24, 320)
    assert E.scale_channels(1280, 0.25) == 320
    assert E.scale_channels(16, 0.25) == 4
    assert E.scale_channels(3, 1.0) == 4  # floor at 4


def test_pyramid_shape_law_over_sizes():
    for h, w in ((64, 64), (96, 160), (128, 128), (160, 96), (256, 256)):
        cfg = E.EncoderConfig(input_size=(h, w), width_multiplier=0.25, seed=2)
        params = E.init_weights(cfg)
        img = T.tensor(np.zeros((1, 3, h, w), dtype=np.float32))
        pyr = E.encode(img, params, cfg)
        taps = cfg.scaled_taps()
        for level, stride in ((1, 2), (2, 4), (3, 8), (4, 16), (5, 32)):
            t = pyr[level]
            assert t.shape == (1, taps[level - 1], h // stride, w // stride)


def test_zero_image_zero_affine_finite_deterministic():
    cfg = micro_config(seed=21)
    runs = []
    for _ in range(2):
        params = E.init_weights(cfg)
        for name, t in params.items():
            if name.endswith(("bn_shift", "bn_mean")):
                t.data[:] = 0.0
        pyr = E.encode(T.tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)),
                       params, cfg)
        assert all(np.isfinite(t.data).all() for t in pyr)
        runs.append([t.data.copy() for t in pyr])
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


def test_encode_rejects_wrong_input():
    cfg = micro_config()
    params = E.init_weights(cfg)
    with pytest.raises(T.ShapeError):
        E.encode(T.tensor(np.zeros((1, 3, 32, 64), dtype=np.float32)), params, cfg)
    with pytest.raises(T.ShapeError):
        E.encode(T.tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)), params, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        E.EncoderConfig(input_size=(100, 64))
    with pytest.raises(ValueError):
        E.EncoderConfig(channels=(16, 0, 32, 96, 1280))


def test_encode_deterministic_and_bounded():
    cfg = micro_config(seed=7)
    img = T.tensor(np.random.default_rng(3).random((2, 3, 64, 64), dtype=np.float32))
    a = E.encode(img, E.init_weights(cfg), cfg)
    b = E.encode(img, E.init_weights(cfg), cfg)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.data, tb.data)
        assert np.isfinite(ta.data).all()
    # stem/blocks end in relu6 except the projection; taps T2..T5 follow a
    # projection batchnorm so only the head tap is relu6-bounded
    assert a[5].data.min() >= 0.0 and a[5].data.max() <= 6.0


def test_same_seed_identical_parameters():
    cfg = micro_config(seed=11)
    p1 = E.init_weights(cfg)
    p2 = E.init_weights(cfg)
    assert sorted(p1) == sorted(p2)
    for name in p1:
        assert np.array_equal(p1[name].data, p2[name].data), name


def test_archive_roundtrip_identical_forward(tmp_path):
    cfg = micro_config(seed=5)
    params = E.init_weights(cfg)
    arch = W.WeightArchive({k: v.data for k, v in params.items()})
    path = tmp_path / "enc.cmsw"
    W.save(arch, path)
    params2 = E.init_weights(cfg, archive=W.load(path))
    img = T.tensor(np.random.default_rng(4).random((1, 3, 64, 64), dtype=np.float32))
    out1 = E.encode(img, params, cfg)[5]
    out2 = E.encode(img, params2, cfg)[5]
    assert np.array_equal(out1.data, out2.data)


def test_archive_shape_mismatch_names_tensor(tmp_path):
    cfg = micro_config(seed=6)
    params = E.init_weights(cfg)
    arrays = {k: v.data for k, v in params.items()}
    arrays["enc.stem.w"] = np.zeros((2, 3, 3, 3), dtype=np.float32)
    with pytest.raises(E.WeightInitError, match="enc.stem.w"):
        E.init_weights(cfg, archive=W.WeightArchive(arrays))


def test_archive_missing_tensor_named(tmp_path):
    cfg = micro_config(seed=6)
    params = E.init_weights(cfg)
    arrays = {k: v.data for k, v in params.items()}
    del arrays["enc.block3.dw.w"]
    with pytest.raises(E.WeightInitError, match="enc.block3.dw.w"):
        E.init_weights(cfg, archive=W.WeightArchive(arrays))


def test_inverted_residual_passthrough_when_zeroed():
    spec = E.InvertedResidualSpec(in_ch=4, out_ch=4, expansion=1, stride=1)
    params = {
        "blk.dw.w": T.tensor(np.zeros((4, 1, 3, 3), dtype=np.float32)),
        "blk.project.w": T.tensor(np.zeros((4, 4, 1, 1), dtype=np.float32)),
    }
    for stage in ("dw", "project"):
        params[f"blk.{stage}.bn_mean"] = T.tensor(np.zeros(4, dtype=np.float32))
        params[f"blk.{stage}.bn_var"] = T.tensor(np.ones(4, dtype=np.float32))
        params[f"blk.{stage}.bn_scale"] = T.tensor(np.ones(4, dtype=np.float32))
        params[f"blk.{stage}.bn_shift"] = T.tensor(np.zeros(4, dtype=np.float32))
    x = T.tensor(np.random.default_rng(8).normal(size=(1, 4, 6, 6)).astype(np.float32))
    y = E.inverted_residual(x, spec, params, prefix="blk")
    assert np.array_equal(y.data, x.data)


def test_inverted_residual_stride2_halves():
    spec = E.InvertedResidualSpec(in_ch=4, out_ch=6, expansion=2, stride=2)
    cfg = micro_config()
    specs = {}
    specs.update({f"b.expand.{k}": s for k, s in
                  E._conv_bn_spec(spec.hidden, 4, 1, 1).items()})
    specs.update({f"b.dw.{k}": s for k, s in
                  E._conv_bn_spec(spec.hidden, 1, 3, 3).items()})
    specs.update({f"b.project.{k}": s for k, s in
                  E._conv_bn_spec(6, spec.hidden, 1, 1).items()})
    params = E.init_random(specs, seed=9)
    x = T.tensor(np.random.default_rng(9).normal(size=(1, 4, 8, 8)).astype(np.float32))
    y = E.inverted_residual(x, spec, params, prefix="b")
    assert y.shape == (1, 6, 4, 4)


def test_inverted_residual_gradcheck():
    spec = E.InvertedResidualSpec(in_ch=3, out_ch=3, expansion=2, stride=1)
    specs = {}
    specs.update({f"b.expand.{k}": s for k, s in
                  E._conv_bn_spec(6, 3, 1, 1).items()})
    specs.update({f"b.dw.{k}": s for k, s in
                  E._conv_bn_spec(6, 1, 3, 3).items()})
    specs.update({f"b.project.{k}": s for k, s in
                  E._conv_bn_spec(3, 6, 1, 1).items()})
    params = E.init_random(specs, seed=10)
    # keep relu6 inputs away from the kinks at 0 and 6 (FD is undefined there)
    for stage in ("expand", "dw"):
        params[f"b.{stage}.bn_scale"].data[:] = 0.4
        params[f"b.{stage}.bn_shift"].data[:] = 3.0
    x = T.Tensor(np.random.default_rng(10).normal(size=(1, 3, 5, 5)).astype(np.float32),
                 requires_grad=True)
    pr = T.tensor(np.random.default_rng(11).normal(size=(1, 3, 5, 5)).astype(np.float32))

    def loss():
        return T.sum_all(T.mul(E.inverted_residual(x, spec, params, prefix="b"), pr))

    inputs = [x, params["b.expand.w"], params["b.dw.w"], params["b.project.w"],
              params["b.project.bn_scale"], params["b.project.bn_shift"]]
    # eps 3e-3: composite block needs a step above float32 forward noise
    assert check_grads(loss, inputs, eps=3e-3) < 1e-3


def test_bn_running_stats_update_and_freeze():
    cfg = micro_config(seed=12)
    params = E.init_weights(cfg)
    img = T.tensor(np.random.default_rng(12).random((2, 3, 64, 64), dtype=np.float32))
    before = params["enc.stem.bn_mean"].data.copy()
    E.encode(img, params, cfg, train=True)
    after = params["enc.stem.bn_mean"].data.copy()
    assert not np.array_equal(before, after)

    frozen_cfg = E.EncoderConfig(input_size=(64, 64), width_multiplier=0.25,
                                 seed=12, freeze_bn_stats=True)
    params2 = E.init_weights(frozen_cfg)
    snap = params2["enc.stem.bn_mean"].data.copy()
    E.encode(img, params2, frozen_cfg, train=True)
    assert np.array_equal(snap, params2["enc.stem.bn_mean"].data)
