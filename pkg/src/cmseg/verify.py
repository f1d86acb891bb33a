"""Self-check suite behind the `verify` subcommand: gradient checks against
central finite differences, the brute-force affinity oracle, suppression-mask
properties, scale invariance, and archive round-trips.

Oracles here never call the code paths they check: the affinity oracle loops
over site pairs with plain float arithmetic, and the finite-difference side
only evaluates forward passes.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from . import cosa, encoder, losses, model, weights
from . import tensor as T
from .gradcheck import check_grads


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _result(name, fn) -> CheckResult:
    start = time.time()
    try:
        detail = fn()
        return CheckResult(name, True, detail or "ok", time.time() - start)
    except AssertionError as exc:
        return CheckResult(name, False, str(exc), time.time() - start)
    except Exception as exc:  # report crashes as failures, keep the suite going
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}",
                           time.time() - start)


def _randt(shape, seed, scale=1.0, grad=True):
    data = (np.random.default_rng(seed).normal(size=shape) * scale).astype(np.float32)
    return T.Tensor(data, requires_grad=grad)


def _proj(shape, seed):
    return T.tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def check_op_gradients() -> str:
    """FD-check each differentiable operator at eps 1e-3, rel err < 1e-3."""
    worst = 0.0

    def run(tag, build, inputs, eps=1e-3, tol=1e-3):
        nonlocal worst
        err = check_grads(build, inputs, eps=eps)
        worst = max(worst, err)
        assert err < tol, f"{tag}: rel err {err:.2e} >= {tol}"

    x = _randt((2, 4, 6, 6), 1)
    k = _randt((4, 2, 3, 3), 2, scale=0.5)
    b = _randt((4,), 3)
    pr = _proj((2, 4, 3, 3), 4)
    run("conv2d", lambda: T.sum_all(T.mul(T.conv2d(
        x, T.ConvParams(kernel=k, bias=b, stride=2, padding=1, groups=2)), pr)),
        [x, k, b])

    xd = _randt((1, 2, 9, 9), 5)
    kd = _randt((3, 2, 3, 3), 6, scale=0.5)
    prd = _proj((1, 3, 9, 9), 7)
    run("conv2d_dilated", lambda: T.sum_all(T.mul(T.conv2d(
        xd, T.ConvParams(kernel=kd, padding=2, dilation=2)), prd)), [xd, kd])

    xt = _randt((1, 3, 4, 4), 8)
    kt = _randt((3, 2, 2, 2), 9, scale=0.5)
    bt = _randt((2,), 10)
    prt = _proj((1, 2, 8, 8), 11)
    run("conv_transpose2d", lambda: T.sum_all(T.mul(T.conv_transpose2d(
        xt, T.ConvParams(kernel=kt, bias=bt, stride=2)), prt)), [xt, kt, bt])

    xa = T.Tensor(np.random.default_rng(12).uniform(0.4, 5.6, (4, 4)).astype(np.float32),
                  requires_grad=True)
    pra = _proj((4, 4), 13)
    run("relu6", lambda: T.sum_all(T.mul(T.relu6(xa), pra)), [xa])
    run("sigmoid", lambda: T.sum_all(T.mul(T.sigmoid(xa), pra)), [xa])

    xb = _randt((2, 3, 4, 4), 14)
    mean = _randt((3,), 15, scale=0.3)
    var = T.Tensor(np.random.default_rng(16).uniform(0.5, 2.0, (3,)).astype(np.float32),
                   requires_grad=True)
    scale = _randt((3,), 17)
    shift = _randt((3,), 18)
    prb = _proj((2, 3, 4, 4), 19)
    run("batchnorm", lambda: T.sum_all(T.mul(
        T.batchnorm(xb, mean, var, scale, shift), prb)),
        [xb, mean, var, scale, shift])
    run("batchnorm_train", lambda: T.sum_all(T.mul(
        T.batchnorm_train(xb, scale, shift)[0], prb)), [xb, scale, shift],
        eps=2e-3, tol=2e-3)

    ma = _randt((4, 5), 20)
    mb = _randt((5, 3), 21)
    prm = _proj((4, 3), 22)
    run("matmul", lambda: T.sum_all(T.mul(T.matmul(ma, mb), prm)), [ma, mb])

    f = _randt((2, 3, 6), 23)
    prg = _proj((2, 6, 6), 24)
    run("gram", lambda: T.sum_all(T.mul(T.gram(f), prg)), [f])

    ca = _randt((1, 3, 3, 3), 25)
    cb = _randt((1, 2, 3, 3), 26)
    prc = _proj((1, 5, 3, 3), 27)
    prk = _proj((1, 2, 3, 3), 28)
    run("concat_topk", lambda: T.add(
        T.sum_all(T.mul(T.concat_channels([ca, cb]), prc)),
        T.sum_all(T.mul(T.topk_channels(T.concat_channels([ca, cb]), 2), prk))),
        [ca, cb])

    xp = _randt((1, 3, 3, 3), 29)
    prp = _proj((1, 1, 3, 3), 30)
    run("channel_pools", lambda: T.sum_all(T.mul(
        T.add(T.mean_channels(xp), T.max_channels(xp)), prp)), [xp])

    xn = _randt((1, 3, 2, 3), 31)
    prn = _proj((1, 3, 6), 32)
    run("normalize_columns", lambda: T.sum_all(T.mul(
        cosa.normalize_columns_batched(xn), prn)), [xn])

    xc = _randt((1, 3, 3, 3), 33)
    prr = _proj((1, 4, 3, 3), 34)
    run("cor_forward", lambda: T.sum_all(T.mul(cosa.cor_forward_batched(
        xc, cosa.CoRConfig(gamma=4.0, k=4)), prr)), [xc])

    logit = _randt((1, 1, 4, 4), 35)
    gt = T.tensor(np.random.default_rng(36).integers(0, 2, (1, 1, 4, 4))
                  .astype(np.float32))
    run("total_loss", lambda: losses.total_loss(T.sigmoid(logit), gt), [logit],
        eps=3e-3)

    return f"worst rel err {worst:.2e}"


def _probe_image(seed: int, size: int) -> np.ndarray:
    """Smooth gradients plus noise with one exactly duplicated square; the
    structure spreads affinity values so the top-k selection stays stable
    under small parameter perturbations."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.stack([0.3 + 0.4 * yy, 0.5 - 0.2 * xx, 0.4 + 0.2 * yy * xx])
    img += 0.05 * r.normal(size=(3, size, size))
    q = size // 4
    img[:, 2 * q + 4:3 * q + 4, 2 * q:3 * q] = img[:, q // 2:q // 2 + q, q // 2:q // 2 + q]
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def _probe_gt(size: int) -> np.ndarray:
    q = size // 4
    gt = np.zeros((1, 1, size, size), dtype=np.float32)
    gt[:, :, q // 2:q // 2 + q, q // 2:q // 2 + q] = 1.0
    gt[:, :, 2 * q + 4:3 * q + 4, 2 * q:3 * q] = 1.0
    return gt


def model_gradient_probes(n_probes: int = 10, eps: float = 4e-3,
                          seed: int = 0, rtol: float = 1e-2,
                          atol: float = 3e-4) -> float:
    """FD-probe the composed network loss at `n_probes` random parameter
    tensors; returns the worst excess of |fd - grad| over atol + rtol*scale
    (< 1 means every probe agreed within tolerance).

    Finite differences in float32 are only meaningful at a well-conditioned
    point, so the probe (a) calibrates batchnorm statistics to the probe
    input and centers pre-activations inside relu6's linear region, keeping
    the composed loss locally smooth, (b) probes only tensors whose gradient
    rises above the float32 FD resolution, and (c) steps to the tensor's
    next-largest element when a probe straddles a discrete top-k/argmax
    selection switch (at most 3 tries; a miswired backward fails them all).
    atol is the measured FD noise resolution at this eps; rtol carries the
    acceptance tolerance.
    """
    size = 64
    cfg = model.ModelConfig.micro(input_size=(size, size), seed=seed)
    params = model.init_params(cfg)
    for name, t in params.items():
        if name.endswith("bn_shift"):
            t.data[:] = 3.0
        if name.endswith("bn_scale"):
            t.data[:] = 0.4
    img = T.tensor(_probe_image(seed, size))
    gt = T.tensor(_probe_gt(size))

    saved = encoder.BN_MOMENTUM
    encoder.BN_MOMENTUM = 1.0
    try:
        model.forward(img, params, cfg, train=True)
    finally:
        encoder.BN_MOMENTUM = saved

    def loss_value() -> float:
        return losses.total_loss(model.forward(img, params, cfg), gt).item()

    for p in params.values():
        p.zero_grad()
    T.backward(losses.total_loss(model.forward(img, params, cfg), gt))

    floor = 3e-3
    names = [n for n in model.trainable_names(params)
             if np.abs(params[n].grad).max() >= floor]
    rng = np.random.default_rng(seed)
    chosen = list(rng.choice(names, size=min(n_probes, len(names)), replace=False))
    worst = 0.0
    for name in chosen:
        t = params[name]
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        candidates = [fi for fi in np.argsort(-np.abs(gflat))[:3]
                      if abs(gflat[fi]) >= floor]
        best = np.inf
        for fi in candidates:
            analytic = float(gflat[fi])
            orig = flat[fi]
            flat[fi] = np.float32(orig + eps)
            hi = loss_value()
            flat[fi] = np.float32(orig - eps)
            lo = loss_value()
            step = float(np.float32(orig + eps)) - float(np.float32(orig - eps))
            flat[fi] = orig
            fd = (hi - lo) / step
            excess = abs(fd - analytic) / (atol + rtol * max(abs(fd), abs(analytic)))
            best = min(best, excess)
            if excess <= 1.0:
                break
        worst = max(worst, best)
    return worst


def check_model_gradient() -> str:
    excess = model_gradient_probes()
    assert excess < 1.0, (
        f"composed-model probe disagreement {excess:.2f}x tolerance "
        f"(atol 3e-4 + rtol 1e-2)")
    return f"worst probe at {excess:.2f}x tolerance"


def affinity_oracle(x: np.ndarray, gamma: float, k: int) -> np.ndarray:
    """Site-pair loop oracle for the similarity stack; independent of cosa."""
    c, h, w = x.shape
    s_count = h * w
    cols = x.reshape(c, s_count).astype(np.float64)
    norms = np.sqrt((cols ** 2).sum(axis=0))
    out = np.zeros((k, h, w), dtype=np.float64)
    for s in range(s_count):
        sy, sx = divmod(s, w)
        vals = []
        for t in range(s_count):
            ty, tx = divmod(t, w)
            denom = norms[s] * norms[t]
            cosine = float(cols[:, s] @ cols[:, t]) / denom if denom > 0 else 0.0
            d2 = (sy - ty) ** 2 + (sx - tx) ** 2
            vals.append(cosine * (1.0 - math.exp(-d2 / (2.0 * gamma ** 2))))
        vals.sort(reverse=True)
        out[:, sy, sx] = vals[:k]
    return out


def check_affinity_oracle(seeds: int = 50) -> str:
    worst = 0.0
    for seed in range(seeds):
        r = np.random.default_rng(1000 + seed)
        c = int(r.integers(2, 9))
        h = int(r.integers(2, 7))
        w = int(r.integers(2, 7))
        k = int(r.integers(1, h * w + 1))
        gamma = float(r.uniform(3.0, 5.0))
        x = r.normal(size=(c, h, w)).astype(np.float32)
        got = cosa.cor_forward(T.tensor(x), cosa.CoRConfig(gamma=gamma, k=k))
        diff = float(np.abs(got.data - affinity_oracle(x, gamma, k)).max())
        worst = max(worst, diff)
        assert diff < 1e-5, f"seed {seed}: max abs diff {diff:.2e} >= 1e-5"
    return f"{seeds} seeds, worst abs diff {worst:.2e}"


def check_scale_invariance(seeds: int = 20) -> str:
    worst = 0.0
    for seed in range(seeds):
        r = np.random.default_rng(2000 + seed)
        x = r.normal(size=(4, 4, 4)).astype(np.float32)
        lam = r.uniform(0.05, 20.0, size=(1, 4, 4)).astype(np.float32)
        cfg = cosa.CoRConfig(gamma=4.0, k=5)
        a = cosa.cor_forward(T.tensor(x), cfg)
        b = cosa.cor_forward(T.tensor(x * lam), cfg)
        diff = float(np.abs(a.data - b.data).max())
        worst = max(worst, diff)
        assert diff < 1e-5, f"seed {seed}: diff {diff:.2e} >= 1e-5"
    return f"{seeds} seeds, worst diff {worst:.2e}"


def check_suppression_matrix() -> str:
    phi = cosa.suppression_matrix(5, 6, 4.0).data
    assert np.array_equal(np.diag(phi), np.zeros(30, dtype=np.float32)), \
        "diagonal must be exactly zero"
    assert np.abs(phi - phi.T).max() == 0.0, "must be symmetric"
    assert phi.min() >= 0.0 and phi.max() < 1.0, "range must be [0,1)"
    sites = np.arange(30)
    ys, xs = sites // 6, sites % 6
    d2 = (ys[:, None] - ys) ** 2 + (xs[:, None] - xs) ** 2
    order = np.argsort(d2.ravel(), kind="stable")
    vals = phi.ravel()[order]
    dd = d2.ravel()[order]
    for i in range(1, vals.size):
        if dd[i] > dd[i - 1]:
            assert vals[i] >= vals[i - 1] - 1e-7, "must be monotone in distance"
    ref = cosa.suppression_matrix(4, 5, 4.0).data[0, 3 * 5 + 4]
    assert abs(ref - 0.5422) < 1e-4, f"scalar spot check off: {ref:.6f}"
    return "zero-diag, symmetric, bounded, monotone, spot value ok"


def check_archive_roundtrip(seeds: int = 20) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(seeds):
            r = np.random.default_rng(3000 + seed)
            arrays = {
                f"t{i}": r.normal(size=tuple(r.integers(1, 5, size=int(r.integers(1, 5)))))
                .astype(np.float32)
                for i in range(4)}
            path = os.path.join(tmp, f"a{seed}.cmsw")
            weights.save(weights.WeightArchive(arrays), path)
            first = open(path, "rb").read()
            loaded = weights.load(path)
            weights.save(loaded, path)
            assert open(path, "rb").read() == first, f"seed {seed}: bytes changed"
    return f"{seeds} archives byte-stable"


ALL_CHECKS: List[tuple] = [
    ("op_gradients", check_op_gradients),
    ("model_gradient", check_model_gradient),
    ("affinity_oracle", check_affinity_oracle),
    ("scale_invariance", check_scale_invariance),
    ("suppression_matrix", check_suppression_matrix),
    ("archive_roundtrip", check_archive_roundtrip),
]


def run_all() -> List[CheckResult]:
    return [_result(name, fn) for name, fn in ALL_CHECKS]
