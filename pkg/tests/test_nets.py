"""Layer gradients, toy-network wiring, point sampling, and training."""

import json
import os

import numpy as np
import pytest

from hsdf.geometry import CropAlignedCamera, Image, ScalarField3, bilinear_sample, project_points, trilinear_sample
from hsdf.nets import (
    BilinearSampler,
    Conv2d,
    HourglassLite,
    ImplicitHead,
    LeakyReLU,
    Linear,
    NormalRegressor,
    ShallowConv,
    TrainBatch,
    TrainConfig,
    Upsample2,
    build_net,
    eval_implicit,
    extract_features,
    grad_check,
    grad_check_normal_regressor,
    kink_margin,
    load_checkpoint,
    loss_and_grad,
    net_input,
    normal_loss_and_grad,
    renormalize_normal_maps,
    sample_training_points,
    save_checkpoint,
    train_field_head,
    train_normal_regressor,
    write_loss_csv,
)
from hsdf.nets import _loss_only


def _bind_layer(layer, seed=0):
    theta = np.zeros(layer.n_params)
    grad = np.zeros(layer.n_params)
    layer.bind(theta, grad, 0)
    layer.init(np.random.default_rng(seed))
    return theta, grad


def _fd_layer_params(layer, theta, grad, x, R, eps=1e-6, n_probe=40):
    """Max |fd - analytic| over a param subset for loss = sum(forward * R)."""
    rng = np.random.default_rng(99)
    grad[:] = 0.0
    layer.forward(x)
    layer.backward(R)
    worst = 0.0
    for i in rng.choice(layer.n_params, min(n_probe, layer.n_params), replace=False):
        old = theta[i]
        theta[i] = old + eps
        lp = np.sum(layer.forward(x) * R)
        theta[i] = old - eps
        lm = np.sum(layer.forward(x) * R)
        theta[i] = old
        worst = max(worst, abs((lp - lm) / (2 * eps) - grad[i]))
    return worst


def _fd_layer_input(layer, x, R, eps=1e-6, n_probe=40):
    rng = np.random.default_rng(98)
    layer.forward(x)
    dx = layer.backward(R)
    worst = 0.0
    for idx in rng.choice(x.size, min(n_probe, x.size), replace=False):
        old = x.flat[idx]
        x.flat[idx] = old + eps
        lp = np.sum(layer.forward(x) * R)
        x.flat[idx] = old - eps
        lm = np.sum(layer.forward(x) * R)
        x.flat[idx] = old
        worst = max(worst, abs((lp - lm) / (2 * eps) - dx.flat[idx]))
    return worst


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for k, stride in ((3, 1), (3, 2), (1, 1)):
        conv = Conv2d(3, 5, k=k, stride=stride)
        theta, grad = _bind_layer(conv, 1)
        x = rng.standard_normal((3, 9, 8))
        R = rng.standard_normal(conv.forward(x).shape)
        grad[:] = 0.0
        conv.forward(x)
        conv.backward(R)
        assert _fd_layer_params(conv, theta, grad, x, R) < 1e-7
        assert _fd_layer_input(conv, x, R) < 1e-7


def test_activation_and_upsample_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6, 4)) + 0.05  # keep clear of the kink
    R = rng.standard_normal(x.shape)
    assert _fd_layer_input(LeakyReLU(), x, R) < 1e-8
    up = Upsample2()
    RU = rng.standard_normal((3, 12, 8))
    assert _fd_layer_input(up, x, RU) < 1e-8


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    lin = Linear(7, 4)
    theta, grad = _bind_layer(lin, 3)
    x = rng.standard_normal((6, 7))
    R = rng.standard_normal((6, 4))
    grad[:] = 0.0
    lin.forward(x)
    lin.backward(R)
    assert _fd_layer_params(lin, theta, grad, x, R) < 1e-8
    assert _fd_layer_input(lin, x, R) < 1e-8


def test_bilinear_sampler_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    feat = rng.standard_normal((4, 6, 5))
    iu = rng.uniform(-1.0, 6.0, 30)  # includes clamped coords
    iv = rng.uniform(-1.0, 7.0, 30)
    smp = BilinearSampler()
    R = rng.standard_normal((30, 4))
    smp.forward(feat, iu, iv)
    dfeat = smp.backward(R)
    worst = 0.0
    for idx in rng.choice(feat.size, 50, replace=False):
        old = feat.flat[idx]
        eps = 1e-6
        feat.flat[idx] = old + eps
        lp = np.sum(BilinearSampler().forward(feat, iu, iv) * R)
        feat.flat[idx] = old - eps
        lm = np.sum(BilinearSampler().forward(feat, iu, iv) * R)
        feat.flat[idx] = old
        worst = max(worst, abs((lp - lm) / (2 * eps) - dfeat.flat[idx]))
    assert worst < 1e-7


def test_bilinear_sampler_matches_geometry_reference():
    rng = np.random.default_rng(4)
    feat = rng.standard_normal((5, 7, 6))
    iu = rng.uniform(-0.5, 6.5, 20)
    iv = rng.uniform(-0.5, 7.5, 20)
    got = BilinearSampler().forward(feat, iu, iv)
    want = bilinear_sample(feat.transpose(1, 2, 0), iu, iv)
    assert np.max(np.abs(got - want)) < 1e-12


def test_parameter_counts_stay_under_budget():
    hg = HourglassLite(0)
    h32 = ImplicitHead(32, 0)
    sc = ShallowConv(0)
    h16 = ImplicitHead(16, 0)
    reg = NormalRegressor(0)
    assert hg.n_params == 5512
    assert h32.n_params == 12673
    assert sc.n_params == 4720
    assert h16.n_params == 10625
    assert reg.n_params == 8486
    assert hg.n_params + h32.n_params <= 20000
    assert sc.n_params + h16.n_params <= 20000
    assert reg.n_params <= 20000


def test_zero_weights_give_zero_outputs():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (4, 16, 16))
    for net in (HourglassLite(0), ShallowConv(0), NormalRegressor(0)):
        net.theta[:] = 0.0
        assert np.all(net.forward(x) == 0.0)


def test_shallow_identity_first_layer_passes_input_through():
    sc = ShallowConv(0)
    sc.theta[:] = 0.0
    for i in range(4):
        sc.c1.w[i, i, 0, 0] = 1.0
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 10, 9))
    y = sc.forward(x)
    assert np.max(np.abs(y[:4] - x)) == 0.0
    assert np.all(y[4:] == 0.0)


def test_extract_features_shapes_and_determinism():
    rng = np.random.default_rng(7)
    img = Image(rng.uniform(0, 1, (16, 24, 3)).astype(np.float32))
    msk = Image((rng.uniform(0, 1, (16, 24, 1)) > 0.5).astype(np.float32))
    f_hg = extract_features(HourglassLite(2), img, msk)
    assert f_hg.pixels.shape == (4, 6, 32)
    f_sc = extract_features(ShallowConv(2), img, msk)
    assert f_sc.pixels.shape == (16, 24, 16)
    again = extract_features(ShallowConv(2), img, msk)
    assert np.array_equal(f_sc.pixels, again.pixels)


def test_extract_features_rejects_size_mismatch():
    rng = np.random.default_rng(8)
    img = Image(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
    msk = Image(np.ones((16, 8, 1), np.float32))
    with pytest.raises(ValueError):
        extract_features(ShallowConv(0), img, msk)


def test_hourglass_rejects_indivisible_input():
    with pytest.raises(ValueError):
        HourglassLite(0).forward(np.zeros((4, 12, 12)))
    with pytest.raises(ValueError):
        NormalRegressor(0).forward(np.zeros((4, 12, 12)))


def _toy_scene(size=8, n_pts=16, seed=0):
    rng = np.random.default_rng(seed)
    cam = CropAlignedCamera(np.zeros(3), np.full(3, float(size)), size, size)
    img = Image(rng.uniform(0, 1, (size, size, 3)).astype(np.float32))
    msk = Image((rng.uniform(0, 1, (size, size, 1)) > 0.4).astype(np.float32))
    pts = rng.uniform(0.2, size - 0.2, (n_pts, 3))
    return cam, img, msk, pts, rng


def test_eval_implicit_reduces_to_affine_function_of_depth():
    # weights staged so every hidden unit stays on the positive branch:
    # unit 0 carries z with a large bias, the rest are zero
    head = ImplicitHead(16, 0)
    head.theta[:] = 0.0
    head.l1.w[0, 16] = 1.0
    head.l1.b[0] = 10.0
    head.l2.w[0, 0] = 1.0
    head.l2.b[0] = 10.0
    a, c = 0.37, 0.05
    head.l3.w[0, 0] = a
    head.l3.b[0] = -20.0 * a + c
    cam, img, msk, pts, _ = _toy_scene(seed=9)
    feats = extract_features(ShallowConv(1), img, msk)
    pred = eval_implicit(head, feats, cam, pts)
    z = project_points(cam, pts)[:, 2]
    assert np.max(np.abs(pred - (a * z + c))) < 1e-12


def test_eval_implicit_matches_manual_composition():
    cam, img, msk, pts, _ = _toy_scene(seed=10)
    sc = ShallowConv(3)
    head = ImplicitHead(16, 4)
    feats = extract_features(sc, img, msk)
    pred = eval_implicit(head, feats, cam, pts)

    prj = project_points(cam, pts)
    fs = bilinear_sample(feats.pixels, prj[:, 0] - 0.5, prj[:, 1] - 0.5)
    x = np.concatenate([fs, prj[:, 2:3]], axis=1)
    leak = lambda t: np.where(t > 0, t, 0.01 * t)
    h = leak(x @ head.l1.w.T + head.l1.b)
    h = leak(h @ head.l2.w.T + head.l2.b)
    want = (h @ head.l3.w.T + head.l3.b)[:, 0]
    assert np.max(np.abs(pred - want)) < 1e-12


def test_eval_implicit_rejects_points_outside_box():
    cam, img, msk, pts, _ = _toy_scene(seed=11)
    pts[0] = [20.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        eval_implicit(ImplicitHead(16, 0), extract_features(ShallowConv(0), img, msk), cam, pts)


def test_eval_implicit_is_permutation_equivariant():
    cam, img, msk, pts, rng = _toy_scene(seed=12)
    head = ImplicitHead(16, 5)
    feats = extract_features(ShallowConv(6), img, msk)
    pred = eval_implicit(head, feats, cam, pts)
    perm = rng.permutation(len(pts))
    pred_p = eval_implicit(head, feats, cam, pts[perm])
    assert np.array_equal(pred_p, pred[perm])


def test_loss_is_zero_at_exact_fit_and_scales_linearly():
    cam, img, msk, pts, _ = _toy_scene(seed=13)
    sc, head = ShallowConv(7), ImplicitHead(16, 8)
    batch0 = TrainBatch(img, msk, cam, pts, np.zeros(len(pts)))
    _, pred = _loss_only(sc, head, batch0)
    loss, grads = loss_and_grad(sc, head, TrainBatch(img, msk, cam, pts, pred))
    assert loss == 0.0
    assert np.all(grads["extractor"] == 0.0)
    assert np.all(grads["head"] == 0.0)
    resid = np.full(len(pts), 0.25)
    l1, _ = loss_and_grad(sc, head, TrainBatch(img, msk, cam, pts, pred - resid))
    l2, _ = loss_and_grad(sc, head, TrainBatch(img, msk, cam, pts, pred - 2 * resid))
    assert abs(l2 - 2 * l1) < 1e-12


def _kink_screened_batch(extr, head, size=8, n_pts=16, min_margin=2e-4):
    """Batch whose residuals sit at 1 and whose rectifier pre-activations
    stay away from zero, so finite differences see a smooth loss."""
    for seed in range(50):
        cam, img, msk, pts, _ = _toy_scene(size, n_pts, seed)
        b0 = TrainBatch(img, msk, cam, pts, np.zeros(len(pts)))
        _, pred = _loss_only(extr, head, b0)
        if kink_margin(extr, head) > min_margin:
            return TrainBatch(img, msk, cam, pts, pred - 1.0)
    raise AssertionError("no kink-screened batch found")


def test_grad_check_fine_pipeline_passes():
    sc, head = ShallowConv(5), ImplicitHead(16, 6)
    batch = _kink_screened_batch(sc, head)
    assert grad_check(sc, head, batch) < 1e-4


def test_grad_check_empty_batch_returns_zero():
    cam, img, msk, _, _ = _toy_scene(seed=14)
    batch = TrainBatch(img, msk, cam, np.zeros((0, 3)), np.zeros(0))
    assert grad_check(ShallowConv(0), ImplicitHead(16, 0), batch) == 0.0


def test_fd_error_shrinks_with_step_size():
    # a large step reaches across rectifier kinks; a small one does not
    sc, head = ShallowConv(5), ImplicitHead(16, 6)
    batch = _kink_screened_batch(sc, head)
    err_small = grad_check(sc, head, batch, eps=1e-5)
    err_large = grad_check(sc, head, batch, eps=1e-2)
    assert err_small < 1e-4
    assert err_large > err_small


def _sphere_field(n=24, r=5.0):
    lin = np.linspace(-8.0, 8.0, n)
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    vals = np.sqrt(gx * gx + gy * gy + gz * gz) - r
    return ScalarField3((n, n, n), [-8.0] * 3, [8.0] * 3, vals)


def test_sample_training_points_surface_half_sits_on_zero_crossings():
    fld = _sphere_field()
    pts, vals, warned = sample_training_points(fld, 200, 0.0, np.random.default_rng(0))
    assert not warned
    assert pts.shape == (200, 3) and vals.shape == (200,)
    assert np.max(np.abs(vals[:100])) < 1e-9
    assert np.all(pts >= fld.box_min - 1e-12) and np.all(pts <= fld.box_max + 1e-12)


def test_sample_training_points_perturbs_but_stays_in_box():
    fld = _sphere_field()
    pts, vals, warned = sample_training_points(fld, 400, 1.5, np.random.default_rng(1))
    assert not warned
    near = np.abs(vals[:200])
    assert np.median(near) < 2.5  # still near the surface
    assert np.median(near) > 0.0
    assert np.all(pts >= fld.box_min) and np.all(pts <= fld.box_max)


def test_sample_training_points_warns_without_crossings():
    n = 8
    fld = ScalarField3((n, n, n), [0, 0, 0], [1, 1, 1], np.ones((n, n, n)))
    pts, vals, warned = sample_training_points(fld, 50, 1.0, np.random.default_rng(2))
    assert warned
    assert len(pts) == 50
    assert np.all(vals == 1.0)


def test_sample_training_points_reads_values_from_value_field():
    fld = _sphere_field()
    shifted = ScalarField3(fld.dims, fld.box_min, fld.box_max, fld.values + 3.25)
    pts, vals, _ = sample_training_points(
        fld, 100, 1.0, np.random.default_rng(3), value_field=shifted
    )
    assert np.max(np.abs(vals - (trilinear_sample(fld, pts) + 3.25))) < 1e-12


def test_sample_training_points_deterministic():
    fld = _sphere_field()
    p1, v1, _ = sample_training_points(fld, 64, 1.0, np.random.default_rng(7))
    p2, v2, _ = sample_training_points(fld, 64, 1.0, np.random.default_rng(7))
    assert np.array_equal(p1, p2) and np.array_equal(v1, v2)


def _memorization_batch():
    rng = np.random.default_rng(2)
    cam = CropAlignedCamera(np.zeros(3), np.full(3, 8.0), 8, 8)
    img = Image(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
    msk = Image(np.ones((8, 8, 1), np.float32))
    pts = rng.uniform(0.2, 7.8, (32, 3))
    vals = np.clip(
        np.sin(pts[:, 0]) * 0.4 + 0.3 * np.cos(pts[:, 1] * 0.7) - 0.1 * pts[:, 2] / 8.0,
        -1,
        1,
    )
    return TrainBatch(img, msk, cam, pts, vals)


def test_training_memorizes_one_sample():
    batch = _memorization_batch()
    sc, head = ShallowConv(5), ImplicitHead(16, 6)
    cfg = TrainConfig(epochs=2000, lr=1e-2, batch_images=1, seed=0)
    hist = train_field_head(sc, head, [batch], cfg)
    assert len(hist) == 2000
    assert min(hist) < 1e-3
    # smoothed curve ends lower than it starts
    assert np.mean(hist[-100:]) < np.mean(hist[:100])


def test_training_with_zero_learning_rate_keeps_loss_constant():
    batch = _memorization_batch()
    sc, head = ShallowConv(5), ImplicitHead(16, 6)
    hist = train_field_head(sc, head, [batch], TrainConfig(epochs=20, lr=0.0, batch_images=1, seed=0))
    assert all(v == hist[0] for v in hist)


def test_training_is_bitwise_reproducible():
    batch = _memorization_batch()
    runs = []
    for _ in range(2):
        sc, head = ShallowConv(5), ImplicitHead(16, 6)
        hist = train_field_head(sc, head, [batch], TrainConfig(epochs=30, lr=1e-2, seed=4))
        runs.append((hist, sc.theta.copy(), head.theta.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
    assert np.array_equal(runs[0][2], runs[1][2])


def test_training_raises_on_non_finite_loss():
    batch = _memorization_batch()
    batch.values[0] = np.nan
    sc, head = ShallowConv(5), ImplicitHead(16, 6)
    with pytest.raises(RuntimeError):
        train_field_head(sc, head, [batch], TrainConfig(epochs=2, lr=1e-2, seed=0))


def test_normal_regressor_training_reduces_loss():
    rng = np.random.default_rng(15)
    img = Image(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
    msk = Image(np.ones((8, 8, 1), np.float32))
    x = net_input(img, msk)
    target = np.zeros((6, 8, 8))
    target[2] = 1.0
    target[5] = -1.0
    reg = NormalRegressor(3)
    hist = train_normal_regressor(reg, [(x, target)], TrainConfig(epochs=200, lr=1e-2, batch_images=1, seed=0))
    assert hist[-1] < 0.25 * hist[0]


def test_normal_regressor_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    img = Image(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
    msk = Image((rng.uniform(0, 1, (8, 8, 1)) > 0.5).astype(np.float32))
    x = net_input(img, msk)
    reg = NormalRegressor(7)
    target = reg.forward(x) - 1.0
    loss, g = normal_loss_and_grad(reg, x, target)
    d = np.random.default_rng(17).standard_normal(len(reg.theta))
    d /= np.linalg.norm(d)
    eps = 1e-6
    reg.theta += eps * d
    lp = float(np.mean(np.abs(reg.forward(x) - target)))
    reg.theta -= 2 * eps * d
    lm = float(np.mean(np.abs(reg.forward(x) - target)))
    reg.theta += eps * d
    fd = (lp - lm) / (2 * eps)
    assert abs(fd - g @ d) / max(abs(fd), 1e-10) < 1e-6


def test_renormalize_normal_maps():
    rng = np.random.default_rng(18)
    raw = rng.standard_normal((6, 5, 5))
    raw[:, 0, 0] = 0.0
    out = renormalize_normal_maps(raw)
    for k in (0, 3):
        n = np.linalg.norm(out[k : k + 3], axis=0)
        assert np.all(n[0, 0] == 0.0)
        mask = np.ones((5, 5), bool)
        mask[0, 0] = False
        assert np.max(np.abs(n[mask] - 1.0)) < 1e-12
        # direction preserved
        cross = np.cross(out[k : k + 3, mask.nonzero()[0], mask.nonzero()[1]].T,
                         raw[k : k + 3, mask.nonzero()[0], mask.nonzero()[1]].T)
        assert np.max(np.abs(cross)) < 1e-12


def test_net_input_scales_label_masks():
    rng = np.random.default_rng(19)
    img = Image(rng.uniform(0, 1, (4, 4, 3)).astype(np.float32))
    labels = Image(np.full((4, 4, 1), 16.0, np.float32))
    x = net_input(img, labels)
    assert np.all(x[3] == 1.0)
    binary = Image(np.ones((4, 4, 1), np.float32))
    assert np.all(net_input(img, binary)[3] == 1.0)
    with pytest.raises(ValueError):
        net_input(img, Image(np.ones((4, 8, 1), np.float32)))


def test_checkpoint_round_trip_and_reproducible_bytes(tmp_path):
    nets = {"extractor": HourglassLite(1), "head": ImplicitHead(32, 2)}
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(path, nets, meta={"epoch": 3})
    meta, loaded = load_checkpoint(path)
    assert meta == {"epoch": 3}
    for name, net in nets.items():
        want = net.theta.astype("<f4").astype(np.float64)
        assert np.array_equal(loaded[name].theta, want)
        assert loaded[name].kind == net.kind
    save_checkpoint(str(tmp_path / "b.json"), nets, meta={"epoch": 3})
    assert open(path, "rb").read() == open(str(tmp_path / "b.json"), "rb").read()
    assert open(path + ".raw", "rb").read() == open(str(tmp_path / "b.json.raw"), "rb").read()
    assert os.path.getsize(path + ".raw") == 4 * sum(n.n_params for n in nets.values())


def test_build_net_kinds():
    assert build_net("hourglass").kind == "hourglass"
    assert build_net("shallow").kind == "shallow"
    assert build_net("normal_regressor").kind == "normal_regressor"
    assert build_net("head32").in_features == 32
    assert build_net("head16").in_features == 16
    with pytest.raises(ValueError):
        build_net("mystery")


def test_loss_csv_round_trip(tmp_path):
    path = str(tmp_path / "loss.csv")
    hist = [0.5, 0.25, 0.125]
    write_loss_csv(path, hist)
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "step,loss"
    got = [float(l.split(",")[1]) for l in lines[1:]]
    assert got == hist
