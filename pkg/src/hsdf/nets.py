"""Toy-scale pixel-aligned implicit networks with hand-rolled backprop.

All math is float64. Each network owns one flat parameter vector ``theta``
and a matching ``grad`` vector; layer weights are reshaped views into them,
so finite-difference perturbation, SGD updates, and checkpoint I/O are all
single-array operations.
"""

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .geometry import CropAlignedCamera, Image, ScalarField3, project_points, trilinear_sample

_LEAK = 0.01


# ------------------------------------------------------------------ layers


class Conv2d:
    """3x3/1x1 convolution, zero padding, optional stride 2."""

    def __init__(self, cin, cout, k=3, stride=1):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2
        self.n_params = cout * cin * k * k + cout
        self.w = None
        self.b = None
        self.gw = None
        self.gb = None

    def bind(self, theta, grad, off):
        nw = self.cout * self.cin * self.k * self.k
        self.w = theta[off : off + nw].reshape(self.cout, self.cin, self.k, self.k)
        self.gw = grad[off : off + nw].reshape(self.w.shape)
        self.b = theta[off + nw : off + nw + self.cout]
        self.gb = grad[off + nw : off + nw + self.cout]
        return off + self.n_params

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.cin * self.k * self.k)
        self.w[...] = rng.uniform(-bound, bound, self.w.shape)
        self.b[...] = rng.uniform(-bound, bound, self.b.shape)

    def _cols(self, xp, ho, wo):
        k, s = self.k, self.stride
        cols = np.empty((self.cin, k, k, ho, wo))
        for ky in range(k):
            for kx in range(k):
                cols[:, ky, kx] = xp[:, ky : ky + s * ho : s, kx : kx + s * wo : s]
        return cols.reshape(self.cin * k * k, ho * wo)

    def forward(self, x):
        c, h, w = x.shape
        if c != self.cin:
            raise ValueError("channel mismatch")
        p, s = self.pad, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        ho = (h + 2 * p - self.k) // s + 1
        wo = (w + 2 * p - self.k) // s + 1
        cols = self._cols(xp, ho, wo)
        y = self.w.reshape(self.cout, -1) @ cols + self.b[:, None]
        self._cache = (xp.shape, cols, (ho, wo))
        return y.reshape(self.cout, ho, wo)

    def backward(self, dy):
        xp_shape, cols, (ho, wo) = self._cache
        dy2 = dy.reshape(self.cout, -1)
        self.gw += (dy2 @ cols.T).reshape(self.gw.shape)
        self.gb += dy2.sum(axis=1)
        dcols = (self.w.reshape(self.cout, -1).T @ dy2).reshape(
            self.cin, self.k, self.k, ho, wo
        )
        dxp = np.zeros(xp_shape)
        s = self.stride
        for ky in range(self.k):
            for kx in range(self.k):
                dxp[:, ky : ky + s * ho : s, kx : kx + s * wo : s] += dcols[:, ky, kx]
        p = self.pad
        return dxp[:, p : dxp.shape[1] - p, p : dxp.shape[2] - p] if p else dxp


class LeakyReLU:
    n_params = 0

    def __init__(self):
        self.kink_margin = np.inf

    def bind(self, theta, grad, off):
        return off

    def init(self, rng):
        pass

    def forward(self, x):
        self._mask = x > 0
        self.kink_margin = float(np.abs(x).min()) if x.size else np.inf
        return np.where(self._mask, x, _LEAK * x)

    def backward(self, dy):
        return np.where(self._mask, dy, _LEAK * dy)


class Upsample2:
    """Nearest-neighbor x2."""

    n_params = 0

    def bind(self, theta, grad, off):
        return off

    def init(self, rng):
        pass

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        c, h, w = dy.shape
        return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


class Linear:
    def __init__(self, din, dout):
        self.din, self.dout = din, dout
        self.n_params = din * dout + dout

    def bind(self, theta, grad, off):
        nw = self.din * self.dout
        self.w = theta[off : off + nw].reshape(self.dout, self.din)
        self.gw = grad[off : off + nw].reshape(self.w.shape)
        self.b = theta[off + nw : off + nw + self.dout]
        self.gb = grad[off + nw : off + nw + self.dout]
        return off + self.n_params

    def init(self, rng):
        bound = 1.0 / np.sqrt(self.din)
        self.w[...] = rng.uniform(-bound, bound, self.w.shape)
        self.b[...] = rng.uniform(-bound, bound, self.b.shape)

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.gw += dy.T @ self._x
        self.gb += dy.sum(axis=0)
        return dy @ self.w


class BilinearSampler:
    """Differentiable lookup of a (C, h, w) map at index coords; gradients
    flow to the map values only (sample locations are fixed geometry)."""

    def forward(self, feat, iu, iv):
        c, h, w = feat.shape
        u = np.clip(iu, 0.0, w - 1.0)
        v = np.clip(iv, 0.0, h - 1.0)
        x0 = np.minimum(u.astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), np.int64)
        y0 = np.minimum(v.astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = u - x0
        ty = v - y0
        w00 = (1 - tx) * (1 - ty)
        w01 = tx * (1 - ty)
        w10 = (1 - tx) * ty
        w11 = tx * ty
        self._cache = (feat.shape, (y0, x0, y1, x1), (w00, w01, w10, w11))
        out = (
            feat[:, y0, x0] * w00
            + feat[:, y0, x1] * w01
            + feat[:, y1, x0] * w10
            + feat[:, y1, x1] * w11
        )
        return out.T  # (N, C)

    def backward(self, dout):
        shape, (y0, x0, y1, x1), (w00, w01, w10, w11) = self._cache
        c, h, w = shape
        dfeat = np.zeros((h * w, c))
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(dfeat, yy * w + xx, ww[:, None] * dout)
        return dfeat.T.reshape(shape)


# ------------------------------------------------------------------- nets


class _FlatNet:
    """Base: flat theta/grad with layer views; subclasses define wiring."""

    def __init__(self, seed=0):
        self._build()
        n = sum(l.n_params for l in self._layers)
        self.theta = np.zeros(n)
        self.grad = np.zeros(n)
        off = 0
        for l in self._layers:
            off = l.bind(self.theta, self.grad, off)
        rng = np.random.default_rng(seed)
        for l in self._layers:
            l.init(rng)

    @property
    def n_params(self):
        return len(self.theta)

    def zero_grad(self):
        self.grad[:] = 0.0


class HourglassLite(_FlatNet):
    """Encoder-decoder with 2 downsampling levels; 32 channels at 1/4 res."""

    kind = "hourglass"
    out_channels = 32
    out_stride = 4
    in_channels = 4

    def _build(self):
        self.c1, self.r1 = Conv2d(4, 8, stride=2), LeakyReLU()
        self.c2, self.r2 = Conv2d(8, 12, stride=2), LeakyReLU()
        self.d1, self.r3 = Conv2d(12, 12, stride=2), LeakyReLU()
        self.bott, self.r4 = Conv2d(12, 12), LeakyReLU()
        self.up = Upsample2()
        self.u1, self.r5 = Conv2d(12, 12), LeakyReLU()
        self.out = Conv2d(12, 32, k=1)
        self._layers = [
            self.c1, self.r1, self.c2, self.r2, self.d1, self.r3,
            self.bott, self.r4, self.up, self.u1, self.r5, self.out,
        ]

    def forward(self, x):
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise ValueError("hourglass input size must be divisible by 8")
        e = self.r2.forward(self.c2.forward(self.r1.forward(self.c1.forward(x))))
        h = self.r4.forward(self.bott.forward(self.r3.forward(self.d1.forward(e))))
        h = self.r5.forward(self.u1.forward(self.up.forward(h)))
        return self.out.forward(h + e)

    def backward(self, dy):
        dh = self.out.backward(dy)
        de_skip = dh
        dh = self.up.backward(self.u1.backward(self.r5.backward(dh)))
        dh = self.d1.backward(self.r3.backward(self.bott.backward(self.r4.backward(dh))))
        de = dh + de_skip
        return self.c1.backward(self.r1.backward(self.c2.backward(self.r2.backward(de))))


class ShallowConv(_FlatNet):
    """1x1 lift + two residual 3x3 convs; 16 channels at full resolution."""

    kind = "shallow"
    out_channels = 16
    out_stride = 1
    in_channels = 4

    def _build(self):
        self.c1 = Conv2d(4, 16, k=1)
        self.r1, self.c2 = LeakyReLU(), Conv2d(16, 16)
        self.r2, self.c3 = LeakyReLU(), Conv2d(16, 16)
        self._layers = [self.c1, self.r1, self.c2, self.r2, self.c3]

    def forward(self, x):
        y = self.c1.forward(x)
        y = y + self.c2.forward(self.r1.forward(y))
        y = y + self.c3.forward(self.r2.forward(y))
        return y

    def backward(self, dy):
        d = dy + self.r2.backward(self.c3.backward(dy))
        d = d + self.r1.backward(self.c2.backward(d))
        return self.c1.backward(d)


class ImplicitHead(_FlatNet):
    """MLP [C+1, 128, 64, 1]; leaky hidden activations, linear output."""

    kind = "head"

    def __init__(self, in_features, seed=0):
        self.in_features = in_features
        super().__init__(seed)

    def _build(self):
        c = self.in_features
        self.l1, self.a1 = Linear(c + 1, 128), LeakyReLU()
        self.l2, self.a2 = Linear(128, 64), LeakyReLU()
        self.l3 = Linear(64, 1)
        self._layers = [self.l1, self.a1, self.l2, self.a2, self.l3]

    def forward(self, x):
        h = self.a1.forward(self.l1.forward(x))
        h = self.a2.forward(self.l2.forward(h))
        return self.l3.forward(h)[:, 0]

    def backward(self, dy):
        d = self.l3.backward(dy[:, None])
        d = self.l2.backward(self.a2.backward(d))
        return self.l1.backward(self.a1.backward(d))


class NormalRegressor(_FlatNet):
    """3-level encoder-decoder; 6 output channels (front ‖ back normals)."""

    kind = "normal_regressor"
    out_channels = 6
    out_stride = 1
    in_channels = 4

    def _build(self):
        self.e1, self.r1 = Conv2d(4, 8, stride=2), LeakyReLU()
        self.e2, self.r2 = Conv2d(8, 12, stride=2), LeakyReLU()
        self.e3, self.r3 = Conv2d(12, 16, stride=2), LeakyReLU()
        self.bott, self.r4 = Conv2d(16, 16), LeakyReLU()
        self.up3, self.d3, self.r5 = Upsample2(), Conv2d(16, 12), LeakyReLU()
        self.up2, self.d2, self.r6 = Upsample2(), Conv2d(12, 8), LeakyReLU()
        self.up1, self.d1, self.r7 = Upsample2(), Conv2d(8, 8), LeakyReLU()
        self.out = Conv2d(8, 6, k=1)
        self._layers = [
            self.e1, self.r1, self.e2, self.r2, self.e3, self.r3, self.bott,
            self.r4, self.up3, self.d3, self.r5, self.up2, self.d2, self.r6,
            self.up1, self.d1, self.r7, self.out,
        ]

    def forward(self, x):
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise ValueError("regressor input size must be divisible by 8")
        a = self.r1.forward(self.e1.forward(x))
        b = self.r2.forward(self.e2.forward(a))
        c = self.r3.forward(self.e3.forward(b))
        h = self.r4.forward(self.bott.forward(c))
        h = self.r5.forward(self.d3.forward(self.up3.forward(h))) + b
        h = self.r6.forward(self.d2.forward(self.up2.forward(h))) + a
        h = self.r7.forward(self.d1.forward(self.up1.forward(h)))
        return self.out.forward(h)

    def backward(self, dy):
        dh = self.out.backward(dy)
        dh = self.up1.backward(self.d1.backward(self.r7.backward(dh)))
        da_skip = dh
        dh = self.up2.backward(self.d2.backward(self.r6.backward(dh)))
        db_skip = dh
        dh = self.up3.backward(self.d3.backward(self.r5.backward(dh)))
        dc = self.e3.backward(self.r3.backward(self.bott.backward(self.r4.backward(dh))))
        db = self.e2.backward(self.r2.backward(dc + db_skip))
        return self.e1.backward(self.r1.backward(db + da_skip))


def build_net(kind: str, seed: int = 0):
    if kind == "hourglass":
        return HourglassLite(seed)
    if kind == "shallow":
        return ShallowConv(seed)
    if kind == "normal_regressor":
        return NormalRegressor(seed)
    if kind == "head32":
        return ImplicitHead(32, seed)
    if kind == "head16":
        return ImplicitHead(16, seed)
    raise ValueError(f"unknown net kind: {kind}")


# -------------------------------------------------------------- inference


def net_input(image: Image, mask: Image) -> np.ndarray:
    """(4, H, W) float64: RGB plus the semantic mask channel scaled to [0,1]."""
    if (image.width, image.height) != (mask.width, mask.height):
        raise ValueError("image and mask sizes must match")
    rgb = image.pixels[:, :, :3].astype(np.float64)
    m = mask.pixels[:, :, 0].astype(np.float64)
    if m.max() > 1.0:
        m = m / 16.0
    return np.concatenate([rgb.transpose(2, 0, 1), m[None]], axis=0)


def extract_features(extractor, image: Image, mask: Image) -> Image:
    """Deterministic forward pass; feature map as (h, w, C) float64 Image."""
    feat = extractor.forward(net_input(image, mask))
    return Image(feat.transpose(1, 2, 0))


def _index_coords(features_w, features_h, camera, prj):
    sx = features_w / camera.width
    sy = features_h / camera.height
    return prj[:, 0] * sx - 0.5, prj[:, 1] * sy - 0.5


def eval_implicit(head: ImplicitHead, features, camera: CropAlignedCamera, points) -> np.ndarray:
    """Project points, sample pixel-aligned features, run the MLP on
    [feature ‖ z]; returns predictions in input order (normalized units)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(camera.contains(pts)):
        raise ValueError("points must lie inside the camera box")
    fa = features.pixels if isinstance(features, Image) else np.asarray(features)
    feat = fa.astype(np.float64).transpose(2, 0, 1)
    prj = project_points(camera, pts)
    iu, iv = _index_coords(feat.shape[2], feat.shape[1], camera, prj)
    sampler = BilinearSampler()
    fs = sampler.forward(feat, iu, iv)
    x = np.concatenate([fs, prj[:, 2:3]], axis=1)
    return head.forward(x)


def renormalize_normal_maps(raw: np.ndarray) -> np.ndarray:
    """Unit-normalize each 3-vector half of a (6, H, W) map; zero stays zero."""
    out = raw.copy()
    for k in (0, 3):
        n = np.linalg.norm(out[k : k + 3], axis=0)
        nz = n > 1e-12
        out[k : k + 3, nz] = out[k : k + 3, nz] / n[nz]
    return out


# --------------------------------------------------------------- training


@dataclass
class TrainBatch:
    """One image worth of supervision: points with normalized gt values."""

    image: Image
    mask: Image
    camera: CropAlignedCamera
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(self.points) != len(self.values):
            raise ValueError("points and values must pair up")
        if len(self.points) and not np.all(self.camera.contains(self.points)):
            raise ValueError("all batch points must lie inside the camera box")


def loss_and_grad(extractor, head, batch: TrainBatch):
    """Mean L1 between head predictions and batch values, with analytic
    gradients accumulated via reverse-mode through MLP, bilinear sampling,
    and the conv extractor. Returns (loss, {'extractor': g, 'head': g})."""
    extractor.zero_grad()
    head.zero_grad()
    if len(batch.points) == 0:
        return 0.0, {"extractor": extractor.grad.copy(), "head": head.grad.copy()}
    x = net_input(batch.image, batch.mask)
    feat = extractor.forward(x)
    prj = project_points(batch.camera, batch.points)
    iu, iv = _index_coords(feat.shape[2], feat.shape[1], batch.camera, prj)
    sampler = BilinearSampler()
    fs = sampler.forward(feat, iu, iv)
    inp = np.concatenate([fs, prj[:, 2:3]], axis=1)
    pred = head.forward(inp)
    resid = pred - batch.values
    loss = float(np.mean(np.abs(resid)))
    dpred = np.sign(resid) / len(resid)
    dinp = head.backward(dpred)
    dfeat = sampler.backward(dinp[:, : fs.shape[1]])
    extractor.backward(dfeat)
    return loss, {"extractor": extractor.grad.copy(), "head": head.grad.copy()}


def normal_loss_and_grad(reg: NormalRegressor, x: np.ndarray, target: np.ndarray):
    """Mean L1 over the 6-channel normal maps."""
    reg.zero_grad()
    out = reg.forward(x)
    resid = out - target
    loss = float(np.mean(np.abs(resid)))
    reg.backward(np.sign(resid) / resid.size)
    return loss, reg.grad.copy()


_FD_FLOOR = 1e-6  # > central-difference roundoff (~1e-16/eps), << real-bug scale


def kink_margin(*nets) -> float:
    """Smallest |pre-activation| seen by any leaky-rectifier in the last
    forward pass. Finite differencing is only trustworthy when this margin
    exceeds the perturbation's reach, so check harnesses reseed until the
    margin is comfortable."""
    m = np.inf
    for net in nets:
        for l in net._layers:
            if isinstance(l, LeakyReLU):
                m = min(m, l.kink_margin)
    return m


def grad_check(extractor, head, batch: TrainBatch, eps: float = 1e-5) -> float:
    """Central finite differences over every parameter of both nets.

    Returns max over params of |fd - analytic| / max(|fd|, |analytic|, floor);
    the floor keeps roundoff on dead parameters from registering as error.
    """
    if len(batch.points) == 0:
        return 0.0
    base_loss, grads = loss_and_grad(extractor, head, batch)
    worst = 0.0
    theta = extractor.theta
    g = grads["extractor"]
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + eps
        lp, _ = _loss_only(extractor, head, batch)
        theta[i] = old - eps
        lm, _ = _loss_only(extractor, head, batch)
        theta[i] = old
        fd = (lp - lm) / (2 * eps)
        denom = max(abs(fd), abs(g[i]), _FD_FLOOR)
        worst = max(worst, abs(fd - g[i]) / denom)
    # head params leave the feature map untouched; compute it once
    inp = _head_input(extractor, batch)
    theta = head.theta
    g = grads["head"]
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + eps
        lp = float(np.mean(np.abs(head.forward(inp) - batch.values)))
        theta[i] = old - eps
        lm = float(np.mean(np.abs(head.forward(inp) - batch.values)))
        theta[i] = old
        fd = (lp - lm) / (2 * eps)
        denom = max(abs(fd), abs(g[i]), _FD_FLOOR)
        worst = max(worst, abs(fd - g[i]) / denom)
    return worst


def _head_input(extractor, batch):
    x = net_input(batch.image, batch.mask)
    feat = extractor.forward(x)
    prj = project_points(batch.camera, batch.points)
    iu, iv = _index_coords(feat.shape[2], feat.shape[1], batch.camera, prj)
    fs = BilinearSampler().forward(feat, iu, iv)
    return np.concatenate([fs, prj[:, 2:3]], axis=1)


def _loss_only(extractor, head, batch):
    pred = head.forward(_head_input(extractor, batch))
    return float(np.mean(np.abs(pred - batch.values))), pred


def grad_check_normal_regressor(reg, x, target, eps: float = 1e-5) -> float:
    _, g = normal_loss_and_grad(reg, x, target)
    worst = 0.0
    theta = reg.theta
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + eps
        lp = float(np.mean(np.abs(reg.forward(x) - target)))
        theta[i] = old - eps
        lm = float(np.mean(np.abs(reg.forward(x) - target)))
        theta[i] = old
        fd = (lp - lm) / (2 * eps)
        denom = max(abs(fd), abs(g[i]), _FD_FLOOR)
        worst = max(worst, abs(fd - g[i]) / denom)
    return worst


def sample_training_points(
    gt_field: ScalarField3,
    n: int,
    sigma: float,
    rng: np.random.Generator,
    value_field: Optional[ScalarField3] = None,
):
    """50% near-surface (zero-crossing interpolation + Gaussian sigma) and
    50% uniform-in-box points; values trilinearly sampled from the target
    field. Returns (points (n,3), values (n,), all_uniform_warning)."""
    if n <= 0:
        raise ValueError("need n > 0")
    value_field = value_field if value_field is not None else gt_field
    v = gt_field.values
    crossings = []
    for axis in range(3):
        a = np.moveaxis(v, axis, 0)
        flip = (a[:-1] * a[1:]) <= 0
        flip &= ~((a[:-1] == 0) & (a[1:] == 0))
        idx = np.argwhere(flip)
        if len(idx):
            v0 = a[:-1][tuple(idx.T)]
            v1 = a[1:][tuple(idx.T)]
            t = v0 / np.where(v0 == v1, 1.0, v0 - v1)
            grid_idx = idx.astype(np.float64)
            grid_idx[:, 0] += t
            # moveaxis put original dim `axis` first; undo the permutation
            order = list(range(1, axis + 1)) + [0] + list(range(axis + 1, 3))
            crossings.append(grid_idx[:, order])
    warned = len(crossings) == 0
    n_near = 0 if warned else n // 2
    n_uni = n - n_near
    pts = []
    if n_near:
        cross = np.vstack(crossings)
        pick = rng.integers(0, len(cross), n_near)
        spacing = gt_field.spacing()
        world = gt_field.box_min + cross[pick] * spacing
        world = world + rng.normal(scale=sigma, size=(n_near, 3)) if sigma > 0 else world
        pts.append(np.clip(world, gt_field.box_min, gt_field.box_max))
    pts.append(rng.uniform(gt_field.box_min, gt_field.box_max, size=(n_uni, 3)))
    points = np.vstack(pts)
    values = trilinear_sample(value_field, points)
    return points, values, warned


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    batch_images: int = 4
    points_per_image: int = 2048
    seed: int = 0
    delta_vox: float = 5.0
    fine_delta_vox: float = 1.0
    near_sigma_vox: float = 1.5
    lr_decay: str = "linear"  # or "none"


def sgd_step(net, velocity, lr, momentum):
    velocity *= momentum
    velocity -= lr * net.grad
    net.theta += velocity


def train_field_head(extractor, head, batches: List[TrainBatch], cfg: TrainConfig):
    """Plain SGD + momentum over per-image batches; returns loss history.

    Batch point sets are fixed up front (seeded), so a zero learning rate
    yields a constant loss curve and runs are bitwise reproducible.
    """
    rng = np.random.default_rng(cfg.seed)
    vel_e = np.zeros_like(extractor.theta)
    vel_h = np.zeros_like(head.theta)
    total_steps = max(1, cfg.epochs * ((len(batches) + cfg.batch_images - 1) // cfg.batch_images))
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batches))
        for start in range(0, len(order), cfg.batch_images):
            group = [batches[i] for i in order[start : start + cfg.batch_images]]
            extractor.zero_grad()
            head.zero_grad()
            loss_sum = 0.0
            ge = np.zeros_like(extractor.grad)
            gh = np.zeros_like(head.grad)
            for b in group:
                loss, grads = loss_and_grad(extractor, head, b)
                loss_sum += loss
                ge += grads["extractor"]
                gh += grads["head"]
            loss = loss_sum / len(group)
            if not np.isfinite(loss):
                raise RuntimeError("training loss is not finite; lower the learning rate")
            extractor.grad[:] = ge / len(group)
            head.grad[:] = gh / len(group)
            lr = cfg.lr
            if cfg.lr_decay == "linear":
                lr = cfg.lr * (1.0 - step / total_steps)
            sgd_step(extractor, vel_e, lr, cfg.momentum)
            sgd_step(head, vel_h, lr, cfg.momentum)
            history.append(loss)
            step += 1
    return history


def train_normal_regressor(reg, samples, cfg: TrainConfig):
    """samples: list of (x (4,H,W), target (6,H,W))."""
    rng = np.random.default_rng(cfg.seed)
    vel = np.zeros_like(reg.theta)
    total_steps = max(1, cfg.epochs * ((len(samples) + cfg.batch_images - 1) // cfg.batch_images))
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_images):
            group = [samples[i] for i in order[start : start + cfg.batch_images]]
            g = np.zeros_like(reg.grad)
            loss_sum = 0.0
            for x, target in group:
                loss, gi = normal_loss_and_grad(reg, x, target)
                loss_sum += loss
                g += gi
            loss = loss_sum / len(group)
            if not np.isfinite(loss):
                raise RuntimeError("training loss is not finite; lower the learning rate")
            reg.grad[:] = g / len(group)
            lr = cfg.lr
            if cfg.lr_decay == "linear":
                lr = cfg.lr * (1.0 - step / total_steps)
            sgd_step(reg, vel, lr, cfg.momentum)
            history.append(loss)
            step += 1
    return history


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path: str, nets: dict, meta: Optional[dict] = None) -> None:
    """JSON header (architecture + sizes) plus raw float32 payload."""
    names = sorted(nets)
    header = {
        "nets": {
            name: {
                "kind": nets[name].kind,
                "in_features": getattr(nets[name], "in_features", None),
                "n_params": nets[name].n_params,
            }
            for name in names
        },
        "order": names,
        "dtype": "<f4",
        "meta": meta or {},
    }
    with open(path, "w") as f:
        json.dump(header, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    payload = np.concatenate([nets[n].theta for n in names]).astype("<f4")
    with open(path + ".raw", "wb") as f:
        f.write(payload.tobytes())


def load_checkpoint(path: str):
    """Returns (meta, {name: net}) with weights restored (float32-rounded)."""
    with open(path) as f:
        header = json.load(f)
    payload = np.frombuffer(open(path + ".raw", "rb").read(), dtype="<f4").astype(np.float64)
    nets = {}
    off = 0
    for name in header["order"]:
        spec = header["nets"][name]
        if spec["kind"] == "head":
            net = ImplicitHead(int(spec["in_features"]))
        else:
            net = build_net(spec["kind"])
        n = spec["n_params"]
        if n != net.n_params:
            raise ValueError("checkpoint parameter count mismatch")
        net.theta[:] = payload[off : off + n]
        off += n
        nets[name] = net
    return header["meta"], nets


def write_loss_csv(path: str, history) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(history):
            f.write(f"{i},{v!r}\n")
