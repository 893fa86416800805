import numpy as np
import pytest

from hsdf.field_ops import (
    CarveGain,
    MeanKernel,
    SobelKernel7,
    carve_normals,
    compose_field,
    highpass_target,
    mean_convolve3,
    normal_displacement,
)
from hsdf.geometry import CropAlignedCamera, Image, ScalarField3


# ---------------------------------------------------------------------------
# independent oracles


def oracle_mean3(values, k):
    """Per-voxel k^3 box mean over an edge-replicated pad."""
    r = k // 2
    p = np.pad(values, r, mode="edge")
    out = np.empty_like(values)
    nx, ny, nz = values.shape
    for i in range(nx):
        for j in range(ny):
            for l in range(nz):
                out[i, j, l] = np.mean(p[i : i + k, j : j + k, l : l + k])
    return out


def oracle_correlate2d(channel, kern):
    """Per-pixel sliding inner product over an edge-replicated pad."""
    kh, kw = kern.shape
    ry, rx = kh // 2, kw // 2
    p = np.pad(channel, ((ry, ry), (rx, rx)), mode="edge")
    h, w = channel.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = np.sum(p[y : y + kh, x : x + kw] * kern)
    return out


def oracle_displacement(nm_pixels, lam):
    kern = SobelKernel7()
    resp = oracle_correlate2d(nm_pixels[:, :, 0].astype(np.float64), kern.gx())
    resp += oracle_correlate2d(nm_pixels[:, :, 1].astype(np.float64), kern.gy())
    resp *= lam
    resp[np.linalg.norm(nm_pixels[:, :, :3].astype(np.float64), axis=2) == 0] = 0.0
    return resp


def oracle_bilinear(arr, u, v):
    h, w = arr.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    x0 = min(int(u), w - 2) if w > 1 else 0
    y0 = min(int(v), h - 2) if h > 1 else 0
    tx, ty = u - x0, v - y0
    return (
        arr[y0, x0] * (1 - tx) * (1 - ty)
        + arr[y0, x0 + 1] * tx * (1 - ty)
        + arr[y0 + 1, x0] * (1 - tx) * ty
        + arr[y0 + 1, x0 + 1] * tx * ty
    )


def oracle_carve(field, front_px, back_px, camera, lam):
    """Column-by-column reimplementation of the carve rule."""
    fd = oracle_displacement(front_px, lam)
    bd = oracle_displacement(back_px, lam)
    vals = field.values.copy()
    xs, ys, zs = field.axis_coords(0), field.axis_coords(1), field.axis_coords(2)
    ext = camera.extent()
    scale = field.voxel_size()
    for i in range(field.dims[0]):
        for j in range(field.dims[1]):
            col = field.values[i, j, :]
            crossings = []
            for l in range(len(col) - 1):
                a, b = col[l], col[l + 1]
                if (a <= 0) != (b <= 0):
                    t = a / (a - b) if a != b else 0.0
                    crossings.append(zs[l] + t * (zs[1] - zs[0]))
            if not crossings:
                continue
            mid = 0.5 * (crossings[0] + crossings[-1])
            u = (xs[i] - camera.box_min[0]) / ext[0] * camera.width - 0.5
            v = (ys[j] - camera.box_min[1]) / ext[1] * camera.height - 0.5
            f_mm = oracle_bilinear(fd, u, v) * scale
            b_mm = oracle_bilinear(bd, u, v) * scale
            for l in range(len(col)):
                vals[i, j, l] += f_mm if zs[l] <= mid else b_mm
    return vals


def sphere_field(dims, box_half, radius):
    fld = ScalarField3(
        dims, [-box_half] * 3, [box_half] * 3, np.zeros(dims)
    )
    pos = fld.node_positions()
    fld.values[:] = np.linalg.norm(pos, axis=-1) - radius
    return fld


# ---------------------------------------------------------------------------
# mean kernel


def test_mean_kernel_validation():
    MeanKernel(5)
    with pytest.raises(ValueError):
        MeanKernel(4)
    with pytest.raises(ValueError):
        MeanKernel(-1)


def test_mean_convolve_constant_field():
    dims = (7, 8, 9)
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 1], np.full(dims, 3.25))
    out = mean_convolve3(fld, MeanKernel(5))
    assert np.max(np.abs(out.values - 3.25)) < 1e-14


def test_mean_convolve_impulse():
    dims = (9, 9, 9)
    vals = np.zeros(dims)
    vals[4, 4, 4] = 1.0
    out = mean_convolve3(ScalarField3(dims, [0, 0, 0], [1, 1, 1], vals), MeanKernel(5))
    want = np.zeros(dims)
    want[2:7, 2:7, 2:7] = 1.0 / 125.0
    assert np.max(np.abs(out.values - want)) < 1e-15


def test_mean_convolve_matches_bruteforce():
    rng = np.random.default_rng(10)
    for k in (3, 5):
        vals = rng.normal(size=(12, 12, 12))
        fld = ScalarField3((12, 12, 12), [0, 0, 0], [1, 1, 1], vals)
        out = mean_convolve3(fld, MeanKernel(k))
        assert np.max(np.abs(out.values - oracle_mean3(vals, k))) < 1e-10


def test_mean_convolve_rejects_oversized_kernel():
    fld = ScalarField3((4, 4, 4), [0, 0, 0], [1, 1, 1], np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        mean_convolve3(fld, MeanKernel(5))


def test_mean_convolve_is_linear():
    rng = np.random.default_rng(12)
    dims = (8, 8, 8)
    a = rng.normal(size=dims)
    b = rng.normal(size=dims)
    box = ([0, 0, 0], [1, 1, 1])
    f = lambda v: mean_convolve3(ScalarField3(dims, *box, v), MeanKernel(3)).values
    assert np.max(np.abs(f(2.0 * a - 0.5 * b) - (2.0 * f(a) - 0.5 * f(b)))) < 1e-12


def test_mean_preserves_sum_of_interior_supported_field():
    rng = np.random.default_rng(13)
    dims = (14, 14, 14)
    vals = np.zeros(dims)
    vals[3:-3, 3:-3, 3:-3] = rng.uniform(0.5, 1.5, size=(8, 8, 8))
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 1], vals)
    out = mean_convolve3(fld, MeanKernel(5))
    assert abs(out.values.mean() - vals.mean()) < 1e-10


# ---------------------------------------------------------------------------
# high-pass target


def test_highpass_constant_is_zero():
    dims = (7, 7, 7)
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 1], np.full(dims, -2.0))
    assert np.max(np.abs(highpass_target(fld, MeanKernel(5)).values)) < 1e-14


def test_highpass_linear_ramp_interior_zero():
    dims = (9, 9, 13)
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 3], np.zeros(dims))
    fld.values[:] = fld.node_positions()[..., 2]
    hp = highpass_target(fld, MeanKernel(5))
    assert np.max(np.abs(hp.values[:, :, 2:-2])) < 1e-13


def test_highpass_plus_mean_reconstructs():
    rng = np.random.default_rng(14)
    dims = (10, 11, 12)
    vals = rng.normal(size=dims)
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 1], vals)
    k = MeanKernel(5)
    recon = highpass_target(fld, k).values + mean_convolve3(fld, k).values
    assert np.max(np.abs(recon - vals)) < 1e-12


def test_highpass_random_matches_oracle():
    rng = np.random.default_rng(15)
    vals = rng.normal(size=(12, 12, 12))
    fld = ScalarField3((12, 12, 12), [0, 0, 0], [1, 1, 1], vals)
    got = highpass_target(fld, MeanKernel(5)).values
    assert np.max(np.abs(got - (vals - oracle_mean3(vals, 5)))) < 1e-10


def test_highpass_kills_dc_of_interior_supported_field():
    rng = np.random.default_rng(16)
    dims = (16, 16, 16)
    vals = np.zeros(dims)
    vals[4:-4, 4:-4, 4:-4] = rng.uniform(0.5, 1.5, size=(8, 8, 8))
    fld = ScalarField3(dims, [0, 0, 0], [1, 1, 1], vals)
    hp = highpass_target(fld, MeanKernel(5))
    assert abs(hp.values.mean()) < 1e-8 * abs(vals.mean())


# ---------------------------------------------------------------------------
# Sobel kernels


def test_sobel_entries_sum_to_zero():
    kern = SobelKernel7()
    assert kern.gx().shape == (7, 7)
    assert abs(kern.gx().sum()) == 0.0
    assert abs(kern.gy().sum()) == 0.0
    assert np.array_equal(kern.gy(), kern.gx().T)


def test_sobel_unit_ramp_response_is_one():
    kern = SobelKernel7()
    xs = np.arange(7, dtype=np.float64)
    ramp = np.tile(xs, (7, 1))
    assert abs(np.sum(ramp * kern.gx()) - 1.0) < 1e-12
    assert abs(np.sum(ramp.T * kern.gy()) - 1.0) < 1e-12


def test_carve_gain_validation():
    CarveGain(0.0)
    with pytest.raises(ValueError):
        CarveGain(-0.5)


# ---------------------------------------------------------------------------
# normal displacement


def test_displacement_constant_map_is_zero():
    px = np.zeros((16, 16, 3), dtype=np.float32)
    px[:, :] = [0.6, 0.0, -0.8]
    out = normal_displacement(Image(px), SobelKernel7(), CarveGain(1.0))
    assert np.max(np.abs(out.pixels)) < 1e-12


def test_displacement_zero_map_is_zero():
    out = normal_displacement(Image.zeros(12, 12, 3), SobelKernel7(), CarveGain(2.0))
    assert np.max(np.abs(out.pixels)) == 0.0


def test_displacement_unit_ramp_gives_gain():
    h, w = 14, 18
    px = np.zeros((h, w, 3), dtype=np.float64)
    px[:, :, 0] = np.arange(w, dtype=np.float64)[None, :] + 1.0  # nonzero everywhere
    px[:, :, 2] = 0.25
    for lam in (1.0, 1.5):
        out = normal_displacement(Image(px), SobelKernel7(), CarveGain(lam))
        interior = out.pixels[3:-3, 3:-3, 0]
        assert np.max(np.abs(interior - lam)) < 1e-10


def test_displacement_random_matches_bruteforce():
    rng = np.random.default_rng(17)
    px = rng.normal(size=(32, 32, 3))
    px /= np.linalg.norm(px, axis=2, keepdims=True)
    px[rng.uniform(size=(32, 32)) < 0.2] = 0.0  # background holes
    img = Image(px.astype(np.float32))
    got = normal_displacement(img, SobelKernel7(), CarveGain(1.0)).pixels[:, :, 0]
    want = oracle_displacement(img.pixels, 1.0)
    assert np.max(np.abs(got - want)) < 1e-10


def test_displacement_translation_equivariance():
    rng = np.random.default_rng(18)
    base = rng.normal(size=(40, 40, 3))
    img1 = Image(base[4:36, 4:36].astype(np.float32))
    img2 = Image(base[6:38, 6:38].astype(np.float32))  # shifted view
    d1 = normal_displacement(img1, SobelKernel7(), CarveGain(1.0)).pixels[:, :, 0]
    d2 = normal_displacement(img2, SobelKernel7(), CarveGain(1.0)).pixels[:, :, 0]
    assert np.max(np.abs(d1[2 + 3 : -3, 2 + 3 : -3] - d2[3:-5, 3:-5])) < 1e-12


# ---------------------------------------------------------------------------
# carving


def _cam(fld, w, h):
    return CropAlignedCamera(fld.box_min, fld.box_max, w, h)


def test_carve_zero_maps_is_identity():
    fld = sphere_field((20, 20, 20), 10.0, 6.0)
    cam = _cam(fld, 24, 24)
    out = carve_normals(fld, Image.zeros(24, 24, 3), Image.zeros(24, 24, 3), cam)
    assert np.array_equal(out.values, fld.values)


def test_carve_constant_maps_is_identity():
    fld = sphere_field((16, 16, 16), 8.0, 5.0)
    cam = _cam(fld, 16, 16)
    px = np.zeros((16, 16, 3), dtype=np.float32)
    px[:, :] = [0.0, 0.6, -0.8]
    out = carve_normals(fld, Image(px), Image(px), cam)
    assert np.max(np.abs(out.values - fld.values)) < 1e-12


def test_carve_front_band_shifts_front_half_only():
    fld = sphere_field((24, 24, 24), 12.0, 7.0)
    w = h = 24
    cam = _cam(fld, w, h)
    slope = 0.02
    px = np.zeros((h, w, 3), dtype=np.float64)
    px[:, :, 0] = slope * np.arange(w)[None, :]
    px[:, :, 2] = -np.sqrt(np.maximum(1.0 - px[:, :, 0] ** 2, 0.0))
    front = Image(px)
    back = Image.zeros(w, h, 3)
    lam = 1.0
    out = carve_normals(fld, front, back, cam, gain=CarveGain(lam))

    want = oracle_carve(fld, front.pixels, back.pixels, cam, lam)
    assert np.max(np.abs(out.values - want)) < 1e-10

    # no-crossing columns (outside the sphere silhouette) untouched
    changed = np.any(np.abs(out.values - fld.values) > 0, axis=2)
    pos = fld.node_positions()
    rho = np.sqrt(pos[..., 0] ** 2 + pos[..., 1] ** 2)
    outside = np.all(rho > 7.5, axis=2)
    assert not np.any(changed & outside)

    # back half of interior columns untouched (back map is zero)
    mid_k = 12
    inside = np.any(fld.values < 0, axis=2)
    back_vals = out.values[:, :, mid_k + 2 :]
    assert np.max(np.abs(back_vals - fld.values[:, :, mid_k + 2 :])[inside]) < 1e-12


def test_carve_random_matches_oracle():
    rng = np.random.default_rng(19)
    dims = (14, 15, 16)
    fld = ScalarField3(dims, [-6, -7, -8], [6, 7, 8], rng.normal(size=dims))
    w, h = 20, 18
    cam = _cam(fld, w, h)
    f = rng.normal(size=(h, w, 3))
    b = rng.normal(size=(h, w, 3))
    front, back = Image(f), Image(b)
    out = carve_normals(fld, front, back, cam, gain=CarveGain(0.8))
    want = oracle_carve(fld, front.pixels, back.pixels, cam, 0.8)
    assert np.max(np.abs(out.values - want)) < 1e-10


def test_carve_rejects_mismatched_registration():
    fld = sphere_field((8, 8, 8), 4.0, 2.0)
    cam = CropAlignedCamera([-5, -4, -4], [4, 4, 4], 8, 8)
    with pytest.raises(ValueError):
        carve_normals(fld, Image.zeros(8, 8, 3), Image.zeros(8, 8, 3), cam)
    cam2 = _cam(fld, 10, 8)
    with pytest.raises(ValueError):
        carve_normals(fld, Image.zeros(8, 8, 3), Image.zeros(8, 8, 3), cam2)


# ---------------------------------------------------------------------------
# composition


def test_compose_neutral_elements():
    fld = sphere_field((12, 12, 12), 6.0, 3.5)
    zero = fld.copy_with(np.zeros(fld.dims))
    cam = _cam(fld, 12, 12)
    nm0 = Image.zeros(12, 12, 3)
    out = compose_field(fld, zero, nm0, nm0, cam)
    assert np.array_equal(out.values, fld.values)
    out2 = compose_field(zero, fld, nm0, nm0, cam)
    assert np.array_equal(out2.values, fld.values)


def test_compose_equals_manual_composition():
    rng = np.random.default_rng(20)
    dims = (12, 12, 12)
    base = ScalarField3(dims, [-5, -5, -5], [5, 5, 5], rng.normal(size=dims))
    fine = base.copy_with(0.1 * rng.normal(size=dims))
    cam = _cam(base, 16, 16)
    f = Image(rng.normal(size=(16, 16, 3)))
    b = Image(rng.normal(size=(16, 16, 3)))
    got = compose_field(base, fine, f, b, cam, gain=CarveGain(0.5))
    summed = base.copy_with(base.values + fine.values)
    want = carve_normals(summed, f, b, cam, gain=CarveGain(0.5))
    assert np.max(np.abs(got.values - want.values)) < 1e-12


def test_compose_rejects_mismatched_grids():
    a = sphere_field((8, 8, 8), 4.0, 2.0)
    b = sphere_field((8, 8, 10), 4.0, 2.0)
    cam = _cam(a, 8, 8)
    with pytest.raises(ValueError):
        compose_field(a, b, Image.zeros(8, 8, 3), Image.zeros(8, 8, 3), cam)
