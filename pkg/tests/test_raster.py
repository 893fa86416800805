import numpy as np
import pytest

from hsdf.geometry import (
    CropAlignedCamera,
    Image,
    PerspectiveCamera,
    RigidPose,
    TriangleMesh,
)
from hsdf.raster import rasterize, render_all, render_normal_maps

from _helpers import latlong_sphere, quad_mesh


def sphere_camera(size=65, focal=200.0, dist=800.0):
    pp = size / 2.0
    cam = PerspectiveCamera(focal, pp, pp, RigidPose(np.eye(3), [0.0, 0.0, dist]))
    return cam, (size, size)


def test_empty_mesh_renders_background():
    cam, sz = sphere_camera()
    out = rasterize(TriangleMesh.empty(), cam, size=sz)
    assert np.max(out["mask"].pixels) == 0.0
    assert np.max(out["depth"].pixels) == 0.0
    assert np.max(out["labels"].pixels) == 0.0


def test_fullscreen_triangle_planar_depth():
    z0 = 500.0
    cam, sz = sphere_camera(size=64, focal=100.0, dist=z0)
    big = 2000.0
    mesh = TriangleMesh(
        np.array([[-big, -big, 0.0], [3 * big, -big, 0.0], [-big, 3 * big, 0.0]]),
        np.array([[0, 1, 2]]),
    )
    out = rasterize(mesh, cam, size=sz)
    assert np.min(out["mask"].pixels) == 1.0  # full coverage
    d = out["depth"].pixels[:, :, 0].astype(np.float64)
    assert np.max(np.abs(d - z0)) < 1e-4 * z0


def test_sphere_center_depth():
    r, f, dist = 80.0, 200.0, 800.0
    cam, sz = sphere_camera(65, f, dist)
    mesh = latlong_sphere(r, n_lat=48, n_lon=96)
    out = rasterize(mesh, cam, size=sz)
    center = out["depth"].pixels[32, 32, 0]
    assert out["mask"].pixels[32, 32, 0] == 1.0
    assert abs(center - (dist - r)) < 1e-3 * (dist - r)


def test_sphere_normal_maps_center_and_random_pixels():
    r, f, dist = 80.0, 200.0, 800.0
    cam, sz = sphere_camera(65, f, dist)
    mesh = latlong_sphere(r, n_lat=64, n_lon=96)
    maps = render_normal_maps(mesh, cam, size=sz)
    front = maps["front"].pixels.astype(np.float64)
    back = maps["back"].pixels.astype(np.float64)
    assert np.max(np.abs(front[32, 32] - [0.0, 0.0, -1.0])) < 1e-3
    assert np.max(np.abs(back[32, 32] - [0.0, 0.0, 1.0])) < 1e-3
    maps["front"].validate_normal_map()
    maps["back"].validate_normal_map()

    # random covered pixels against the analytic sphere normal
    out = rasterize(mesh, cam, size=sz)
    depth = out["depth"].pixels[:, :, 0].astype(np.float64)
    cov = np.nonzero(out["mask"].pixels[:, :, 0] > 0)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(cov[0]), size=500, replace=False)
    for iy, ix in zip(cov[0][pick], cov[1][pick]):
        z = depth[iy, ix]
        # back-project the pixel center to camera space, then to world
        x = (ix + 0.5 - cam.ppx) * z / f
        y = (iy + 0.5 - cam.ppy) * z / f
        p_world = np.array([x, y, z - dist])
        n_true = p_world / np.linalg.norm(p_world)
        n_got = front[iy, ix]
        cos = np.clip(np.dot(n_true, n_got), -1.0, 1.0)
        assert np.degrees(np.arccos(cos)) < 2.0


def test_depth_mask_consistency_and_front_back_order():
    cam, sz = sphere_camera()
    mesh = latlong_sphere(80.0, n_lat=24, n_lon=32)
    core_front = rasterize(mesh, cam, size=sz)
    depth = core_front["depth"].pixels[:, :, 0]
    mask = core_front["mask"].pixels[:, :, 0]
    assert np.all((depth > 0) == (mask == 1.0))

    full = render_all(mesh, cam, size=sz)
    f = full["front_normal"].pixels
    b = full["back_normal"].pixels
    covered = mask == 1.0
    # front faces toward camera (n_z < 0), back away, on a closed sphere
    assert np.all(f[covered][:, 2] < 0.1)
    assert np.all(b[covered][:, 2] > -0.1)


def test_seam_pixels_covered_exactly_once():
    cam, sz = sphere_camera(size=64, focal=100.0, dist=500.0)
    for flip in (False, True):
        verts = np.array(
            [[-100.0, -100.0, 0.0], [100.0, -100.0, 0.0], [100.0, 100.0, 0.0],
             [-100.0, 100.0, 0.0]]
        )
        faces = np.array([[0, 1, 2], [0, 2, 3]]) if not flip else \
            np.array([[0, 1, 3], [1, 2, 3]])
        m0 = rasterize(TriangleMesh(verts, faces[:1]), cam, size=sz)["mask"].pixels
        m1 = rasterize(TriangleMesh(verts, faces[1:]), cam, size=sz)["mask"].pixels
        both = rasterize(TriangleMesh(verts, faces), cam, size=sz)["mask"].pixels
        assert np.max(m0 + m1) == 1.0  # no double coverage across the seam
        assert np.array_equal((m0 + m1 > 0).astype(np.float32), both)


def test_translation_equivariance_one_pixel():
    z0, f = 500.0, 200.0
    cam, sz = sphere_camera(size=64, focal=f, dist=z0)
    tex = Image(np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32))
    mesh = quad_mesh(half=37.3, z=0.0)
    out0 = rasterize(mesh, cam, texture=tex, size=sz)
    shifted = TriangleMesh(mesh.vertices + [z0 / f, 0.0, 0.0], mesh.faces, uvs=mesh.uvs)
    out1 = rasterize(shifted, cam, texture=tex, size=sz)
    a = out0["rgb"].pixels[:, 5:-6, :]
    b = out1["rgb"].pixels[:, 6:-5, :]
    assert np.max(np.abs(a.astype(np.float64) - b)) < 1e-9
    assert np.array_equal(out0["mask"].pixels[:, 5:-6], out1["mask"].pixels[:, 6:-5])


def test_texture_lookup_gradient():
    z0 = 400.0
    cam, sz = sphere_camera(size=64, focal=100.0, dist=z0)
    th, tw = 33, 33
    tex_vals = np.zeros((th, tw, 3), dtype=np.float32)
    tex_vals[:, :, 0] = np.linspace(0, 1, tw)[None, :]
    tex_vals[:, :, 1] = np.linspace(0, 1, th)[:, None]
    tex = Image(tex_vals)
    half = 100.0
    mesh = quad_mesh(half=half, z=0.0)
    out = rasterize(mesh, cam, texture=tex, size=sz)
    # pixel (48, 16): center (48.5, 16.5) -> world x = (48.5-32)*z/f
    for ix, iy in [(48, 16), (16, 48), (40, 40)]:
        wx = (ix + 0.5 - 32.0) * z0 / 100.0
        wy = (iy + 0.5 - 32.0) * z0 / 100.0
        u = (wx + half) / (2 * half)
        v = (wy + half) / (2 * half)
        got = out["rgb"].pixels[iy, ix].astype(np.float64)
        assert abs(got[0] - u) < 2e-3
        assert abs(got[1] - v) < 2e-3


def test_labels_follow_faces():
    cam, sz = sphere_camera(size=64, focal=100.0, dist=500.0)
    mesh = quad_mesh(half=150.0)
    out = rasterize(mesh, cam, face_labels=np.array([3, 7]), size=sz)
    labs = out["labels"].pixels[:, :, 0]
    covered = out["mask"].pixels[:, :, 0] > 0
    assert set(np.unique(labs[covered])) == {3.0, 7.0}
    assert np.all(labs[~covered] == 0.0)
    # wrong length rejected
    with pytest.raises(ValueError):
        rasterize(mesh, cam, face_labels=np.array([3]), size=sz)


def test_default_labels_are_silhouette():
    cam, sz = sphere_camera()
    mesh = latlong_sphere(80.0, n_lat=12, n_lon=16)
    out = rasterize(mesh, cam, size=sz)
    assert np.array_equal(out["labels"].pixels, out["mask"].pixels)


def test_crop_aligned_rasterization():
    mesh = latlong_sphere(6.0, n_lat=24, n_lon=32)
    cam = CropAlignedCamera([-8.0, -8.0, -8.0], [8.0, 8.0, 8.0], 64, 64)
    out = rasterize(mesh, cam)
    mask = out["mask"].pixels[:, :, 0]
    assert mask[32, 32] == 1.0
    assert mask[2, 2] == 0.0
    # silhouette radius ~ 6 mm / 16 mm * 64 px = 24 px
    area = mask.sum()
    assert abs(area - np.pi * 24.0**2) < 0.08 * np.pi * 24.0**2
    # normalized depth at center ~ (-6 mm -> z_n = -0.75)
    d = out["depth"].pixels[32, 32, 0]
    assert abs(d - (-0.75)) < 0.02


def test_band_count_does_not_change_output(monkeypatch):
    cam, sz = sphere_camera()
    mesh = latlong_sphere(80.0, n_lat=24, n_lon=32)
    monkeypatch.setenv("HSDF_THREADS", "1")
    a = render_all(mesh, cam, size=sz)
    monkeypatch.setenv("HSDF_THREADS", "5")
    b = render_all(mesh, cam, size=sz)
    for key in ("rgb", "depth", "mask", "labels", "front_normal", "back_normal"):
        assert np.array_equal(a[key].pixels, b[key].pixels), key
