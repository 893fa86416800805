"""Deterministic software rasterizer.

Produces z-buffered renders (rgb / depth / coverage mask / per-face region
labels) plus front and back normal maps, the training targets for the
normal regressor. Pixel centers sit at (x + 0.5, y + 0.5); seam pixels are
resolved by the top-left fill rule so renders are bit-deterministic.

Rasterization runs over horizontal row bands (see parallel.worker_count);
each band owns its slice of the z-buffer and faces are visited in index
order within every band, so output is identical for any worker count.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import (
    CropAlignedCamera,
    Image,
    PerspectiveCamera,
    TriangleMesh,
    mesh_vertex_normals,
)
from .parallel import parallel_map, worker_count


def _screen_vertices(mesh, camera):
    """Continuous screen coords (u, v) and per-vertex depth for buffering."""
    if isinstance(camera, PerspectiveCamera):
        c = camera.pose.apply(mesh.vertices)
        z = c[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.ppx + camera.focal * c[:, 0] / z
            v = camera.ppy + camera.focal * c[:, 1] / z
        return u, v, z, True
    rel = (mesh.vertices - camera.box_min) / camera.extent()
    return rel[:, 0] * camera.width, rel[:, 1] * camera.height, 2.0 * rel[:, 2] - 1.0, False


def _edge(ax, ay, bx, by, px, py):
    return (px - ax) * (by - ay) - (py - ay) * (bx - ax)


def _is_topleft(dx, dy):
    # y grows downward: left edges go up (dy < 0), top edges go right at
    # constant y (dy == 0, dx > 0)
    return dy < 0 or (dy == 0 and dx > 0)


def _raster_band(mesh, u, v, z, persp, width, y_lo, y_hi):
    """Fill one horizontal band. Returns per-pixel face index, perspective
    corrected barycentrics and depth, for nearest and farthest surfaces."""
    rows = y_hi - y_lo
    f_face = np.full((rows, width), -1, dtype=np.int64)
    b_face = np.full((rows, width), -1, dtype=np.int64)
    f_z = np.full((rows, width), np.inf)
    b_z = np.full((rows, width), -np.inf)
    f_bary = np.zeros((rows, width, 3))
    b_bary = np.zeros((rows, width, 3))

    for fi in range(mesh.num_faces):
        i0, i1, i2 = mesh.faces[fi]
        if persp and (z[i0] <= 1e-9 or z[i1] <= 1e-9 or z[i2] <= 1e-9):
            continue
        order = (i0, i1, i2)
        area2 = _edge(u[i0], v[i0], u[i1], v[i1], u[i2], v[i2])
        if area2 < 0:
            order = (i0, i2, i1)
            area2 = -area2
        if area2 < 1e-12:
            continue
        a, b, c = order
        x_min = min(u[a], u[b], u[c])
        x_max = max(u[a], u[b], u[c])
        y_min = min(v[a], v[b], v[c])
        y_max = max(v[a], v[b], v[c])
        ix0 = max(0, int(np.ceil(x_min - 0.5)))
        ix1 = min(width - 1, int(np.floor(x_max - 0.5)))
        iy0 = max(y_lo, int(np.ceil(y_min - 0.5)))
        iy1 = min(y_hi - 1, int(np.floor(y_max - 0.5)))
        if ix0 > ix1 or iy0 > iy1:
            continue
        px = np.arange(ix0, ix1 + 1) + 0.5
        py = np.arange(iy0, iy1 + 1) + 0.5
        gx, gy = np.meshgrid(px, py)
        w0 = _edge(u[b], v[b], u[c], v[c], gx, gy)
        w1 = _edge(u[c], v[c], u[a], v[a], gx, gy)
        w2 = _edge(u[a], v[a], u[b], v[b], gx, gy)
        cover = (
            (w0 > 0) | ((w0 == 0) & _is_topleft(u[c] - u[b], v[c] - v[b]))
        ) & (
            (w1 > 0) | ((w1 == 0) & _is_topleft(u[a] - u[c], v[a] - v[c]))
        ) & (
            (w2 > 0) | ((w2 == 0) & _is_topleft(u[b] - u[a], v[b] - v[a]))
        )
        if not cover.any():
            continue
        l0, l1, l2 = w0 / area2, w1 / area2, w2 / area2
        if persp:
            denom = l0 / z[a] + l1 / z[b] + l2 / z[c]
            zpix = 1.0 / denom
            bary = np.stack(
                [(l0 / z[a]) / denom, (l1 / z[b]) / denom, (l2 / z[c]) / denom], axis=-1
            )
        else:
            zpix = l0 * z[a] + l1 * z[b] + l2 * z[c]
            bary = np.stack([l0, l1, l2], axis=-1)
        # map barycentrics back to the face's stored vertex order
        if order != (i0, i1, i2):
            bary = bary[:, :, [0, 2, 1]]

        ys = slice(iy0 - y_lo, iy1 + 1 - y_lo)
        xs = slice(ix0, ix1 + 1)
        take_f = cover & (zpix < f_z[ys, xs])
        if take_f.any():
            f_z[ys, xs][take_f] = zpix[take_f]
            f_face[ys, xs][take_f] = fi
            f_bary[ys, xs][take_f] = bary[take_f]
        take_b = cover & (zpix > b_z[ys, xs])
        if take_b.any():
            b_z[ys, xs][take_b] = zpix[take_b]
            b_face[ys, xs][take_b] = fi
            b_bary[ys, xs][take_b] = bary[take_b]
    return f_face, f_bary, f_z, b_face, b_bary, b_z


def _image_size(camera, size):
    if size is not None:
        return int(size[0]), int(size[1])
    if isinstance(camera, CropAlignedCamera):
        return camera.width, camera.height
    raise ValueError("a perspective render needs an explicit (width, height)")


def _raster_core(mesh: TriangleMesh, camera, size=None) -> dict:
    width, height = _image_size(camera, size)
    u, v, z, persp = _screen_vertices(mesh, camera)
    n_bands = min(worker_count(), height)
    bounds = np.linspace(0, height, n_bands + 1).astype(int)
    bands = parallel_map(
        lambda k: _raster_band(mesh, u, v, z, persp, width, bounds[k], bounds[k + 1]),
        range(n_bands),
    )
    f_face = np.concatenate([b[0] for b in bands], axis=0)
    f_bary = np.concatenate([b[1] for b in bands], axis=0)
    f_z = np.concatenate([b[2] for b in bands], axis=0)
    b_face = np.concatenate([b[3] for b in bands], axis=0)
    b_bary = np.concatenate([b[4] for b in bands], axis=0)
    b_z = np.concatenate([b[5] for b in bands], axis=0)
    return {
        "front": (f_face, f_bary, f_z),
        "back": (b_face, b_bary, b_z),
        "persp": persp,
    }


def _interpolate(mesh, face, bary, attr):
    """Per-pixel barycentric blend of a per-vertex attribute (V, C)."""
    cov = face >= 0
    out = np.zeros(face.shape + (attr.shape[1],))
    if cov.any():
        fv = mesh.faces[face[cov]]
        out[cov] = np.einsum("nk,nkc->nc", bary[cov], attr[fv])
    return out


def _sample_texture(texture: Image, uv: np.ndarray, cov: np.ndarray) -> np.ndarray:
    t = np.asarray(texture.pixels, dtype=np.float64)
    th, tw = t.shape[:2]
    out = np.zeros(cov.shape + (t.shape[2],))
    if cov.any():
        tu = np.clip(uv[cov][:, 0], 0.0, 1.0) * (tw - 1)
        tv = np.clip(uv[cov][:, 1], 0.0, 1.0) * (th - 1)
        x0 = np.minimum(tu.astype(np.int64), tw - 2) if tw > 1 else np.zeros(tu.shape, int)
        y0 = np.minimum(tv.astype(np.int64), th - 2) if th > 1 else np.zeros(tv.shape, int)
        fx = (tu - x0)[:, None]
        fy = (tv - y0)[:, None]
        x1 = np.minimum(x0 + 1, tw - 1)
        y1 = np.minimum(y0 + 1, th - 1)
        out[cov] = (
            t[y0, x0] * (1 - fx) * (1 - fy)
            + t[y0, x1] * fx * (1 - fy)
            + t[y1, x0] * (1 - fx) * fy
            + t[y1, x1] * fx * fy
        )
    return out


_FLAT_GRAY = 0.75


def rasterize(
    mesh: TriangleMesh,
    camera,
    texture: Optional[Image] = None,
    face_labels: Optional[np.ndarray] = None,
    size=None,
) -> dict:
    """Z-buffered render: {rgb, depth, mask, labels} as Images.

    depth holds camera-space z (mm) of the nearest surface, 0 at
    background; labels holds the face's region id (all-1 when no per-face
    labels are given); rgb is UV-textured or flat gray. size=(width,
    height) is required for perspective cameras; crop-aligned cameras
    carry their own.
    """
    core = _raster_core(mesh, camera, size)
    face, bary, zbuf = core["front"]
    cov = face >= 0

    depth = np.where(cov, zbuf, 0.0)
    mask = cov.astype(np.float64)

    if face_labels is not None:
        lab_per_face = np.asarray(face_labels, dtype=np.float64).ravel()
        if lab_per_face.size != mesh.num_faces:
            raise ValueError("face_labels length must equal face count")
    else:
        lab_per_face = np.ones(mesh.num_faces)
    labels = np.zeros(face.shape)
    if cov.any():
        labels[cov] = lab_per_face[face[cov]]

    if texture is not None and mesh.uvs is not None:
        uv = _interpolate(mesh, face, bary, mesh.uvs)
        rgb = _sample_texture(texture, uv, cov)
        if rgb.shape[2] == 1:
            rgb = np.repeat(rgb, 3, axis=2)
    else:
        rgb = np.zeros(face.shape + (3,))
        rgb[cov] = _FLAT_GRAY
    return {
        "rgb": Image(rgb.astype(np.float32)),
        "depth": Image(depth.astype(np.float32)[:, :, None]),
        "mask": Image(mask.astype(np.float32)[:, :, None]),
        "labels": Image(labels.astype(np.float32)[:, :, None]),
    }


def _normals_from_buffer(mesh, cam_normals, face, bary):
    cov = face >= 0
    n = _interpolate(mesh, face, bary, cam_normals)
    lens = np.linalg.norm(n, axis=2)
    ok = cov & (lens > 1e-12)
    n[ok] /= lens[ok][:, None]
    n[~ok] = 0.0
    return n


def render_normal_maps(mesh: TriangleMesh, camera, size=None) -> dict:
    """Camera-space unit-normal maps of the nearest ({front}) and farthest
    ({back}) surface per pixel; zero at background."""
    core = _raster_core(mesh, camera, size)
    normals = mesh.normals if mesh.normals is not None else mesh_vertex_normals(mesh)
    if isinstance(camera, PerspectiveCamera):
        cam_normals = normals @ camera.pose.rotation.T
    else:
        cam_normals = normals
    f_face, f_bary, _ = core["front"]
    b_face, b_bary, _ = core["back"]
    front = _normals_from_buffer(mesh, cam_normals, f_face, f_bary)
    back = _normals_from_buffer(mesh, cam_normals, b_face, b_bary)
    return {"front": Image(front.astype(np.float32)),
            "back": Image(back.astype(np.float32))}


def render_all(
    mesh: TriangleMesh,
    camera,
    texture: Optional[Image] = None,
    face_labels: Optional[np.ndarray] = None,
    size=None,
) -> dict:
    """Single-pass convenience: rasterize outputs plus both normal maps."""
    core = _raster_core(mesh, camera, size)
    face, bary, zbuf = core["front"]
    cov = face >= 0
    out = {}
    out["depth"] = Image(np.where(cov, zbuf, 0.0).astype(np.float32)[:, :, None])
    out["mask"] = Image(cov.astype(np.float32)[:, :, None])
    lab_per_face = (
        np.ones(mesh.num_faces)
        if face_labels is None
        else np.asarray(face_labels, dtype=np.float64).ravel()
    )
    labels = np.zeros(face.shape)
    if cov.any():
        labels[cov] = lab_per_face[face[cov]]
    out["labels"] = Image(labels.astype(np.float32)[:, :, None])
    if texture is not None and mesh.uvs is not None:
        uv = _interpolate(mesh, face, bary, mesh.uvs)
        rgb = _sample_texture(texture, uv, cov)
        if rgb.shape[2] == 1:
            rgb = np.repeat(rgb, 3, axis=2)
    else:
        rgb = np.zeros(face.shape + (3,))
        rgb[cov] = _FLAT_GRAY
    out["rgb"] = Image(rgb.astype(np.float32))

    normals = mesh.normals if mesh.normals is not None else mesh_vertex_normals(mesh)
    if isinstance(camera, PerspectiveCamera):
        cam_normals = normals @ camera.pose.rotation.T
    else:
        cam_normals = normals
    b_face, b_bary, _ = core["back"]
    out["front_normal"] = Image(
        _normals_from_buffer(mesh, cam_normals, face, bary).astype(np.float32))
    out["back_normal"] = Image(
        _normals_from_buffer(mesh, cam_normals, b_face, b_bary).astype(np.float32))
    return out
