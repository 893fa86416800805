"""Shared geometric primitives: poses, meshes, scalar grids, images, cameras.

Conventions used everywhere in this package:

* World units are millimeters.
* Camera space is +x right, +y down, +z forward (image v grows with +y).
* ``project`` returns continuous image-plane coordinates where the center
  of pixel ``(ix, iy)`` sits at ``(ix + 0.5, iy + 0.5)``.
* ``bilinear_sample`` takes pixel-index coordinates (integer values hit
  pixel centers exactly); continuous coords convert via ``idx = cont - 0.5``.
* Scalar grids are node-centered: node ``i`` of an axis with ``n`` nodes
  lies at ``min + i * (max - min) / (n - 1)``, so the lattice spans the box
  inclusively. Sign convention: negative inside the surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np


class OutOfDomainError(ValueError):
    """A query point lies outside the domain of a field or camera box."""


class BehindCameraError(ValueError):
    """A point has non-positive camera-space depth under a perspective camera."""


def _as_vec3(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


@dataclass
class RigidPose:
    """Similarity transform p' = scale * R @ p + t with orthonormal R."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = _as_vec3(self.translation)
        self.scale = float(self.scale)

    def validate(self) -> None:
        r = self.rotation
        if not np.all(np.abs(r.T @ r - np.eye(3)) <= 1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N,3) array or single 3-vector."""
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation / self.scale

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3), 1.0)


def rotation_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = _as_vec3(axis)
    n = np.linalg.norm(a)
    if n == 0.0:
        return np.eye(3)
    a = a / n
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of an orthonormal matrix, in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class TriangleMesh:
    """Indexed triangle mesh; vertices in mm, optional per-vertex uvs/normals."""

    vertices: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> None:
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= self.num_vertices:
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references the same vertex twice")
        if self.normals is not None and self.normals.size:
            lens = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-6):
                raise ValueError("stored normals are not unit length within 1e-6")
        if self.uvs is not None and self.uvs.shape[0] != self.num_vertices:
            raise ValueError("uv count must match vertex count")

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def face_normals_and_areas(mesh: TriangleMesh):
    """Unnormalized face cross products (length = 2 * area) and areas."""
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    cross = np.cross(e1, e2)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    return cross, areas


def mesh_vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals; degenerate faces skipped, isolated vertices zero."""
    acc = np.zeros((mesh.num_vertices, 3))
    if mesh.num_faces:
        cross, areas = face_normals_and_areas(mesh)
        keep = areas > 1e-12
        f = mesh.faces[keep]
        c = cross[keep]
        for k in range(3):
            np.add.at(acc, f[:, k], c)
    lens = np.linalg.norm(acc, axis=1)
    nz = lens > 0
    acc[nz] /= lens[nz, None]
    return acc


@dataclass
class ScalarField3:
    """Scalar samples on a node-centered lattice over a world-space box.

    ``values`` has shape (nx, ny, nz) indexed [i, j, k]; the serialized
    layout is x-fastest (Fortran ravel of this array). Negative inside.
    """

    dims: tuple
    box_min: np.ndarray
    box_max: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.box_min = _as_vec3(self.box_min)
        self.box_max = _as_vec3(self.box_max)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.dims)

    def validate(self) -> None:
        if any(d < 2 for d in self.dims):
            raise ValueError("each axis needs at least 2 nodes")
        if not np.all(self.box_min < self.box_max):
            raise ValueError("box min must be < box max on every axis")
        if self.values.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise ValueError("value count does not match dims")

    def spacing(self) -> np.ndarray:
        return (self.box_max - self.box_min) / (np.array(self.dims) - 1.0)

    def voxel_size(self) -> float:
        """Scalar voxel size: mean of the per-axis node spacings."""
        return float(np.mean(self.spacing()))

    def axis_coords(self, axis: int) -> np.ndarray:
        return np.linspace(self.box_min[axis], self.box_max[axis], self.dims[axis])

    def node_positions(self) -> np.ndarray:
        """All node positions, shape (nx, ny, nz, 3)."""
        xs = self.axis_coords(0)
        ys = self.axis_coords(1)
        zs = self.axis_coords(2)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def copy_with(self, values: np.ndarray) -> "ScalarField3":
        return ScalarField3(self.dims, self.box_min.copy(), self.box_max.copy(), values)


def trilinear_sample(fld: ScalarField3, points) -> np.ndarray:
    """Trilinear interpolation at one point or an (N,3) array of points.

    Raises OutOfDomainError for points outside the box (closed).
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    lo, hi = fld.box_min, fld.box_max
    eps = 1e-9 * np.maximum(hi - lo, 1.0)
    if np.any(p < lo - eps) or np.any(p > hi + eps):
        raise OutOfDomainError("point outside field box")
    dims = np.array(fld.dims)
    g = (p - lo) / (hi - lo) * (dims - 1)
    g = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(g.astype(np.int64), dims - 2)
    t = g - i0
    v = fld.values
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    c000 = v[ix, iy, iz]
    c100 = v[ix + 1, iy, iz]
    c010 = v[ix, iy + 1, iz]
    c110 = v[ix + 1, iy + 1, iz]
    c001 = v[ix, iy, iz + 1]
    c101 = v[ix + 1, iy, iz + 1]
    c011 = v[ix, iy + 1, iz + 1]
    c111 = v[ix + 1, iy + 1, iz + 1]
    c00 = c000 * (1 - tx) + c100 * tx
    c10 = c010 * (1 - tx) + c110 * tx
    c01 = c001 * (1 - tx) + c101 * tx
    c11 = c011 * (1 - tx) + c111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    return float(out[0]) if single else out


@dataclass
class Image:
    """Float32 raster image, row-major, top-left origin, shape (h, w, c).

    Channel roles by convention: RGB in [0,1]; label masks store integer
    ids as reals; depth in mm with 0 background; normal maps hold unit
    camera-space vectors (zero where background). File formats accept the
    1/3/6-channel roles; in memory any positive channel count is allowed
    (feature maps are images too).
    """

    pixels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pixels)
        # float64 is tolerated in memory so convolution outputs keep full
        # precision; every file format still stores 32-bit.
        if a.dtype != np.float64:
            a = a.astype(np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] < 1:
            raise ValueError("image must be (h, w, c) with c >= 1")
        self.pixels = a

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def validate_normal_map(self) -> None:
        mags = np.linalg.norm(self.pixels[:, :, :3].astype(np.float64), axis=2)
        bad = (mags > 0) & (np.abs(mags - 1.0) > 1e-4)
        if np.any(bad):
            raise ValueError("nonzero normal-map pixels must be unit within 1e-4")

    @staticmethod
    def zeros(width: int, height: int, channels: int = 1) -> "Image":
        return Image(np.zeros((height, width, channels), dtype=np.float32))


def bilinear_sample(img_or_array, u, v) -> np.ndarray:
    """Per-channel bilinear lookup at pixel-index coords, clamp-to-edge.

    Accepts an Image or a raw (h, w, c) array (float64 arrays stay float64,
    which the feature-sampling path relies on). u, v may be scalars or
    equal-shaped arrays; output shape is u.shape + (c,).
    """
    a = img_or_array.pixels if isinstance(img_or_array, Image) else np.asarray(img_or_array)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w = a.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    single = u.ndim == 0
    u = np.atleast_1d(np.clip(u, 0.0, w - 1.0))
    v = np.atleast_1d(np.clip(v, 0.0, h - 1.0))
    x0 = np.minimum(u.astype(np.int64), w - 2) if w > 1 else np.zeros(u.shape, np.int64)
    y0 = np.minimum(v.astype(np.int64), h - 2) if h > 1 else np.zeros(v.shape, np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (u - x0)[..., None]
    ty = (v - y0)[..., None]
    out = (
        a[y0, x0] * (1 - tx) * (1 - ty)
        + a[y0, x1] * tx * (1 - ty)
        + a[y1, x0] * (1 - tx) * ty
        + a[y1, x1] * tx * ty
    )
    return out[0] if single else out


@dataclass
class PerspectiveCamera:
    """Pinhole camera; pose maps world to camera space (p_c = s*R@p + t)."""

    focal: float
    ppx: float
    ppy: float
    pose: RigidPose = field(default_factory=RigidPose.identity)

    def validate(self) -> None:
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        self.pose.validate()


@dataclass
class CropAlignedCamera:
    """World-space box mapped linearly onto a width x height image rectangle.

    u = (x - xmin) / (xmax - xmin) * width, v likewise from y and height;
    z is normalized to [-1, 1] across the box depth.
    """

    box_min: np.ndarray
    box_max: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.box_min = _as_vec3(self.box_min)
        self.box_max = _as_vec3(self.box_max)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self) -> None:
        if not np.all(self.box_min < self.box_max):
            raise ValueError("crop box min must be < max per axis")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image rectangle must be positive")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        eps = 1e-9 * np.maximum(self.box_max - self.box_min, 1.0)
        return np.all((p >= self.box_min - eps) & (p <= self.box_max + eps), axis=1)

    def extent(self) -> np.ndarray:
        return self.box_max - self.box_min


Camera = Union[PerspectiveCamera, CropAlignedCamera]


def project(camera: Camera, p) -> tuple:
    """Project a world point to (u, v, z).

    Perspective: (u, v) continuous image-plane px, z camera-space depth in
    mm; raises BehindCameraError when z <= 0. CropAligned: linear box
    mapping with z normalized to [-1, 1].
    """
    pt = _as_vec3(p)
    if isinstance(camera, PerspectiveCamera):
        c = camera.pose.apply(pt)
        if c[2] <= 0:
            raise BehindCameraError("point at or behind the camera plane")
        u = camera.ppx + camera.focal * c[0] / c[2]
        v = camera.ppy + camera.focal * c[1] / c[2]
        return float(u), float(v), float(c[2])
    rel = (pt - camera.box_min) / camera.extent()
    u = rel[0] * camera.width
    v = rel[1] * camera.height
    z = 2.0 * rel[2] - 1.0
    return float(u), float(v), float(z)


def project_points(camera: Camera, points: np.ndarray) -> np.ndarray:
    """Vectorized project: (N,3) world points -> (N,3) of (u, v, z).

    Perspective points with non-positive depth get z <= 0 and NaN u, v;
    callers mask them (the scalar ``project`` raises instead).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(camera, PerspectiveCamera):
        c = camera.pose.apply(p)
        z = c[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.ppx + camera.focal * c[:, 0] / z
            v = camera.ppy + camera.focal * c[:, 1] / z
        bad = z <= 0
        u[bad] = np.nan
        v[bad] = np.nan
        return np.stack([u, v, z], axis=1)
    rel = (p - camera.box_min) / camera.extent()
    return np.stack(
        [rel[:, 0] * camera.width, rel[:, 1] * camera.height, 2.0 * rel[:, 2] - 1.0],
        axis=1,
    )


def crop_unproject(camera: CropAlignedCamera, u, v, z) -> np.ndarray:
    """Inverse of the CropAligned mapping; exact for in-box points."""
    ext = camera.extent()
    x = camera.box_min[0] + np.asarray(u, dtype=np.float64) / camera.width * ext[0]
    y = camera.box_min[1] + np.asarray(v, dtype=np.float64) / camera.height * ext[1]
    w = camera.box_min[2] + (np.asarray(z, dtype=np.float64) + 1.0) / 2.0 * ext[2]
    return np.stack(np.broadcast_arrays(x, y, w), axis=-1)


def crop_camera_from_mask(
    mask: Image,
    camera: PerspectiveCamera,
    margin: float = 0.10,
) -> Optional[CropAlignedCamera]:
    """Build the reconstruction box from a silhouette mask.

    The box is a world-axis-aligned cube centered on the back-projected mask
    centroid ray at the subject distance (camera-space depth of the world
    origin), with side = masked bbox side * (1 + margin) back-projected to
    mm. Assumes the camera rotation is identity so world x/y align with
    image u/v. Returns None when the mask is empty.
    """
    covered = mask.pixels[:, :, 0] > 0
    if not covered.any():
        return None
    ys, xs = np.nonzero(covered)
    # pixel extents: pixel i spans [i, i+1) in continuous coords
    u0, u1 = xs.min(), xs.max() + 1.0
    v0, v1 = ys.min(), ys.max() + 1.0
    cu, cv = (u0 + u1) / 2.0, (v0 + v1) / 2.0
    side_px = max(u1 - u0, v1 - v0) * (1.0 + margin)
    depth = float(camera.pose.apply(np.zeros(3))[2])
    if depth <= 0:
        raise BehindCameraError("world origin is behind the camera")
    half_mm = 0.5 * side_px * depth / camera.focal
    cam_pt = np.array(
        [(cu - camera.ppx) * depth / camera.focal, (cv - camera.ppy) * depth / camera.focal, depth]
    )
    center = camera.pose.inverse_apply(cam_pt)
    return CropAlignedCamera(center - half_mm, center + half_mm, mask.width, mask.height)
