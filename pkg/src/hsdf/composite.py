"""Pseudo-pair compositing: mask-guided thin-plate-spline warping, a
Laplacian-inpainting stand-in for the learned complement stage, and
Poisson seamless cloning of the rendered face into the (warped) wild
image. The 3D label of a pair is the fitted mesh itself, which this
module never touches.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import binary_fill_holes

from .geometry import Image, TriangleMesh
from .io import (
    save_camera,
    save_obj,
    save_pfm,
    save_png,
    write_json,
)


@dataclass
class WarpSpec:
    """Matched 2D control points driving a thin-plate-spline warp."""

    src_points: np.ndarray
    dst_points: np.ndarray
    kind: str = "thin-plate-spline"

    def __post_init__(self):
        self.src_points = np.asarray(self.src_points, dtype=np.float64).reshape(-1, 2)
        self.dst_points = np.asarray(self.dst_points, dtype=np.float64).reshape(-1, 2)

    def validate(self) -> None:
        if self.src_points.shape != self.dst_points.shape:
            raise ValueError("control point counts must match")
        if self.src_points.shape[0] < 3:
            raise ValueError("need at least 3 control points")
        d = self.src_points[:, None, :] - self.src_points[None, :, :]
        dist = np.linalg.norm(d, axis=2)
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-6:
            raise ValueError("duplicate source control points")


def _tps_u(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def _tps_fit(sites: np.ndarray, values: np.ndarray) -> tuple:
    """Exact TPS interpolant through (sites -> values); values may be (N, C)."""
    n = sites.shape[0]
    d2 = np.sum((sites[:, None, :] - sites[None, :, :]) ** 2, axis=2)
    k = _tps_u(d2)
    p = np.concatenate([np.ones((n, 1)), sites], axis=1)
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = k
    a[:n, n:] = p
    a[n:, :n] = p.T
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular thin-plate-spline system") from exc
    if not np.all(np.isfinite(sol)):
        raise ValueError("singular thin-plate-spline system")
    return sites, sol[:n], sol[n:]


def _tps_eval(model: tuple, points: np.ndarray) -> np.ndarray:
    sites, w, affine = model
    d2 = np.sum((points[:, None, :] - sites[None, :, :]) ** 2, axis=2)
    u = _tps_u(d2)
    return u @ w + affine[0][None, :] + points @ affine[1:]


def warp_control_error(spec: WarpSpec) -> float:
    """Max px error of the fitted backward map at the control points."""
    model = _tps_fit(spec.dst_points, spec.src_points)
    back = _tps_eval(model, spec.dst_points)
    return float(np.max(np.linalg.norm(back - spec.src_points, axis=1))) if len(back) else 0.0


def warp_image(img: Image, spec: WarpSpec) -> Image:
    """Backward-mapped TPS warp with bilinear resampling (clamp at edges).

    The spline interpolates the control points exactly, so content at each
    src point lands on its dst point (checked to 0.5 px).
    """
    spec.validate()
    model = _tps_fit(spec.dst_points, spec.src_points)
    err = float(
        np.max(np.linalg.norm(_tps_eval(model, spec.dst_points) - spec.src_points, axis=1))
    )
    if err > 0.5:
        raise ValueError(f"warp control points miss by {err:.3f} px")
    h, w = img.height, img.width
    gy, gx = np.mgrid[0:h, 0:w]
    centers = np.stack([gx.ravel() + 0.5, gy.ravel() + 0.5], axis=1)
    src = _tps_eval(model, centers)
    from .geometry import bilinear_sample

    vals = bilinear_sample(img.pixels.astype(np.float64), src[:, 0] - 0.5, src[:, 1] - 0.5)
    return Image(vals.reshape(h, w, img.channels))


# ---------------------------------------------------------------------------
# Dirichlet solves on masked regions (shared by inpainting and blending)


def _mask_bool(mask: Image) -> np.ndarray:
    return np.asarray(mask.pixels[:, :, 0], dtype=np.float64) > 0


def _touches_border(m: np.ndarray) -> bool:
    return bool(m[0, :].any() or m[-1, :].any() or m[:, 0].any() or m[:, -1].any())


_SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _cg(apply_a, b: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    if np.sqrt(r @ r) < tol:
        return x
    p = r.copy()
    rs = r @ r
    for _ in range(10 * b.size + 200):
        ap = apply_a(p)
        alpha = rs / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        if np.sqrt(rs_new) < tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_poisson_region(
    mask: np.ndarray, rhs: np.ndarray, boundary: np.ndarray, tol: float = 1e-8
) -> np.ndarray:
    """Solve 4u(p) - sum_N4 u(q) = rhs(p) for p in mask, u = boundary
    outside, by conjugate gradients to residual < tol. rhs/boundary are
    (h, w, c); returns the composited (h, w, c) result.
    """
    if _touches_border(mask):
        raise ValueError("solve region must be strictly inside the image")
    h, w, c = boundary.shape
    out = boundary.astype(np.float64).copy()
    if not mask.any():
        return out
    n = int(mask.sum())

    def apply_a(u: np.ndarray) -> np.ndarray:
        grid = np.zeros((h, w))
        grid[mask] = u
        acc = 4.0 * u
        for dy, dx in _SHIFTS:
            shifted = np.roll(np.roll(grid, dy, axis=0), dx, axis=1)
            nb_mask = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
            acc = acc - np.where(nb_mask, shifted, 0.0)[mask]
        return acc

    for ch in range(c):
        b = rhs[:, :, ch][mask].astype(np.float64).copy()
        bnd = boundary[:, :, ch].astype(np.float64)
        for dy, dx in _SHIFTS:
            nb_outside = ~np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
            contrib = np.roll(np.roll(bnd, dy, axis=0), dx, axis=1)
            b += np.where(nb_outside, contrib, 0.0)[mask]
        out[:, :, ch][mask] = _cg(apply_a, b, tol)
    return out


def laplacian_inpaint(img: Image, hole_mask: Image) -> Image:
    """Fill hole pixels with the harmonic (Laplace) extension of the
    surrounding pixels, per channel; everything else unchanged."""
    holes = _mask_bool(hole_mask)
    if _touches_border(holes):
        raise ValueError("hole touches the image border")
    px = img.pixels.astype(np.float64)
    rhs = np.zeros_like(px)
    return Image(solve_poisson_region(holes, rhs, px))


def _laplacian(px: np.ndarray) -> np.ndarray:
    """5-point Laplacian 4s(p) - sum s(q) per channel, interior pixels."""
    acc = 4.0 * px
    for dy, dx in _SHIFTS:
        acc = acc - np.roll(np.roll(px, dy, axis=0), dx, axis=1)
    return acc


def poisson_blend(source: Image, target: Image, mask: Image) -> Image:
    """Seamless clone: inside the mask solve grad f = grad source with
    f = target on the boundary; outside, keep target."""
    if source.pixels.shape != target.pixels.shape:
        raise ValueError("source and target must share size")
    m = _mask_bool(mask)
    if not m.any():
        return Image(target.pixels.astype(np.float64).copy())
    if _touches_border(m):
        raise ValueError("blend mask touches the image border")
    rhs = _laplacian(source.pixels.astype(np.float64))
    return Image(solve_poisson_region(m, rhs, target.pixels.astype(np.float64)))


# ---------------------------------------------------------------------------
# contour sampling and pair assembly


def _erode4(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1, constant_values=False)
    return m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def mask_contour(m: np.ndarray) -> np.ndarray:
    """Boundary pixel centers of a mask, ordered by polar angle around the
    boundary centroid (adequate for the star-shaped face regions here)."""
    ring = m & ~_erode4(m)
    ys, xs = np.nonzero(ring)
    if xs.size == 0:
        return np.zeros((0, 2))
    px = xs + 0.5
    py = ys + 0.5
    ang = np.arctan2(py - py.mean(), px - px.mean())
    order = np.argsort(ang, kind="stable")
    return np.stack([px[order], py[order]], axis=1)


def resample_contour(pts: np.ndarray, n: int) -> np.ndarray:
    """n points equally spaced in arclength along the closed polygon."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return np.repeat(pts[:1], n, axis=0)
    stations = np.linspace(0.0, total, n, endpoint=False)
    k = np.clip(np.searchsorted(cum, stations, side="right") - 1, 0, len(seg) - 1)
    t = (stations - cum[k]) / np.maximum(seg[k], 1e-12)
    return closed[k] * (1 - t[:, None]) + closed[k + 1] * t[:, None]


def _border_anchors(w: int, h: int) -> np.ndarray:
    return np.array(
        [
            [0.5, 0.5], [w - 0.5, 0.5], [w - 0.5, h - 0.5], [0.5, h - 0.5],
            [w / 2.0, 0.5], [w - 0.5, h / 2.0], [w / 2.0, h - 0.5], [0.5, h / 2.0],
        ]
    )


@dataclass
class WarpOptions:
    contour_spacing_px: float = 16.0
    min_points: int = 8


@dataclass
class PseudoPairResult:
    ok: bool
    reason: str = ""
    blended: Optional[Image] = None
    gt_mesh: Optional[TriangleMesh] = None
    camera: object = None
    warp: Optional[WarpSpec] = None


def mesh_digest(mesh: TriangleMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()


def make_pseudo_pair(
    wild: Image,
    parsing: Image,
    mesh: TriangleMesh,
    camera,
    render: dict,
    opts: WarpOptions = None,
) -> PseudoPairResult:
    """Composite one pseudo pair.

    Takes the face-region intersection of the parsing mask and the render
    mask, harmonically fills interior holes of the rendered face, warps
    the wild image so its face contour lands on the intersection contour
    (TPS on arclength-matched boundary samples plus fixed border anchors),
    then Poisson-blends the rendered face in. The mesh and camera pass
    through untouched; they are the pair's 3D label.
    """
    opts = opts or WarpOptions()
    h, w = wild.height, wild.width
    wild_face = _mask_bool(parsing)
    render_face = _mask_bool(render["mask"])
    inter = wild_face & render_face
    if inter.sum() < 0.01 * h * w:
        return PseudoPairResult(False, "tiny-intersection", gt_mesh=mesh, camera=camera)
    if _touches_border(inter):
        return PseudoPairResult(False, "touches-border", gt_mesh=mesh, camera=camera)

    # fill interior holes of the intersection region on the rendered face
    filled = binary_fill_holes(inter)
    holes = filled & ~inter
    face_rgb = render["rgb"]
    if holes.any():
        face_rgb = laplacian_inpaint(face_rgb, Image(holes.astype(np.float64)[:, :, None]))

    src_contour = mask_contour(wild_face)
    dst_contour = mask_contour(filled)
    if len(src_contour) < 3 or len(dst_contour) < 3:
        return PseudoPairResult(False, "degenerate-contour", gt_mesh=mesh, camera=camera)

    def perimeter(c):
        closed = np.vstack([c, c[:1]])
        return float(np.sum(np.linalg.norm(np.diff(closed, axis=0), axis=1)))

    n_pts = max(
        opts.min_points,
        int(round(min(perimeter(src_contour), perimeter(dst_contour)) / opts.contour_spacing_px)),
    )
    src_pts = resample_contour(src_contour, n_pts)
    dst_pts = resample_contour(dst_contour, n_pts)
    anchors = _border_anchors(w, h)
    spec = WarpSpec(
        np.vstack([src_pts, anchors]), np.vstack([dst_pts, anchors])
    )
    try:
        spec.validate()
        warped = warp_image(wild, spec)
    except ValueError:
        return PseudoPairResult(False, "warp-failed", gt_mesh=mesh, camera=camera)

    # blend strictly inside the warped face edge: three erosions keep the
    # Dirichlet boundary ring on warped face pixels even where the warp
    # deviates between control points (chord-vs-arc plus bilinear bleed)
    blend_mask = _erode4(_erode4(_erode4(filled)))
    if not blend_mask.any():
        return PseudoPairResult(False, "tiny-intersection", gt_mesh=mesh, camera=camera)
    blended = poisson_blend(face_rgb, warped, Image(blend_mask.astype(np.float64)[:, :, None]))
    return PseudoPairResult(True, "", blended, mesh, camera, spec)


# ---------------------------------------------------------------------------
# dataset directory layout


def write_pair_dir(
    root: str,
    pair_id: str,
    image: Image,
    mask: Image,
    mesh: TriangleMesh,
    camera,
    front_normal: Image,
    back_normal: Image,
    params: dict,
    labels: Optional[np.ndarray] = None,
) -> str:
    d = os.path.join(root, "pairs", pair_id)
    os.makedirs(d, exist_ok=True)
    save_png(os.path.join(d, "image.png"), image)
    save_png(os.path.join(d, "mask.png"), mask)
    save_obj(os.path.join(d, "mesh.obj"), mesh)
    save_camera(os.path.join(d, "camera.json"), camera)
    save_pfm(os.path.join(d, "front_normal.pfm"), front_normal)
    save_pfm(os.path.join(d, "back_normal.pfm"), back_normal)
    write_json(os.path.join(d, "params.json"), params)
    if labels is not None:
        from .io import save_label_png

        save_label_png(os.path.join(d, "labels.png"), labels)
    return d
