"""Isosurface extraction and image-to-mesh reconstruction.

The 256-entry marching-cubes table is generated at import time by walking
each cube face with marching squares: segments are directed so the inside
(value < iso) region lies to the left when the face is viewed from outside
the cube, ambiguous diagonal faces join the inside corners, and the directed
segments stitch into closed loops that fan-triangulate. Both cubes sharing a
face see the same inside set, so the joined-diagonal rule picks the same
connectivity on either side and the surface is watertight.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .field_ops import CarveGain, MeanKernel, SobelKernel7, carve_normals
from .geometry import (
    CropAlignedCamera,
    Image,
    ScalarField3,
    TriangleMesh,
    crop_camera_from_mask,
)
from .nets import ImplicitHead, NormalRegressor, eval_implicit, extract_features, renormalize_normal_maps

# corner c sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1)
_CORNER_OFF = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
_EDGES = (
    (0, 1), (2, 3), (4, 5), (6, 7),  # x
    (0, 2), (1, 3), (4, 6), (5, 7),  # y
    (0, 4), (1, 5), (2, 6), (3, 7),  # z
)
_EDGE_AXIS = tuple(i // 4 for i in range(12))
# each face's corners in counterclockwise order viewed from outside
_FACES = (
    (0, 4, 6, 2), (1, 3, 7, 5),  # -x, +x
    (0, 1, 5, 4), (2, 6, 7, 3),  # -y, +y
    (0, 2, 3, 1), (4, 5, 7, 6),  # -z, +z
)
_EDGE_ID = {tuple(sorted(e)): i for i, e in enumerate(_EDGES)}


def _face_segments(face, inside):
    """Directed crossing pairs (edge_from, edge_to) on one face."""
    ins = [bool(inside[c]) for c in face]
    if not any(ins) or all(ins):
        return []
    segs = []
    for s in range(4):
        if not (ins[s] and not ins[s - 1]):
            continue  # not the start of an inside arc
        e = s
        while ins[(e + 1) % 4]:
            e = (e + 1) % 4
        exit_edge = _EDGE_ID[tuple(sorted((face[e], face[(e + 1) % 4])))]
        entry_edge = _EDGE_ID[tuple(sorted((face[s - 1], face[s])))]
        segs.append((exit_edge, entry_edge))
    if len(segs) == 2 and sum(ins) == 2 and ins[0] == ins[2]:
        # ambiguous diagonal: join the inside corners
        (f1, t1), (f2, t2) = segs
        segs = [(f1, t2), (f2, t1)]
    return segs


def _build_tables():
    table = []
    for config in range(256):
        inside = [(config >> c) & 1 for c in range(8)]
        segs = []
        for face in _FACES:
            segs.extend(_face_segments(face, inside))
        succ = dict(segs)
        assert len(succ) == len(segs)
        tris = []
        unused = set(succ)
        while unused:
            start = min(unused)
            loop = [start]
            unused.discard(start)
            cur = succ[start]
            while cur != start:
                loop.append(cur)
                unused.discard(cur)
                cur = succ[cur]
            # reversed fan so triangle normals point toward the positive side
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i + 1], loop[i]))
        table.append(np.array(tris, dtype=np.int64).reshape(-1, 3))
    return table


_MC_TABLE = _build_tables()


def _check_orientation():
    # single inside corner 0: the one triangle must face away from it
    tri = _MC_TABLE[1][0]
    pts = np.array([
        (_CORNER_OFF[_EDGES[e][0]] + _CORNER_OFF[_EDGES[e][1]]) / 2.0 for e in tri
    ])
    n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    assert n @ (pts.mean(axis=0) - np.zeros(3)) > 0


_check_orientation()


def marching_cubes(field: ScalarField3, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-level surface; linear interpolation along lattice
    edges, vertices deduplicated per lattice edge, triangles oriented
    toward values above iso. Deterministic output ordering."""
    v = field.values.astype(np.float64)
    nx, ny, nz = v.shape
    if min(nx, ny, nz) < 2:
        raise ValueError("need at least 2 nodes per axis")
    inside = v < iso
    cfg = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for c in range(8):
        dx, dy, dz = _CORNER_OFF[c]
        cfg |= inside[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1].astype(np.uint8) << c

    spacing = field.spacing()
    all_keys, all_pos, all_tris, all_cell, all_intra = [], [], [], [], []
    for u in np.unique(cfg):
        if u == 0 or u == 255:
            continue
        tris = _MC_TABLE[u]
        cells = np.argwhere(cfg == u).astype(np.int64)
        used_edges = sorted(set(tris.ravel().tolist()))
        key_by_edge = {}
        for e in used_edges:
            a, b = _EDGES[e]
            pa = cells + _CORNER_OFF[a]
            pb = cells + _CORNER_OFF[b]
            va = v[pa[:, 0], pa[:, 1], pa[:, 2]]
            vb = v[pb[:, 0], pb[:, 1], pb[:, 2]]
            t = (iso - va) / (vb - va)
            pos = field.box_min + (pa + t[:, None] * (pb - pa)) * spacing
            lower = np.minimum(pa, pb)
            key = ((lower[:, 0] * ny + lower[:, 1]) * nz + lower[:, 2]) * 3 + _EDGE_AXIS[e]
            all_keys.append(key)
            all_pos.append(pos)
            key_by_edge[e] = key
        cell_flat = (cells[:, 0] * (ny - 1) + cells[:, 1]) * (nz - 1) + cells[:, 2]
        for intra, tri in enumerate(tris):
            all_tris.append(np.stack([key_by_edge[e] for e in tri], axis=1))
            all_cell.append(cell_flat)
            all_intra.append(np.full(len(cells), intra, dtype=np.int64))

    if not all_tris:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    keys = np.concatenate(all_keys)
    pos = np.concatenate(all_pos)
    uniq, inv = np.unique(keys, return_inverse=True)
    vertices = np.empty((len(uniq), 3))
    vertices[inv] = pos
    tri_keys = np.concatenate(all_tris)
    order = np.lexsort((np.concatenate(all_intra), np.concatenate(all_cell)))
    faces = np.searchsorted(uniq, tri_keys[order])
    return TriangleMesh(vertices, faces)


# ----------------------------------------------------------- grid eval


_LEVELS = ("base", "base+fine", "base+fine+norm")


def _grid_points(camera: CropAlignedCamera, dims: int):
    axes = [np.linspace(camera.box_min[i], camera.box_max[i], dims) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def _eval_field(head, feats, camera, dims, scale_mm, chunk=65536):
    pts = _grid_points(camera, dims)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s : s + chunk] = eval_implicit(head, feats, camera, pts[s : s + chunk])
    return out.reshape(dims, dims, dims) * scale_mm


def evaluate_grid(
    nets: dict,
    image: Image,
    mask: Image,
    camera: CropAlignedCamera,
    dims: int,
    levels: str = "base+fine+norm",
    delta_vox: float = 5.0,
    fine_delta_vox: float = 1.0,
    gain: Optional[CarveGain] = None,
    normal_maps: Optional[Sequence[Image]] = None,
) -> ScalarField3:
    """Evaluate the predicted signed-distance field on a node-centered grid
    over the camera box. Head outputs are in clamp-normalized units and are
    rescaled to mm by delta * voxel. The norm level carves with regressed
    normal maps unless explicit (front, back) maps are supplied."""
    if levels not in _LEVELS:
        raise ValueError(f"levels must be one of {_LEVELS}")
    if dims < 2:
        raise ValueError("need dims >= 2")
    voxel_mm = float(np.mean((camera.box_max - camera.box_min) / (dims - 1)))
    need = ["base_extractor", "base_head"]
    if "fine" in levels:
        need += ["fine_extractor", "fine_head"]
    if levels.endswith("norm") and normal_maps is None:
        need += ["normal_regressor"]
    missing = [n for n in need if n not in nets]
    if missing:
        raise ValueError(f"missing networks: {missing}")

    feats = extract_features(nets["base_extractor"], image, mask)
    values = _eval_field(nets["base_head"], feats, camera, dims, delta_vox * voxel_mm)
    if "fine" in levels:
        ffeats = extract_features(nets["fine_extractor"], image, mask)
        values = values + _eval_field(
            nets["fine_head"], ffeats, camera, dims, fine_delta_vox * voxel_mm
        )
    field = ScalarField3((dims, dims, dims), camera.box_min.copy(), camera.box_max.copy(), values)
    if not levels.endswith("norm"):
        return field
    if normal_maps is not None:
        front, back = normal_maps
    else:
        raw = nets["normal_regressor"].forward(
            np.concatenate(
                [
                    image.pixels[:, :, :3].astype(np.float64).transpose(2, 0, 1),
                    _mask_channel(mask)[None],
                ],
                axis=0,
            )
        )
        maps = renormalize_normal_maps(raw)
        front = Image(maps[:3].transpose(1, 2, 0))
        back = Image(maps[3:].transpose(1, 2, 0))
    return carve_normals(field, front, back, camera, gain=gain)


def _mask_channel(mask: Image) -> np.ndarray:
    m = mask.pixels[:, :, 0].astype(np.float64)
    return m / 16.0 if m.max() > 1.0 else m


# ---------------------------------------------------------- reconstruct


@dataclass
class ReconResult:
    mesh: TriangleMesh
    field: ScalarField3
    camera: CropAlignedCamera
    success: bool
    coverage: float


def _largest_component(mesh: TriangleMesh) -> np.ndarray:
    """Vertex indices of the largest edge-connected component (union-find)."""
    parent = np.arange(mesh.num_vertices)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for tri in mesh.faces:
        a = find(tri[0])
        for k in (1, 2):
            b = find(tri[k])
            if a != b:
                parent[b] = a
    roots = np.array([find(i) for i in range(mesh.num_vertices)])
    if len(roots) == 0:
        return np.zeros(0, np.int64)
    uniq, counts = np.unique(roots, return_counts=True)
    return np.flatnonzero(roots == uniq[np.argmax(counts)])


def _coverage(mesh: TriangleMesh, verts_idx, mask: Image, camera: CropAlignedCamera, dims: int) -> float:
    """Fraction of face-mask cells, binned at grid resolution, that the
    component's vertices project onto."""
    m = mask.pixels[:, :, 0] > 0
    h, w = m.shape
    bh, bw = max(1, h // dims), max(1, w // dims)
    gh, gw = h // bh, w // bw
    binned = m[: gh * bh, : gw * bw].reshape(gh, bh, gw, bw).mean(axis=(1, 3)) > 0.5
    if not binned.any():
        return 0.0
    if len(verts_idx) == 0:
        return 0.0
    p = mesh.vertices[verts_idx]
    rel = (p - camera.box_min) / camera.extent()
    cu = np.clip((rel[:, 0] * gw).astype(np.int64), 0, gw - 1)
    cv = np.clip((rel[:, 1] * gh).astype(np.int64), 0, gh - 1)
    hit = np.zeros((gh, gw), bool)
    hit[cv, cu] = True
    return float((hit & binned).sum() / binned.sum())


def reconstruct(
    nets: dict,
    image: Image,
    mask: Image,
    perspective_camera,
    dims: int = 64,
    levels: str = "base+fine+norm",
    margin: float = 0.10,
    delta_vox: float = 5.0,
    fine_delta_vox: float = 1.0,
    gain: Optional[CarveGain] = None,
    normal_maps: Optional[Sequence[Image]] = None,
) -> ReconResult:
    """Single-image pipeline: crop camera from the mask, evaluate the field,
    extract the mesh. success means the largest connected surface piece
    covers at least half of the face mask."""
    crop = crop_camera_from_mask(mask, perspective_camera, margin=margin)
    if crop is None:
        raise ValueError("mask is empty; nothing to reconstruct")
    field = evaluate_grid(
        nets, image, mask, crop, dims, levels,
        delta_vox=delta_vox, fine_delta_vox=fine_delta_vox,
        gain=gain, normal_maps=normal_maps,
    )
    mesh = marching_cubes(field)
    comp = _largest_component(mesh)
    cov = _coverage(mesh, comp, mask, crop, dims)
    return ReconResult(mesh, field, crop, cov >= 0.5, cov)
