"""File formats: OBJ, binary PLY, sampled-distance grids, PNG, PFM, JSON.

All writers are deterministic: sorted JSON keys, no timestamps, fixed
byte layouts. Binary payloads are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np
from PIL import Image as PilImage

from .geometry import Image, ScalarField3, TriangleMesh


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: str, obj) -> None:
    """Canonical JSON: sorted keys, minimal separators, trailing newline."""
    text = json.dumps(_jsonify(obj), sort_keys=True, separators=(",", ":"))
    with open(path, "w") as f:
        f.write(text)
        f.write("\n")


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# OBJ


def save_obj(path: str, mesh: TriangleMesh) -> None:
    """ASCII OBJ with v / vt / vn and matching f records (1-based)."""
    lines = []
    for p in mesh.vertices:
        lines.append(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    has_uv = mesh.uvs is not None and len(mesh.uvs)
    has_n = mesh.normals is not None and len(mesh.normals)
    if has_uv:
        for t in mesh.uvs:
            lines.append(f"vt {float(t[0])!r} {float(t[1])!r}")
    if has_n:
        for n in mesh.normals:
            lines.append(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}")
    for f in mesh.faces:
        idx = [str(i + 1) for i in f]
        if has_uv and has_n:
            rec = " ".join(f"{i}/{i}/{i}" for i in idx)
        elif has_uv:
            rec = " ".join(f"{i}/{i}" for i in idx)
        elif has_n:
            rec = " ".join(f"{i}//{i}" for i in idx)
        else:
            rec = " ".join(idx)
        lines.append("f " + rec)
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_obj(path: str) -> TriangleMesh:
    """Reads v/vt/vn/f; polygon faces are fanned; per-vertex attributes only
    survive when the face records index them identically to positions."""
    verts, uvs, norms, faces = [], [], [], []
    uv_match = norm_match = True
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                corner = []
                for rec in parts[1:]:
                    fields = rec.split("/")
                    vi = int(fields[0])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    corner.append(vi)
                    if len(fields) > 1 and fields[1]:
                        if int(fields[1]) - 1 != vi:
                            uv_match = False
                    if len(fields) > 2 and fields[2]:
                        if int(fields[2]) - 1 != vi:
                            norm_match = False
                for k in range(1, len(corner) - 1):
                    faces.append([corner[0], corner[k], corner[k + 1]])
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv = np.asarray(uvs, dtype=np.float64) if uvs and uv_match and len(uvs) == len(verts) else None
    nm = (
        np.asarray(norms, dtype=np.float64)
        if norms and norm_match and len(norms) == len(verts)
        else None
    )
    return TriangleMesh(v, f, uvs=uv, normals=nm)


# ---------------------------------------------------------------------------
# PLY (binary little-endian)


def save_ply(path: str, mesh: TriangleMesh) -> None:
    """binary_little_endian 1.0; float32 xyz, uchar count + int32 indices."""
    n_v, n_f = mesh.num_vertices, mesh.num_faces
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n_v}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {n_f}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        if n_f:
            rec = np.empty(n_f, dtype=[("c", "u1"), ("i", "<i4", (3,))])
            rec["c"] = 3
            rec["i"] = mesh.faces.astype("<i4")
            fh.write(rec.tobytes())


def load_ply(path: str) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n_v = n_f = 0
    for line in header:
        if line.startswith("element vertex"):
            n_v = int(line.split()[-1])
        elif line.startswith("element face"):
            n_f = int(line.split()[-1])
    body = data[end:]
    verts = np.frombuffer(body, dtype="<f4", count=3 * n_v).reshape(n_v, 3)
    off = 12 * n_v
    rec = np.frombuffer(body, dtype=[("c", "u1"), ("i", "<i4", (3,))], count=n_f, offset=off)
    if n_f and not np.all(rec["c"] == 3):
        raise ValueError("non-triangle face in PLY")
    return TriangleMesh(verts.astype(np.float64), rec["i"].astype(np.int64))


# ---------------------------------------------------------------------------
# Sampled distance grids: JSON header <name>.sdf + raw payload <name>.sdf.raw


def save_sdf(path: str, fld: ScalarField3) -> None:
    """Header stores dims/box; payload is float32 LE, x-fastest order."""
    if not path.endswith(".sdf"):
        raise ValueError("grid path must end in .sdf")
    header = {
        "dims": list(fld.dims),
        "box_min": [float(x) for x in fld.box_min],
        "box_max": [float(x) for x in fld.box_max],
        "dtype": "float32",
        "order": "x-fastest",
        "sign": "negative-inside",
    }
    write_json(path, header)
    flat = np.asarray(fld.values, dtype="<f4").ravel(order="F")
    with open(path + ".raw", "wb") as fh:
        fh.write(flat.tobytes())


def load_sdf(path: str) -> ScalarField3:
    header = read_json(path)
    dims = tuple(int(d) for d in header["dims"])
    with open(path + ".raw", "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f4")
    if flat.size != dims[0] * dims[1] * dims[2]:
        raise ValueError("raw payload size does not match header dims")
    values = flat.astype(np.float64).reshape(dims, order="F")
    return ScalarField3(dims, header["box_min"], header["box_max"], values)


# ---------------------------------------------------------------------------
# PNG via Pillow


def save_png(path: str, img: Image) -> None:
    """1ch -> L, 3ch -> RGB; values clipped from [0,1] to 8-bit."""
    a = np.clip(np.asarray(img.pixels, dtype=np.float64), 0.0, 1.0)
    a8 = np.round(a * 255.0).astype(np.uint8)
    if a8.shape[2] == 1:
        pil = PilImage.fromarray(a8[:, :, 0], mode="L")
    elif a8.shape[2] == 3:
        pil = PilImage.fromarray(a8, mode="RGB")
    else:
        raise ValueError("PNG writer takes 1 or 3 channels")
    pil.save(path, format="PNG")


def load_png(path: str) -> Image:
    pil = PilImage.open(path)
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB")
    a = np.asarray(pil, dtype=np.float32) / 255.0
    return Image(a)


def save_label_png(path: str, labels: np.ndarray) -> None:
    """Integer label image (values 0..255) stored as 8-bit grayscale."""
    a = np.asarray(labels)
    if a.ndim == 3:
        a = a[:, :, 0]
    PilImage.fromarray(a.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label_png(path: str) -> np.ndarray:
    pil = PilImage.open(path)
    if pil.mode != "L":
        pil = pil.convert("L")
    return np.asarray(pil, dtype=np.int64)


# ---------------------------------------------------------------------------
# PFM (float maps; used for normal maps). Little-endian, bottom-up rows.


def save_pfm(path: str, img: Image) -> None:
    a = np.asarray(img.pixels, dtype="<f4")
    if a.shape[2] == 1:
        tag, payload = b"Pf", a[:, :, 0]
    elif a.shape[2] == 3:
        tag, payload = b"PF", a
    else:
        raise ValueError("PFM writer takes 1 or 3 channels")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(payload[::-1].tobytes())  # bottom row first


def load_pfm(path: str) -> Image:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h * channels), dtype=dtype)
    a = data.reshape(h, w, channels)[::-1].astype(np.float32)
    if scale not in (-1.0, 1.0):
        a = a * abs(scale)
    return Image(a)


# ---------------------------------------------------------------------------
# Raw float32 payloads (checkpoints and friends)


def write_raw_f32(path: str, arrays) -> None:
    """Concatenate arrays as float32 LE in the order given."""
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_raw_f32(path: str, shapes) -> list:
    """Split a float32 LE payload back into float64 arrays of given shapes."""
    with open(path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f4")
    out, off = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(flat[off : off + n].astype(np.float64).reshape(shp))
        off += n
    if off != flat.size:
        raise ValueError("payload size does not match requested shapes")
    return out


# ---------------------------------------------------------------------------
# Camera serialization


def camera_to_dict(camera) -> dict:
    from .geometry import CropAlignedCamera, PerspectiveCamera

    if isinstance(camera, PerspectiveCamera):
        return {
            "type": "perspective",
            "focal": float(camera.focal),
            "ppx": float(camera.ppx),
            "ppy": float(camera.ppy),
            "rotation": _jsonify(camera.pose.rotation),
            "translation": _jsonify(camera.pose.translation),
            "scale": float(camera.pose.scale),
        }
    if isinstance(camera, CropAlignedCamera):
        return {
            "type": "crop_aligned",
            "box_min": _jsonify(camera.box_min),
            "box_max": _jsonify(camera.box_max),
            "width": camera.width,
            "height": camera.height,
        }
    raise TypeError(f"unknown camera type {type(camera)!r}")


def camera_from_dict(d: dict):
    from .geometry import CropAlignedCamera, PerspectiveCamera, RigidPose

    if d["type"] == "perspective":
        pose = RigidPose(np.array(d["rotation"]), np.array(d["translation"]), d.get("scale", 1.0))
        return PerspectiveCamera(d["focal"], d["ppx"], d["ppy"], pose)
    if d["type"] == "crop_aligned":
        return CropAlignedCamera(np.array(d["box_min"]), np.array(d["box_max"]),
                                 d["width"], d["height"])
    raise ValueError(f"unknown camera type {d.get('type')!r}")


def save_camera(path: str, camera) -> None:
    write_json(path, camera_to_dict(camera))


def load_camera(path: str):
    return camera_from_dict(read_json(path))
