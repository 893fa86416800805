"""Shared fixtures-in-code for the test suite."""

import hashlib
import os

import numpy as np

from hsdf.geometry import TriangleMesh


def dir_digest(root):
    """{relative path: sha256 of bytes} over every file under root."""
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = hashlib.sha256(f.read()).hexdigest()
    return out


def latlong_sphere(radius=80.0, n_lat=16, n_lon=24, analytic_normals=True):
    """Lat-long tessellated sphere; poles are duplicated per column."""
    verts = []
    for i in range(n_lat):
        th = np.pi * i / (n_lat - 1)
        for j in range(n_lon):
            ph = 2.0 * np.pi * j / n_lon
            verts.append(
                radius
                * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
            )
    faces = []
    idx = lambda i, j: i * n_lon + (j % n_lon)
    for i in range(n_lat - 1):
        for j in range(n_lon):
            faces.append([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
            faces.append([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
    v = np.array(verts)
    mesh = TriangleMesh(v, np.array(faces))
    if analytic_normals:
        mesh.normals = v / radius
    return mesh


def quad_mesh(half=40.0, z=0.0, uv=True):
    """Two-triangle square in the z = const plane, facing -z."""
    verts = np.array(
        [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]) if uv else None
    return TriangleMesh(verts, faces, uvs=uvs)
