"""Geometry file I/O: OBJ meshes and ascii PLY point clouds.

Coordinates are written with 9 significant digits. Writers are
deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError
from .geom import PointCloud, TriMesh


def write_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> TriMesh:
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                tris.append(idx)
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        f.write("end_header\n")
        for p in cloud.points:
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CheckpointError(f"{path} is not a PLY file")
    n = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if parts[:1] == ["end_header"]:
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise CheckpointError(f"{path} has a malformed PLY header")
    pts = [[float(x) for x in lines[body_at + k].split()[:3]] for k in range(n)]
    return PointCloud(np.array(pts, dtype=np.float64))
