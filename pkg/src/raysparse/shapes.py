"""Meshes from predicted shape grids, posed into the world."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .objects import rotation_z

UNIT_CUBE = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3)
    triangles: np.ndarray  # (m, 3) vertex indices, counter-clockwise seen from outside

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per triangle side (with repeats)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def boundary_edge_count(self) -> int:
        """Edges used by a number of triangles other than two."""
        if not len(self):
            return 0
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return int(np.sum(counts != 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0)) if len(self) else 0
        used = len(np.unique(self.triangles)) if len(self) else 0
        return used - n_edges + len(self)

    def area(self) -> float:
        v = self.vertices[self.triangles]
        return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6)


def marching_cubes(field: np.ndarray, iso: float = 0.5) -> TriangleMesh:
    """Iso-surface of an ``S^3`` grid in canonical coordinates ``[-0.5, 0.5]^3``.

    Sample ``i`` sits at the cell centre ``(i + 0.5) / S - 0.5``. Triangles are
    oriented so their normals point from the region above ``iso`` towards
    the region below it.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or len(set(field.shape)) != 1:
        raise ValueError("field must be a cubic grid")
    size = field.shape[0]
    if size < 2:
        raise ValueError("need at least two samples per axis")
    if not (field.min() < iso < field.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(field, level=iso, method="lewiner", allow_degenerate=False)
    # skimage orients faces towards increasing values; flip so normals leave the solid
    faces = faces[:, ::-1]
    return TriangleMesh((verts + 0.5) / size - 0.5, faces)


def apply_pose(mesh: TriangleMesh, center, scale, yaw: float) -> TriangleMesh:
    """Canonical -> world: ``R_z(yaw) diag(scale) v + center``."""
    m = rotation_z(float(yaw)) @ np.diag(np.asarray(scale, dtype=np.float64))
    return TriangleMesh(mesh.vertices @ m.T + np.asarray(center, dtype=np.float64), mesh.triangles.copy())


@dataclass
class OrientedBox:
    """A 9-DoF box: the unit cube under ``(center, scale, yaw)``."""

    center: np.ndarray
    scale: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    def corners(self) -> np.ndarray:
        return (UNIT_CUBE * self.scale) @ rotation_z(self.yaw).T + self.center

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = ((np.asarray(points) - self.center) @ rotation_z(self.yaw)) / self.scale
        return np.all(np.abs(local) <= 0.5, axis=-1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    @property
    def volume(self) -> float:
        return float(np.prod(self.scale))


def oriented_box(pred) -> OrientedBox:
    """Box of anything carrying ``center``, ``scale`` and ``yaw`` (predictions, ground truth)."""
    return OrientedBox(pred.center, pred.scale, pred.yaw)


def object_mesh(pred, iso: float = 0.5) -> TriangleMesh:
    """World-space mesh of a prediction with ``shape_probs`` (sigmoid of the shape logits)."""
    if pred.shape_probs is None:
        raise ValueError("prediction carries no shape")
    return apply_pose(marching_cubes(pred.shape_probs, iso), pred.center, pred.scale, pred.yaw)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return TriangleMesh.empty()
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))
