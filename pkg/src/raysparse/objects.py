"""Object records shared by the heads, the evaluator and the scene generator.

An object lives in a canonical unit cube ``[-0.5, 0.5]^3`` (z up) and is
posed into the world by ``p_world = R_z(yaw) @ diag(scale) @ p + center``.
Shape grids are ``(S, S, S)`` boolean arrays indexed ``[i, j, k]`` along the
canonical x, y, z axes, with cell ``i`` centred at ``(i + 0.5) / S - 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(x):
    """Map angles to (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    return x - 2 * math.pi * np.ceil((x - math.pi) / (2 * math.pi))


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_matrix(center, scale, yaw) -> np.ndarray:
    """4x4 canonical-to-world transform."""
    m = np.eye(4)
    m[:3, :3] = rotation_z(float(yaw)) @ np.diag(np.asarray(scale, dtype=np.float64))
    m[:3, 3] = center
    return m


def cell_centers(size: int) -> np.ndarray:
    return (np.arange(size) + 0.5) / size - 0.5


@dataclass
class ObjectGT:
    category: int
    center: np.ndarray
    scale: np.ndarray
    yaw: float
    shape: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.shape = np.asarray(self.shape, dtype=bool)
        self.yaw = float(self.yaw)
        self.category = int(self.category)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        s = self.shape.shape
        if len(s) != 3 or len(set(s)) != 1:
            raise ValueError("shape grid must be cubic")

    @property
    def rotation(self) -> np.ndarray:
        return rotation_z(self.yaw)

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        return ((points - self.center) @ self.rotation) / self.scale

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (points * self.scale) @ self.rotation.T + self.center

    def corners(self) -> np.ndarray:
        unit = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
        return self.to_world(unit)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Whether world points fall inside an occupied shape cell."""
        size = self.shape.shape[0]
        local = self.to_canonical(np.asarray(points, dtype=np.float64))
        inside = np.all((local >= -0.5) & (local < 0.5), axis=1)
        ijk = np.clip(np.floor((local + 0.5) * size).astype(np.int64), 0, size - 1)
        return inside & self.shape[ijk[:, 0], ijk[:, 1], ijk[:, 2]]


@dataclass
class ObjectPrediction:
    category: int
    score: float
    center: np.ndarray
    scale: np.ndarray
    yaw: float
    shape_probs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        self.category = int(self.category)
        self.score = float(self.score)


def pack_shape(shape: np.ndarray) -> bytes:
    """Packed bitset with a little-endian uint32 size header."""
    size = shape.shape[0]
    return np.uint32(size).tobytes() + np.packbits(shape.astype(bool).ravel()).tobytes()


def unpack_shape(blob: bytes) -> tuple[np.ndarray, int]:
    """Inverse of :func:`pack_shape`; also returns the number of bytes consumed."""
    size = int(np.frombuffer(blob[:4], dtype=np.uint32)[0])
    n_bytes = (size**3 + 7) // 8
    bits = np.unpackbits(np.frombuffer(blob[4 : 4 + n_bytes], dtype=np.uint8))[: size**3]
    return bits.reshape(size, size, size).astype(bool), 4 + n_bytes
