"""Pinhole cameras, voxel grids and ray-traced pixel/voxel interaction indices.

World frame is right-handed with +z up. Camera poses are camera-to-world.
Camera axes follow the usual pinhole convention: x right, y down, z forward.
Pixel ``(row, col)`` covers ``[col, col + 1) x [row, row + 1)`` in image
coordinates, so its center sits at ``(col + 0.5, row + 0.5)``.

Voxels are flattened x-fastest: ``flat = x + nx * (y + ny * z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

DEFAULT_T_NEAR = 0.05
DEFAULT_T_FAR = 12.0


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform; ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _frozen_array(self.rotation, (3, 3))
        trans = _frozen_array(self.translation, (3,))
        if not np.isfinite(rot).all() or not np.isfinite(trans).all():
            raise ValueError("pose must be finite")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            # looking straight along the up axis
            right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = DEFAULT_T_NEAR
    t_far: float = DEFAULT_T_FAR

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_array(self.origin, (3,)))
        direction = _frozen_array(self.direction, (3,))
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", direction)
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    feature_width: int
    feature_height: int

    def __post_init__(self):
        if self.intrinsics.width % self.feature_width or self.intrinsics.height % self.feature_height:
            raise ValueError("feature grid must divide the image size")

    @property
    def stride(self) -> tuple[int, int]:
        """Full-resolution pixels per feature cell as ``(rows, cols)``."""
        return (
            self.intrinsics.height // self.feature_height,
            self.intrinsics.width // self.feature_width,
        )

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def n_feature_pixels(self) -> int:
        return self.feature_width * self.feature_height

    def with_feature_grid(self, feature_width: int, feature_height: int) -> "CameraView":
        return CameraView(self.intrinsics, self.pose, feature_width, feature_height)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> full-resolution ``(u, v, depth)``; u is the column axis."""
        cam = self.pose.world_to_camera(points)
        k = self.intrinsics
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * cam[..., 0] / z + k.cx
            v = k.fy * cam[..., 1] / z + k.cy
        return u, v, z

    def directions_through(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world directions through full-resolution image points."""
        k = self.intrinsics
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
        cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
        return cam @ self.pose.rotation.T

    def feature_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """One ray per feature cell, row-major; returns ``(origins, directions)``."""
        sy, sx = self.stride
        rows, cols = np.meshgrid(
            np.arange(self.feature_height), np.arange(self.feature_width), indexing="ij"
        )
        dirs = self.directions_through((cols.ravel() + 0.5) * sx, (rows.ravel() + 0.5) * sy)
        return np.broadcast_to(self.center, dirs.shape).copy(), dirs

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """One ray per full-resolution pixel, row-major."""
        k = self.intrinsics
        rows, cols = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
        dirs = self.directions_through(cols.ravel() + 0.5, rows.ravel() + 0.5)
        return np.broadcast_to(self.center, dirs.shape).copy(), dirs


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    origin: np.ndarray
    voxel_size: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_array(self.origin, (3,)))
        object.__setattr__(self, "voxel_size", _frozen_array(self.voxel_size, (3,)))
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("dims must be three positive counts")
        if (self.voxel_size <= 0).any():
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)

    @property
    def extent(self) -> np.ndarray:
        return self.voxel_size * np.array(self.dims)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.extent

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.extent

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def traversal_bound(self) -> int:
        return sum(self.dims)

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        nx, ny, _ = self.dims
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.dims
        flat = np.asarray(flat)
        return np.stack([flat % nx, (flat // nx) % ny, flat // (nx * ny)], axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """World centers of all voxels in flat (x-fastest) order."""
        ijk = self.unflatten(np.arange(self.n_voxels))
        return self.origin + (ijk + 0.5) * self.voxel_size

    def normalized(self, points: np.ndarray) -> np.ndarray:
        """World points -> [0, 1]^3 grid-relative coordinates."""
        return (np.asarray(points) - self.origin) / self.extent

    def __eq__(self, other):
        if not isinstance(other, VoxelGridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.voxel_size, other.voxel_size)
        )


def pixel_ray(
    view: CameraView,
    row: int,
    col: int,
    t_near: float = DEFAULT_T_NEAR,
    t_far: float = DEFAULT_T_FAR,
) -> Ray:
    """Ray from the camera center through the center of feature cell ``(row, col)``."""
    if not (0 <= row < view.feature_height and 0 <= col < view.feature_width):
        raise IndexError(f"feature cell ({row}, {col}) out of range")
    sy, sx = view.stride
    direction = view.directions_through((col + 0.5) * sx, (row + 0.5) * sy)
    return Ray(view.center, direction, t_near, t_far)


def slab_intervals(
    origins: np.ndarray, directions: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Parametric entry/exit of rays through axis-aligned boxes (broadcasting).

    A ray parallel to a slab that starts outside it gets an empty interval.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        ta = (lower - origins) * inv
        tb = (upper - origins) * inv
    parallel = directions == 0
    inside = (origins >= lower) & (origins < upper)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    return lo.max(axis=-1), hi.min(axis=-1)


def traverse_voxels(ray: Ray, grid: VoxelGridSpec) -> list[tuple[int, int, int]]:
    """Voxels pierced by the segment ``[t_near, t_far]``, front to back.

    Amanatides-Woo stepping. Voxels are half-open per axis; a segment that
    starts exactly on a face is assigned to the voxel it is entering.
    """
    o, d = ray.origin, ray.direction
    t_enter, t_exit = slab_intervals(o, d, grid.origin, grid.upper)
    t0 = max(float(t_enter), ray.t_near)
    t1 = min(float(t_exit), ray.t_far)
    if not t0 < t1:
        return []

    lo, size = grid.origin, grid.voxel_size
    idx, step = [0, 0, 0], [0, 0, 0]
    for a in range(3):
        rel = (o[a] + t0 * d[a] - lo[a]) / size[a]
        i = math.ceil(rel) - 1 if d[a] < 0 else math.floor(rel)
        idx[a] = min(max(i, 0), grid.dims[a] - 1)
        step[a] = 1 if d[a] > 0 else (-1 if d[a] < 0 else 0)

    def boundary_t(a: int) -> float:
        if step[a] == 0:
            return math.inf
        face = lo[a] + (idx[a] + (1 if step[a] > 0 else 0)) * size[a]
        return (face - o[a]) / d[a]

    out = []
    while True:
        out.append((idx[0], idx[1], idx[2]))
        t_next = [boundary_t(a) for a in range(3)]
        axis = min(range(3), key=lambda a: t_next[a])
        if t_next[axis] >= t1:
            break
        idx[axis] += step[axis]
        if not 0 <= idx[axis] < grid.dims[axis]:
            break
    return out


def dda_steps(
    origins: np.ndarray,
    directions: np.ndarray,
    t_near,
    t_far,
    grid_origin: np.ndarray,
    voxel_size: np.ndarray,
    dims: Sequence[int],
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Vectorized grid stepping for many rays at once.

    Directions need not be unit length; ``t`` keeps the caller's scale. Each
    yielded step is ``(ray_ids, ijk, t_entry, entry_axis)`` for the rays still
    inside the grid, where ``entry_axis`` is -1 for the first voxel of a ray.
    Same tie-breaking as :func:`traverse_voxels`.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    lo = np.asarray(grid_origin, dtype=np.float64)
    size = np.asarray(voxel_size, dtype=np.float64)
    n = np.asarray(dims, dtype=np.int64)
    t_enter, t_exit = slab_intervals(origins, directions, lo, lo + size * n)
    t0 = np.maximum(t_enter, t_near)
    t1 = np.minimum(t_exit, t_far)
    ids = np.nonzero(t0 < t1)[0]
    if ids.size == 0:
        return
    o, d, t0, t1 = origins[ids], directions[ids], t0[ids], t1[ids]
    rel = (o + t0[:, None] * d - lo) / size
    idx = np.where(d < 0, np.ceil(rel) - 1, np.floor(rel)).astype(np.int64)
    idx = np.clip(idx, 0, n - 1)
    step = np.sign(d).astype(np.int64)
    t_entry = t0
    axis = np.full(ids.size, -1, dtype=np.int64)
    rows = np.arange(ids.size)
    while ids.size:
        yield ids, idx.copy(), t_entry, axis
        face = lo + (idx + (step > 0)) * size
        with np.errstate(divide="ignore", invalid="ignore"):
            t_next = np.where(step != 0, (face - o) / d, np.inf)
        axis = np.argmin(t_next, axis=1)
        t_entry = t_next[rows, axis]
        idx[rows, axis] += step[rows, axis]
        moved = idx[rows, axis]
        alive = (t_entry < t1) & (moved >= 0) & (moved < n[axis])
        ids, o, d, t1, idx = ids[alive], o[alive], d[alive], t1[alive], idx[alive]
        step, t_entry, axis = step[alive], t_entry[alive], axis[alive]
        rows = np.arange(ids.size)


def traverse_voxels_batch(
    origins: np.ndarray,
    directions: np.ndarray,
    grid: VoxelGridSpec,
    t_near: float = DEFAULT_T_NEAR,
    t_far: float = DEFAULT_T_FAR,
) -> tuple[np.ndarray, np.ndarray]:
    """All (ray id, voxel ijk) pairs for a bundle of rays, unsorted."""
    ray_ids, voxels = [], []
    for ids, ijk, _, _ in dda_steps(
        origins, directions, t_near, t_far, grid.origin, grid.voxel_size, grid.dims
    ):
        ray_ids.append(ids)
        voxels.append(ijk)
    if not ray_ids:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(ray_ids), np.concatenate(voxels)


def center_volume(
    views: Sequence[CameraView], grid_extent, dims, z_mode: str = "centroid", floor_z: float = 0.0
) -> VoxelGridSpec:
    """Place a grid of ``grid_extent`` meters so the camera centroid is at its center.

    ``z_mode="floor"`` keeps the x/y centering but rests the grid base at
    ``floor_z`` instead.
    """
    if not views:
        raise ValueError("need at least one view")
    extent = np.asarray(grid_extent, dtype=np.float64)
    centroid = np.mean([v.center for v in views], axis=0)
    origin = centroid - 0.5 * extent
    if z_mode == "floor":
        origin[2] = floor_z
    elif z_mode != "centroid":
        raise ValueError(f"unknown z_mode {z_mode!r}")
    dims = tuple(int(n) for n in dims)
    return VoxelGridSpec(origin, extent / np.array(dims), dims)


@dataclass(frozen=True, eq=False)
class InteractionIndex:
    """Sorted, deduplicated ``(view, row, col, vx, vy, vz)`` pairs."""

    pairs: np.ndarray
    n_views: int
    feature_height: int
    feature_width: int
    dims: tuple[int, int, int]

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 6)
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def n_pixels_per_view(self) -> int:
        return self.feature_height * self.feature_width

    @property
    def n_pixels_total(self) -> int:
        return self.n_views * self.n_pixels_per_view

    @property
    def n_voxels_total(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def pixel_flat(self) -> np.ndarray:
        p = self.pairs
        return (p[:, 0] * self.feature_height + p[:, 1]) * self.feature_width + p[:, 2]

    @property
    def voxel_flat(self) -> np.ndarray:
        nx, ny, _ = self.dims
        p = self.pairs
        return p[:, 3] + nx * (p[:, 4] + ny * p[:, 5])

    def pairs_per_pixel(self) -> np.ndarray:
        return np.bincount(self.pixel_flat, minlength=self.n_pixels_total)

    def pairs_per_voxel(self) -> np.ndarray:
        return np.bincount(self.voxel_flat, minlength=self.n_voxels_total)

    def __eq__(self, other):
        if not isinstance(other, InteractionIndex):
            return NotImplemented
        return (
            (self.n_views, self.feature_height, self.feature_width, self.dims)
            == (other.n_views, other.feature_height, other.feature_width, other.dims)
            and np.array_equal(self.pairs, other.pairs)
        )


def build_interaction_index(
    views: Sequence[CameraView],
    grid: VoxelGridSpec,
    t_near: float = DEFAULT_T_NEAR,
    t_far: float = DEFAULT_T_FAR,
) -> InteractionIndex:
    if not views:
        raise ValueError("need at least one view")
    fh, fw = views[0].feature_height, views[0].feature_width
    if any((v.feature_height, v.feature_width) != (fh, fw) for v in views):
        raise ValueError("all views must share the feature resolution")
    chunks = []
    for view_id, view in enumerate(views):
        origins, dirs = view.feature_rays()
        ray_ids, ijk = traverse_voxels_batch(origins, dirs, grid, t_near, t_far)
        if ray_ids.size == 0:
            continue
        chunks.append(
            np.column_stack([np.full(ray_ids.size, view_id), ray_ids // fw, ray_ids % fw, ijk])
        )
    if chunks:
        pairs = np.unique(np.concatenate(chunks), axis=0)
    else:
        pairs = np.zeros((0, 6), dtype=np.int64)
    return InteractionIndex(pairs, len(views), fh, fw, grid.dims)


@dataclass(frozen=True)
class MemoryReport:
    n_pairs: int
    n_pixels: int
    n_voxels: int
    n_heads: int
    bytes_per_scalar: int
    dense_bytes: int
    sparse_bytes: int
    ratio: float
    max_pairs_per_pixel: int
    traversal_bound: int

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["dense_gib"] = self.dense_bytes / 2**30
        out["sparse_mib"] = self.sparse_bytes / 2**20
        return out


def memory_report(index: InteractionIndex, n_heads: int = 8, bytes_per_scalar: int = 4) -> MemoryReport:
    """Dense vs coordinate-format attention storage for both block directions.

    Sparse storage counts 3 numbers (row, column, value) per pair per head.
    """
    directions = 2
    dense = index.n_pixels_total * index.n_voxels_total * n_heads * bytes_per_scalar * directions
    sparse = 3 * len(index) * n_heads * bytes_per_scalar * directions
    counts = index.pairs_per_pixel()
    return MemoryReport(
        n_pairs=len(index),
        n_pixels=index.n_pixels_total,
        n_voxels=index.n_voxels_total,
        n_heads=n_heads,
        bytes_per_scalar=bytes_per_scalar,
        dense_bytes=dense,
        sparse_bytes=sparse,
        ratio=dense / sparse if sparse else math.inf,
        max_pairs_per_pixel=int(counts.max()) if counts.size else 0,
        traversal_bound=sum(index.dims),
    )


def unproject_init(pixel_features: torch.Tensor, index: InteractionIndex) -> torch.Tensor:
    """Average, per voxel, the features of every pixel whose ray crosses it.

    ``pixel_features`` is ``(n_pixels_total, C)`` in view/row/col order; the
    result is ``(n_voxels_total, C)`` in flat voxel order. Uncovered voxels
    are zero.
    """
    if pixel_features.shape[0] != index.n_pixels_total:
        raise ValueError("pixel feature count does not match the index")
    pix = torch.as_tensor(index.pixel_flat, device=pixel_features.device)
    vox = torch.as_tensor(index.voxel_flat, device=pixel_features.device)
    sums = pixel_features.new_zeros(index.n_voxels_total, pixel_features.shape[1])
    sums = sums.index_add(0, vox, pixel_features[pix])
    counts = torch.bincount(vox, minlength=index.n_voxels_total).to(pixel_features.dtype)
    return sums / counts.clamp(min=1).unsqueeze(1)
