"""Supervision targets rasterized from posed object shape grids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraView, VoxelGridSpec, dda_steps
from .objects import ObjectGT


@dataclass
class RayHits:
    """First-hit record for a bundle of rays against a set of objects."""

    depth: np.ndarray  # (n,) ray parameter of the first hit, inf on a miss
    object_id: np.ndarray  # (n,) index into the object list, -1 on a miss
    normal: np.ndarray  # (n, 3) world-space unit normal of the entered face
    any_hit: np.ndarray  # (n, n_objects) whether the ray touches each object at all


def cast_rays(objects: Sequence[ObjectGT], origins: np.ndarray, directions: np.ndarray) -> RayHits:
    """Intersect rays with the occupied cells of every posed object.

    Each object is handled in its canonical frame, where the ray stays a ray
    with the same parameter ``t``, so first-hit depths are comparable across
    objects.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = origins.shape[0]
    depth = np.full(n, np.inf)
    object_id = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    any_hit = np.zeros((n, len(objects)), dtype=bool)
    for k, obj in enumerate(objects):
        size = obj.shape.shape[0]
        o = obj.to_canonical(origins)
        d = (directions @ obj.rotation) / obj.scale
        lo, hi = np.full(3, -0.5), np.full(3, 0.5)
        first_t = np.full(n, np.inf)
        first_axis = np.full(n, -1, dtype=np.int64)
        for ids, ijk, t_entry, axis in dda_steps(o, d, 0.0, np.inf, lo, np.full(3, 1.0 / size), (size,) * 3):
            occupied = obj.shape[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
            fresh = occupied & np.isinf(first_t[ids])
            first_t[ids[fresh]] = t_entry[fresh]
            first_axis[ids[fresh]] = axis[fresh]
        hit = np.isfinite(first_t)
        any_hit[:, k] = hit
        # first voxel of a ray: the entry face is the slab that was crossed last
        entry = hit & (first_axis < 0)
        if entry.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                a = (lo - o[entry]) / d[entry]
                b = (hi - o[entry]) / d[entry]
            near = np.where(np.isnan(a), -np.inf, np.minimum(a, b))
            first_axis[entry] = np.argmax(near, axis=1)
        closer = hit & (first_t < depth)
        if closer.any():
            rows = np.nonzero(closer)[0]
            ax = first_axis[rows]
            n_local = np.zeros((rows.size, 3))
            n_local[np.arange(rows.size), ax] = -np.sign(d[rows, ax])
            n_world = (n_local / obj.scale) @ obj.rotation.T
            normal[rows] = n_world / np.linalg.norm(n_world, axis=1, keepdims=True)
            depth[rows] = first_t[rows]
            object_id[rows] = k
    return RayHits(depth, object_id, normal, any_hit)


def rasterize_amodal_masks(objects: Sequence[ObjectGT], views: Sequence[CameraView]) -> np.ndarray:
    """``(n_views, H, W)`` masks: a pixel is set if its ray meets any object, occluded or not."""
    masks = []
    for view in views:
        origins, dirs = view.pixel_rays()
        h, w = view.intrinsics.height, view.intrinsics.width
        if not objects:
            masks.append(np.zeros((h, w), dtype=bool))
            continue
        masks.append(cast_rays(objects, origins, dirs).any_hit.any(axis=1).reshape(h, w))
    return np.stack(masks)


def rasterize_occupancy(objects: Sequence[ObjectGT], grid: VoxelGridSpec) -> np.ndarray:
    """``(nx, ny, nz)`` grid: a voxel is set if its center lies in an occupied object cell."""
    nx, ny, nz = grid.dims
    occupancy = np.zeros(nx * ny * nz, dtype=bool)
    centers = grid.voxel_centers()
    for obj in objects:
        lo, hi = obj.aabb()
        near = np.nonzero(np.all((centers >= lo) & (centers <= hi), axis=1))[0]
        if near.size:
            occupancy[near] |= obj.contains(centers[near])
    return occupancy.reshape(nz, ny, nx).transpose(2, 1, 0)


def occupancy_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """IoU of two boolean grids; two empty grids count as a perfect match."""
    pred, target = np.asarray(pred, dtype=bool), np.asarray(target, dtype=bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)
