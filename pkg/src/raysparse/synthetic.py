"""Procedural rooms of primitive furniture, scanning trajectories and a voxel renderer.

Scenes are a deterministic function of ``(seed, SceneConfig)``. The room is
centred on the world origin with its floor at ``z = 0``; every object rests on
the floor. Images are rendered from the same posed shape cells that define
the supervision targets, so the amodal masks always contain the visible ones.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import SceneConfig
from .geometry import CameraIntrinsics, CameraPose, CameraView, VoxelGridSpec
from .io import load_objects, load_views, save_objects, save_views
from .objects import ObjectGT, cell_centers
from .targets import cast_rays, rasterize_occupancy

# scale ranges are (depth x, width y, height z) in meters
CATEGORIES = {
    "cabinet": dict(low=(0.40, 0.60, 0.70), high=(0.60, 1.00, 1.10), color=(0.60, 0.40, 0.22)),
    "bin": dict(low=(0.30, 0.30, 0.40), high=(0.45, 0.45, 0.70), color=(0.25, 0.45, 0.80)),
    "chair": dict(low=(0.45, 0.45, 0.80), high=(0.60, 0.60, 1.00), color=(0.85, 0.25, 0.25)),
    "table": dict(low=(0.70, 0.70, 0.65), high=(1.20, 1.20, 0.80), color=(0.30, 0.70, 0.35)),
    "sofa": dict(low=(0.80, 1.40, 0.70), high=(1.00, 2.00, 0.90), color=(0.70, 0.55, 0.85)),
}
# rotationally symmetric primitives get a canonical yaw of zero
SYMMETRIC = {"bin"}
YAW_RANGE = (-math.pi / 4, math.pi / 4)
LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
SKY = np.array([0.80, 0.82, 0.86])
GROUND = np.array([0.42, 0.40, 0.38])
MAX_REJECTIONS = 1000


def primitive_shape(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Canonical ``size^3`` occupancy of a category primitive."""
    c = cell_centers(size)
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    if category == "cabinet":
        return np.ones((size,) * 3, dtype=bool)
    if category == "bin":
        return x**2 + y**2 <= 0.25
    if category == "chair":
        back = rng.uniform(0.15, 0.3)
        return (z < -0.05) | (x < -0.5 + back)
    if category == "table":
        top = rng.uniform(0.12, 0.2)
        leg = 0.15
        return (z > 0.5 - top) | ((np.abs(x) > 0.5 - leg) & (np.abs(y) > 0.5 - leg))
    if category == "sofa":
        return (z < -0.1) | (x < -0.25) | ((np.abs(y) > 0.38) & (z < 0.15))
    raise ValueError(f"unknown category {category!r}")


def _streams(seed: int):
    """Independent generators for objects, trajectory and appearance."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3)]


@dataclass
class Scene:
    objects: list
    room_extent: np.ndarray
    tints: np.ndarray  # (n_objects,) per-instance brightness factors
    seed: int


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    rng, _, look = _streams(seed)
    lo_n, hi_n = config.n_objects
    n = int(rng.integers(lo_n, hi_n + 1))
    half_room = np.asarray(config.room_extent[:2], dtype=np.float64) / 2
    objects: list[ObjectGT] = []
    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    rejections = 0
    while len(objects) < n:
        if rejections >= MAX_REJECTIONS:
            raise RuntimeError(f"could not place {n} objects after {MAX_REJECTIONS} rejections")
        category = int(rng.integers(len(config.categories)))
        name = config.categories[category]
        spec = CATEGORIES[name]
        scale = rng.uniform(spec["low"], spec["high"])
        if name in SYMMETRIC:
            scale[1] = scale[0]
            yaw = 0.0
        else:
            yaw = float(rng.uniform(*YAW_RANGE))
        radius = rng.uniform(*config.placement_radius)
        angle = rng.uniform(0, 2 * math.pi)
        center = np.array([radius * math.cos(angle), radius * math.sin(angle), scale[2] / 2])
        shape = primitive_shape(name, config.shape_size, rng)
        obj = ObjectGT(category, center, scale, yaw, shape)
        lo, hi = obj.aabb()
        inside = np.all(lo[:2] >= -half_room) and np.all(hi[:2] <= half_room) and hi[2] <= config.room_extent[2]
        overlap = any(np.all(lo < b_hi) and np.all(b_lo < hi) for b_lo, b_hi in boxes)
        if not inside or overlap:
            rejections += 1
            continue
        objects.append(obj)
        boxes.append((lo, hi))
    tints = look.uniform(0.8, 1.15, size=len(objects))
    return Scene(objects, np.asarray(config.room_extent, dtype=np.float64), tints, int(seed))


def camera_intrinsics(config: SceneConfig) -> CameraIntrinsics:
    w, h = config.image_width, config.image_height
    return CameraIntrinsics(config.focal, config.focal, w / 2, h / 2, w, h)


def generate_trajectory(seed: int, config: SceneConfig, n_frames: int | None = None) -> list[CameraView]:
    """A slow 360 degree pan from a small circle at eye height, looking outwards and down."""
    _, rng, _ = _streams(seed)
    n = config.n_frames if n_frames is None else n_frames
    if n < 1:
        raise ValueError("need at least one frame")
    intr = camera_intrinsics(config)
    fw, fh = config.image_width // 16, config.image_height // 16
    start = rng.uniform(0, 2 * math.pi)
    jitter = math.radians(config.jitter_deg)
    views = []
    for i in range(n):
        phi = start + 2 * math.pi * i / n
        eye = np.array([config.camera_radius * math.cos(phi), config.camera_radius * math.sin(phi), config.camera_height])
        heading = phi + rng.uniform(-jitter, jitter)
        pitch = math.radians(config.camera_pitch_deg) + rng.uniform(-jitter, jitter)
        direction = np.array([math.cos(heading) * math.cos(pitch), math.sin(heading) * math.cos(pitch), -math.sin(pitch)])
        views.append(CameraView(intr, CameraPose.look_at(eye, eye + direction), fw, fh))
    return views


@dataclass
class Rendering:
    images: np.ndarray  # (N, H, W, 3) uint8
    visible: np.ndarray  # (N, H, W) int16 object id of the first hit, -1 for background
    amodal: np.ndarray  # (N, H, W) bool


def background(height: int) -> np.ndarray:
    t = (np.arange(height) + 0.5) / height
    return SKY[None] * (1 - t[:, None]) + GROUND[None] * t[:, None]


def object_colors(scene_objects: Sequence[ObjectGT], tints, categories: Sequence[str]) -> np.ndarray:
    base = np.array([CATEGORIES[categories[o.category]]["color"] for o in scene_objects]).reshape(-1, 3)
    return np.clip(base * np.asarray(tints).reshape(-1, 1), 0, 1)


def render_views(
    objects: Sequence[ObjectGT], views: Sequence[CameraView], colors: np.ndarray | None = None
) -> Rendering:
    """Depth-tested flat-shaded rendering of the posed shape cells.

    ``colors`` holds one RGB row per object; the default is mid grey.
    """
    if colors is None:
        colors = np.full((len(objects), 3), 0.6)
    images, visible, amodal = [], [], []
    for view in views:
        h, w = view.intrinsics.height, view.intrinsics.width
        img = np.repeat(background(h)[:, None, :], w, axis=1).reshape(-1, 3)
        ids = np.full(h * w, -1, dtype=np.int16)
        any_hit = np.zeros(h * w, dtype=bool)
        if objects:
            hits = cast_rays(objects, *view.pixel_rays())
            hit = hits.object_id >= 0
            shade = 0.45 + 0.55 * np.clip(hits.normal[hit] @ LIGHT, 0, None)
            img[hit] = colors[hits.object_id[hit]] * shade[:, None]
            ids[hit] = hits.object_id[hit]
            any_hit = hits.any_hit.any(axis=1)
        images.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).reshape(h, w, 3))
        visible.append(ids.reshape(h, w))
        amodal.append(any_hit.reshape(h, w))
    return Rendering(np.stack(images), np.stack(visible), np.stack(amodal))


@dataclass
class SceneSample:
    """A scene, its full frame pool and per-frame renderings."""

    objects: list
    room_extent: np.ndarray
    views: list
    images: np.ndarray  # (N, H, W, 3) uint8; divide by 255 for [0, 1]
    amodal: np.ndarray  # (N, H, W) bool
    visible: np.ndarray  # (N, H, W) int16
    seed: int
    _occupancy_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_frames(self) -> int:
        return len(self.views)

    def float_images(self, frames: Sequence[int] | None = None) -> np.ndarray:
        idx = slice(None) if frames is None else list(frames)
        return self.images[idx].astype(np.float32) / 255.0

    def occupancy(self, grid: VoxelGridSpec) -> np.ndarray:
        key = (grid.dims, grid.origin.tobytes(), grid.voxel_size.tobytes())
        if key not in self._occupancy_cache:
            self._occupancy_cache[key] = rasterize_occupancy(self.objects, grid)
        return self._occupancy_cache[key]


def make_sample(seed: int, config: SceneConfig, n_frames: int | None = None) -> SceneSample:
    scene = generate_scene(seed, config)
    views = generate_trajectory(seed, config, n_frames)
    colors = object_colors(scene.objects, scene.tints, config.categories)
    r = render_views(scene.objects, views, colors)
    return SceneSample(scene.objects, scene.room_extent, views, r.images, r.amodal, r.visible, int(seed))


def frame_subset(n_pool: int, n_frames: int, offset: int = 0) -> list[int]:
    """``n_frames`` evenly spaced frame ids out of a pool, rotated by ``offset``."""
    if not 1 <= n_frames <= n_pool:
        raise ValueError(f"cannot take {n_frames} frames from a pool of {n_pool}")
    return sorted((offset + (i * n_pool) // n_frames) % n_pool for i in range(n_frames))


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


# --- dataset directories -------------------------------------------------

TARGETS_MAGIC = b"RTTG"
_TARGETS_HEADER = struct.Struct("<4sIIII")


def write_scene(path, sample: SceneSample) -> None:
    """``cameras.json``, ``gt.json``, ``images/NNN.png`` and ``targets.bin`` under ``path``.

    ``targets.bin`` holds a header (magic, version, frames, height, width),
    the packed amodal masks, the visible-id maps as int16, and finally the
    shape bitsets referenced from ``gt.json``.
    """
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    save_views(path / "cameras.json", sample.views)
    for i, img in enumerate(sample.images):
        Image.fromarray(img).save(path / "images" / f"{i:03d}.png")
    n, h, w = sample.amodal.shape
    prefix = (
        _TARGETS_HEADER.pack(TARGETS_MAGIC, 1, n, h, w)
        + np.packbits(sample.amodal.ravel()).tobytes()
        + sample.visible.astype("<i2").tobytes()
    )
    blob = save_objects(path / "gt.json", path / "targets.bin", sample.objects, prefix)
    (path / "targets.bin").write_bytes(blob)
    meta = {"seed": sample.seed, "room_extent": [float(x) for x in sample.room_extent]}
    (path / "scene.json").write_text(json.dumps(meta))


def read_scene(path) -> SceneSample:
    path = Path(path)
    views = load_views(path / "cameras.json")
    images = np.stack([np.asarray(Image.open(path / "images" / f"{i:03d}.png").convert("RGB")) for i in range(len(views))])
    blob = (path / "targets.bin").read_bytes()
    magic, _, n, h, w = _TARGETS_HEADER.unpack_from(blob)
    if magic != TARGETS_MAGIC:
        raise ValueError(f"{path / 'targets.bin'} is not a targets file")
    offset = _TARGETS_HEADER.size
    n_mask = (n * h * w + 7) // 8
    amodal = np.unpackbits(np.frombuffer(blob, np.uint8, n_mask, offset))[: n * h * w].reshape(n, h, w).astype(bool)
    offset += n_mask
    visible = np.frombuffer(blob, "<i2", n * h * w, offset).reshape(n, h, w).astype(np.int16)
    meta = json.loads((path / "scene.json").read_text())
    return SceneSample(
        load_objects(path / "gt.json"), np.asarray(meta["room_extent"]), views, images, amodal, visible, meta["seed"]
    )


def write_dataset(root, seed: int, n_scenes: int, config: SceneConfig, config_hash: str = "") -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = scene_seeds(seed, n_scenes)
    dirs = []
    for i, s in enumerate(seeds):
        d = root / f"scene_{i:04d}"
        write_scene(d, make_sample(s, config))
        dirs.append(d)
    manifest = {
        "seed": int(seed),
        "config_hash": config_hash,
        "scene_config": json.loads(json.dumps(config.__dict__)),
        "scenes": [{"dir": d.name, "seed": s} for d, s in zip(dirs, seeds)],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return dirs


def read_dataset(root) -> list[SceneSample]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return [read_scene(root / s["dir"]) for s in manifest["scenes"]]


def objects_inside_room(objects: Sequence[ObjectGT], room_extent) -> bool:
    half = np.asarray(room_extent[:2]) / 2
    for o in objects:
        lo, hi = o.aabb()
        if np.any(lo[:2] < -half - 1e-9) or np.any(hi[:2] > half + 1e-9) or lo[2] < -1e-9 or hi[2] > room_extent[2]:
            return False
    return True

