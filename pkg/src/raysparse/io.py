"""On-disk formats: camera trajectories, interaction indices and ground-truth objects.

Camera trajectory (JSON)::

    {"views": [{"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..,
                "rotation": [9 numbers, row-major camera-to-world],
                "translation": [3 numbers, camera center in world meters],
                "feature_width": .., "feature_height": ..}, ...]}

World frame is right-handed and z-up; cameras look along +z with x right
and y down. The feature grid fields are optional and default to a 16x
reduction.

Interaction index (binary, little-endian)::

    b"RTIX" | u32 version | u32 n_views | u32 feature_height | u32 feature_width
    | u32 nx | u32 ny | u32 nz | u64 n_pairs | n_pairs * 6 * u32

with the 6-tuples ``(view, row, col, vx, vy, vz)`` in sorted order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, CameraView, InteractionIndex
from .objects import ObjectGT, pack_shape, unpack_shape

INDEX_MAGIC = b"RTIX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIIIIIIIQ")


def view_to_dict(view: CameraView) -> dict:
    k = view.intrinsics
    return {
        "fx": float(k.fx),
        "fy": float(k.fy),
        "cx": float(k.cx),
        "cy": float(k.cy),
        "width": int(k.width),
        "height": int(k.height),
        "rotation": [float(x) for x in view.pose.rotation.ravel()],
        "translation": [float(x) for x in view.pose.translation],
        "feature_width": int(view.feature_width),
        "feature_height": int(view.feature_height),
    }


def view_from_dict(record: dict) -> CameraView:
    intr = CameraIntrinsics(
        record["fx"], record["fy"], record["cx"], record["cy"], int(record["width"]), int(record["height"])
    )
    pose = CameraPose(np.asarray(record["rotation"], dtype=np.float64).reshape(3, 3), record["translation"])
    fw = int(record.get("feature_width", intr.width // 16))
    fh = int(record.get("feature_height", intr.height // 16))
    return CameraView(intr, pose, fw, fh)


def save_views(path, views: Sequence[CameraView]) -> None:
    Path(path).write_text(json.dumps({"views": [view_to_dict(v) for v in views]}, indent=1))


def load_views(path) -> list[CameraView]:
    data = json.loads(Path(path).read_text())
    records = data["views"] if isinstance(data, dict) else data
    return [view_from_dict(r) for r in records]


def index_to_bytes(index: InteractionIndex) -> bytes:
    nx, ny, nz = index.dims
    header = _INDEX_HEADER.pack(
        INDEX_MAGIC, INDEX_VERSION, index.n_views, index.feature_height, index.feature_width, nx, ny, nz, len(index)
    )
    return header + np.ascontiguousarray(index.pairs, dtype="<u4").tobytes()


def index_from_bytes(blob: bytes) -> InteractionIndex:
    magic, version, n_views, fh, fw, nx, ny, nz, n_pairs = _INDEX_HEADER.unpack_from(blob)
    if magic != INDEX_MAGIC:
        raise ValueError("not an interaction index file")
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    body = np.frombuffer(blob, dtype="<u4", count=6 * n_pairs, offset=_INDEX_HEADER.size)
    pairs = body.reshape(n_pairs, 6).astype(np.int64)
    return InteractionIndex(pairs, n_views, fh, fw, (nx, ny, nz))


def save_index(path, index: InteractionIndex) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path) -> InteractionIndex:
    return index_from_bytes(Path(path).read_bytes())


def object_to_dict(obj: ObjectGT, shape_ref=None) -> dict:
    record = {
        "category": obj.category,
        "center": [float(x) for x in obj.center],
        "scale": [float(x) for x in obj.scale],
        "yaw": float(obj.yaw),
    }
    if shape_ref is not None:
        record["shape_grid_ref"] = shape_ref
    return record


def save_objects(json_path, blob_path, objects: Sequence[ObjectGT], blob_prefix: bytes = b"") -> bytes:
    """Write ``gt.json`` and return ``blob_prefix`` followed by the packed shapes.

    Each object's ``shape_grid_ref`` records the byte range of its bitset in
    the blob file.
    """
    blob = bytearray(blob_prefix)
    records = []
    for obj in objects:
        packed = pack_shape(obj.shape)
        ref = {"file": Path(blob_path).name, "offset": len(blob), "length": len(packed)}
        blob += packed
        records.append(object_to_dict(obj, ref))
    Path(json_path).write_text(json.dumps({"objects": records}, indent=1))
    return bytes(blob)


def load_objects(json_path) -> list[ObjectGT]:
    json_path = Path(json_path)
    records = json.loads(json_path.read_text())["objects"]
    blobs: dict = {}
    objects = []
    for r in records:
        ref = r["shape_grid_ref"]
        if ref["file"] not in blobs:
            blobs[ref["file"]] = (json_path.parent / ref["file"]).read_bytes()
        data = blobs[ref["file"]][ref["offset"] : ref["offset"] + ref["length"]]
        shape, _ = unpack_shape(data)
        objects.append(ObjectGT(r["category"], r["center"], r["scale"], r["yaw"], shape))
    return objects
