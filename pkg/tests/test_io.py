import numpy as np
import pytest

from conftest import random_view
from raysparse.geometry import build_interaction_index, center_volume
from raysparse.io import index_from_bytes, index_to_bytes, load_index, load_views, save_index, save_views


def test_camera_file_round_trip(tmp_path, rng):
    views = [random_view(rng) for _ in range(5)]
    save_views(tmp_path / "cams.json", views)
    back = load_views(tmp_path / "cams.json")
    for a, b in zip(views, back):
        assert a.pose == b.pose
        assert a.intrinsics == b.intrinsics
        assert (a.feature_width, a.feature_height) == (b.feature_width, b.feature_height)


def test_camera_file_accepts_minimal_records(tmp_path):
    (tmp_path / "cams.json").write_text(
        '[{"fx": 500, "fy": 500, "cx": 320, "cy": 240, "width": 640, "height": 480,'
        ' "rotation": [1,0,0,0,1,0,0,0,1], "translation": [0,0,1]}]'
    )
    (view,) = load_views(tmp_path / "cams.json")
    assert (view.feature_height, view.feature_width) == (30, 40)


def test_index_file_round_trip(tmp_path, rng):
    views = [random_view(rng, center=rng.uniform(-1, 1, 3), target=rng.uniform(-3, 3, 3)) for _ in range(4)]
    index = build_interaction_index(views, center_volume(views, (4.8, 4.8, 3.2), (8, 8, 4)))
    assert len(index) > 0
    save_index(tmp_path / "a.rtix", index)
    back = load_index(tmp_path / "a.rtix")
    assert back == index
    blob = (tmp_path / "a.rtix").read_bytes()
    assert blob[:4] == b"RTIX"
    assert index_to_bytes(back) == blob


def test_index_file_rejects_garbage():
    with pytest.raises(ValueError):
        index_from_bytes(b"NOPE" + bytes(40))
