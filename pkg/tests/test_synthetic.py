import dataclasses

import numpy as np
import pytest

from raysparse.config import SceneConfig
from raysparse.geometry import CameraIntrinsics, CameraPose, CameraView, center_volume
from raysparse.objects import ObjectGT
from raysparse.synthetic import (
    CATEGORIES,
    background,
    frame_subset,
    generate_scene,
    generate_trajectory,
    make_sample,
    objects_inside_room,
    read_dataset,
    render_views,
    write_dataset,
)

CFG = SceneConfig()


def test_zero_objects_gives_empty_scene():
    scene = generate_scene(3, dataclasses.replace(CFG, n_objects=(0, 0)))
    assert scene.objects == []


def test_scene_is_a_function_of_the_seed():
    a, b = make_sample(11, CFG, 6), make_sample(11, CFG, 6)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.amodal.tobytes() == b.amodal.tobytes()
    assert [o.center.tobytes() for o in a.objects] == [o.center.tobytes() for o in b.objects]
    c = make_sample(12, CFG, 6)
    assert a.images.tobytes() != c.images.tobytes()


def test_objects_do_not_overlap_and_stay_in_the_room():
    for seed in range(100):
        scene = generate_scene(seed, CFG)
        assert objects_inside_room(scene.objects, scene.room_extent)
        boxes = [o.aabb() for o in scene.objects]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                lo = np.maximum(boxes[i][0], boxes[j][0])
                hi = np.minimum(boxes[i][1], boxes[j][1])
                assert np.prod(np.clip(hi - lo, 0, None)) == 0
        for o in scene.objects:
            assert o.center[2] == pytest.approx(o.scale[2] / 2)
            spec = CATEGORIES[CFG.categories[o.category]]
            assert np.all(o.scale >= spec["low"]) and np.all(o.scale <= spec["high"])


def test_impossible_placement_raises():
    cramped = dataclasses.replace(CFG, n_objects=(4, 4), room_extent=(1.0, 1.0, 2.6), placement_radius=(0.1, 0.2))
    with pytest.raises(RuntimeError):
        generate_scene(0, cramped)


def test_single_frame_trajectory():
    assert len(generate_trajectory(0, CFG, 1)) == 1


def test_trajectory_is_smooth_and_inside_the_room():
    for seed in range(10):
        views = generate_trajectory(seed, CFG)
        centers = np.array([v.center for v in views])
        steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
        assert steps.max() <= 0.3
        half = np.asarray(CFG.room_extent) / 2
        assert np.all(np.abs(centers[:, :2]) < half[:2])
        assert np.all((centers[:, 2] > 0) & (centers[:, 2] < CFG.room_extent[2]))


def test_every_object_is_seen_by_some_view():
    for seed in range(30):
        scene = generate_scene(seed, CFG)
        views = generate_trajectory(seed, CFG)
        for obj in scene.objects:
            seen = False
            for v in views:
                u, w, depth = v.project(obj.center[None])
                k = v.intrinsics
                seen |= bool(depth[0] > 0 and 0 <= u[0] < k.width and 0 <= w[0] < k.height)
            assert seen


def test_frame_subset_spacing():
    assert frame_subset(24, 4, 0) == [0, 6, 12, 18]
    assert frame_subset(24, 4, 5) == [5, 11, 17, 23]
    assert frame_subset(24, 24) == list(range(24))
    with pytest.raises(ValueError):
        frame_subset(4, 5)


def front_camera(w=64, h=48, f=40.0):
    intr = CameraIntrinsics(f, f, w / 2, h / 2, w, h)
    return CameraView(intr, CameraPose.look_at(np.array([0.0, -4.0, 0.5]), np.array([0.0, 0.0, 0.5])), 4, 3)


def cube(center, scale, size=3):
    return ObjectGT(0, center, scale, 0.0, np.ones((size,) * 3, dtype=bool))


def test_empty_render_is_background():
    r = render_views([], [front_camera()])
    want = np.round(np.repeat(background(48)[:, None], 64, axis=1) * 255).astype(np.uint8)
    assert np.array_equal(r.images[0], want)
    assert not r.amodal.any() and np.all(r.visible == -1)


def test_box_front_face_is_a_flat_rectangle():
    # face at y = -0.5 spans x, z in [-0.5, 0.5] x [0, 1]; camera 3.5 m in front, f = 40
    view = front_camera()
    r = render_views([cube([0, 0, 0.5], [1, 1, 1])], [view], colors=np.array([[0.2, 0.6, 0.9]]))
    cols = (np.arange(64) + 0.5 - 32) / 40 * 3.5
    rows = 0.5 - (np.arange(48) + 0.5 - 24) / 40 * 3.5
    inside = (np.abs(cols)[None] < 0.5) & (rows[:, None] > 0) & (rows[:, None] < 1)
    assert np.array_equal(r.visible[0] == 0, inside)
    light = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
    shade = 0.45 + 0.55 * max(0.0, -light[1])
    want = np.round(np.array([0.2, 0.6, 0.9]) * shade * 255).astype(np.uint8)
    assert np.all(r.images[0][inside] == want)


def test_nearer_object_wins_the_depth_test():
    view = front_camera()
    near = cube([0.3, -1.0, 0.5], [0.6, 0.2, 0.6])
    far = cube([0.0, 1.0, 0.5], [1.5, 0.2, 1.5])
    r = render_views([far, near], [view], colors=np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    only_near = render_views([near], [view]).visible[0] == 0
    assert only_near.any()
    assert np.all(r.visible[0][only_near] == 1)
    # pixels of the far panel outside the near box keep the far id
    assert np.any(r.visible[0] == 0)
    assert np.all(r.amodal[0][r.visible[0] >= 0])


def test_amodal_contains_visible_and_occupancy_tracks_objects():
    for seed in range(8):
        s = make_sample(seed, CFG, 4)
        assert np.all(s.amodal[s.visible >= 0])
        grid = center_volume(s.views, (4.8, 4.8, 2.8), (16, 16, 8))
        assert s.occupancy(grid).any() == bool(s.objects)


def test_dataset_round_trip(tmp_path):
    dirs = write_dataset(tmp_path, seed=5, n_scenes=2, config=dataclasses.replace(CFG, n_frames=3), config_hash="abc")
    assert (tmp_path / "manifest.json").exists()
    assert all((d / "images" / "000.png").exists() for d in dirs)
    back = read_dataset(tmp_path)
    for original, loaded in zip([make_sample(s, dataclasses.replace(CFG, n_frames=3)) for s in
                                 [b.seed for b in back]], back):
        assert np.array_equal(original.images, loaded.images)
        assert np.array_equal(original.amodal, loaded.amodal)
        assert np.array_equal(original.visible, loaded.visible)
        for a, b in zip(original.objects, loaded.objects):
            assert a.category == b.category and np.array_equal(a.shape, b.shape)
            np.testing.assert_array_equal(a.center, b.center)
            assert a.yaw == b.yaw
        for a, b in zip(original.views, loaded.views):
            assert a.pose == b.pose and a.intrinsics == b.intrinsics
