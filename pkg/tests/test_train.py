import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raysparse.config import toy_config
from raysparse.optim import AdamW
from raysparse.synthetic import make_sample
from raysparse.train import (
    Checkpoint,
    NonFiniteLoss,
    Trainer,
    checkpoint_bytes,
    evaluate,
    infer,
    make_batch,
    model_from_checkpoint,
    novel_frame,
    step_choice,
)

# --- optimizer -----------------------------------------------------------------


def run_adamw(p0, grads, **kw):
    p = torch.nn.Parameter(torch.tensor([p0], dtype=torch.float64))
    opt = AdamW([p], **kw)
    trace = []
    for g in grads:
        p.grad = torch.tensor([g], dtype=torch.float64)
        opt.step()
        trace.append(float(p.detach()))
    return trace


def test_zero_gradient_and_decay_leave_parameters():
    assert run_adamw(1.5, [0.0] * 3, lr=0.1, weight_decay=0.0) == [1.5] * 3


def test_two_step_hand_trace():
    # constant g = 0.5, lr = 0.1: m1 = 0.05, v1 = 2.5e-4 -> m^ = 0.5, v^ = 0.25
    # m2 = 0.095, v2 = 4.9975e-4 -> m^ = 0.5, v^ = 0.25 again
    trace = run_adamw(1.0, [0.5, 0.5], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    step = 0.1 * 0.5 / (0.5 + 1e-8)
    assert trace[0] == pytest.approx(1.0 - step, abs=1e-15)
    assert trace[1] == pytest.approx(1.0 - 2 * step, abs=1e-15)
    # with decoupled decay the weight shrinks first, then takes the same adaptive step
    decayed = run_adamw(1.0, [0.5, 0.5], lr=0.1, weight_decay=0.01)
    p1 = 1.0 * (1 - 0.001) - step
    assert decayed[0] == pytest.approx(p1, abs=1e-15)
    assert decayed[1] == pytest.approx(p1 * (1 - 0.001) - step, abs=1e-15)


def test_decay_only_shrinks_geometrically():
    trace = run_adamw(2.0, [0.0] * 5, lr=0.01, weight_decay=0.05)
    np.testing.assert_allclose(trace, 2.0 * (1 - 0.01 * 0.05) ** np.arange(1, 6), rtol=1e-14)


def test_matches_reference_adamw_on_random_problem():
    rng = torch.Generator().manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, 4, dtype=torch.float64, generator=rng))
    b = torch.nn.Parameter(a.detach().clone())
    mine = AdamW([a], lr=3e-3, weight_decay=0.05)
    ref = torch.optim.AdamW([b], lr=3e-3, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(20):
        g = torch.randn(5, 4, dtype=torch.float64, generator=rng)
        a.grad, b.grad = g.clone(), g.clone()
        mine.step()
        ref.step()
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


def test_optimizer_rejects_bad_settings():
    p = [torch.nn.Parameter(torch.zeros(1))]
    for kw in ({"lr": 0}, {"betas": (1.0, 0.9)}, {"weight_decay": -1}):
        with pytest.raises(ValueError):
            AdamW(p, **kw)


# --- trainer -------------------------------------------------------------------------


def tiny_config(**train):
    cfg = toy_config()
    return cfg.replace(
        backbone={"n_blocks": 1, "d_model": 32, "ffn_width": 32, "encoder_widths": [8, 16, 16, 32]},
        heads={"n_queries": 6, "decoder_ffn": 32, "shape_size": 7, "shape_channels": 4, "seg_widths": [8, 8, 4, 4]},
        scenes={"n_frames": 8, "shape_size": 7},
        train={"log_every": 0, "train_frames": 2, **train},
    )


@pytest.fixture(scope="module")
def samples():
    cfg = tiny_config()
    return [make_sample(s, cfg.scenes) for s in (3, 4)]


def test_zero_steps_checkpoint_is_the_initial_model(samples, tmp_path):
    cfg = tiny_config(phase1_steps=0, phase2_steps=0)
    trainer = Trainer(cfg, samples)
    assert trainer.run() == []
    trainer.save(tmp_path / "c.rtck")
    fresh = Trainer(cfg, samples)
    assert (tmp_path / "c.rtck").read_bytes() == fresh.checkpoint_bytes()


def test_checkpoint_round_trip_is_byte_identical(samples, tmp_path):
    cfg = tiny_config(phase1_steps=1, phase2_steps=2)
    trainer = Trainer(cfg, samples)
    trainer.run()
    blob = trainer.checkpoint_bytes()
    (tmp_path / "a.rtck").write_bytes(blob)
    other = Trainer(cfg, samples)
    other.resume(tmp_path / "a.rtck")
    assert other.checkpoint_bytes() == blob
    assert other.step == 3
    model, ckpt = model_from_checkpoint(tmp_path / "a.rtck")
    assert ckpt.config_hash == cfg.hash()
    assert checkpoint_bytes(model, None, 3, cfg) == checkpoint_bytes(trainer.model, None, 3, cfg)


def test_resume_continues_the_same_run(samples, tmp_path):
    cfg = tiny_config(phase1_steps=2, phase2_steps=2)
    straight = Trainer(cfg, samples)
    straight.run()
    first = Trainer(cfg, samples)
    first.run(3)
    first.save(tmp_path / "mid.rtck")
    second = Trainer(cfg, samples)
    second.resume(tmp_path / "mid.rtck")
    second.run()
    assert second.checkpoint_bytes() == straight.checkpoint_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"NOPE" + bytes(20))


def test_identical_runs_give_identical_logs(samples, tmp_path):
    cfg = tiny_config(phase1_steps=2, phase2_steps=3)
    logs = []
    for name in "ab":
        trainer = Trainer(cfg, samples)
        trainer.run(log_file=tmp_path / f"{name}.jsonl")
        logs.append((tmp_path / f"{name}.jsonl").read_bytes())
    assert logs[0] == logs[1]
    records = [json.loads(l) for l in logs[0].splitlines()]
    assert [r["phase"] for r in records] == [1, 1, 2, 2, 2]
    assert "detection" not in records[0] and "detection" in records[-1]


def test_step_choice_is_pure_and_spread():
    assert step_choice(0, 5, 10, 24, 4) == step_choice(0, 5, 10, 24, 4)
    scenes = {step_choice(0, s, 10, 24, 4)[0] for s in range(200)}
    assert scenes == set(range(10))
    _, frames = step_choice(1, 0, 1, 24, 4, "even")
    assert len(frames) == 4 and np.all(np.diff(sorted(frames)) == 6)
    for step in range(50):
        _, frames = step_choice(1, step, 1, 24, 4, "random")
        assert frames == sorted(set(frames)) and len(frames) == 4 and 0 <= min(frames) and max(frames) < 24
    with pytest.raises(ValueError):
        step_choice(1, 0, 1, 24, 4, "spiral")


@given(st.lists(st.integers(0, 23), min_size=1, max_size=23, unique=True))
def test_novel_frame_is_never_an_input(frames):
    frames = sorted(frames)
    query = novel_frame(24, frames)
    assert 0 <= query < 24 and query not in frames


def test_novel_frame_sits_between_the_first_two_inputs():
    assert novel_frame(24, [0, 6, 12, 18]) == 3
    assert novel_frame(24, [4, 5, 9]) in (3, 6)
    assert novel_frame(24, [20]) == 8  # a single input: opposite side of the loop


def test_initial_detection_loss_is_padding_prior(samples):
    cfg = tiny_config(phase1_steps=0, phase2_steps=1)
    empty = make_sample(0, cfg.replace(scenes={"n_objects": [0, 0]}).scenes)
    trainer = Trainer(cfg, [empty])
    record = trainer.train_step()
    layers = cfg.heads.n_decoder_layers
    assert record["det_cls"] == pytest.approx(-layers * math.log(cfg.heads.padding_prior), rel=1e-5)
    # with objects: matched slots see each category with probability (1 - p_pad) / K
    scene = next(s for s in samples if s.objects)
    trainer = Trainer(cfg, [scene])
    record = trainer.train_step()
    q, g, k = cfg.heads.n_queries, len(scene.objects), cfg.heads.n_categories
    w = cfg.losses.padding
    p_obj = (1 - cfg.heads.padding_prior) / k
    ce = (g * -math.log(p_obj) + w * (q - g) * -math.log(cfg.heads.padding_prior)) / (g + w * (q - g))
    assert record["det_cls"] == pytest.approx(layers * ce, rel=1e-5)


def test_non_finite_loss_aborts_with_dump(samples, tmp_path):
    trainer = Trainer(tiny_config(phase1_steps=1, phase2_steps=0), samples, run_dir=tmp_path)
    with torch.no_grad():
        trainer.model.occupancy.conv.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        trainer.train_step()
    dump = json.loads((tmp_path / "nonfinite_000000.json").read_text())
    assert dump["step"] == 0 and "occupancy" in dump["terms"]


def test_inference_accepts_any_frame_count_and_is_deterministic(samples):
    cfg = tiny_config()
    trainer = Trainer(cfg, samples)
    sample = samples[0]
    for n in (1, 3, 8):
        batch = make_batch(sample, range(n))
        preds, occ, geometry = infer(trainer.model, batch.images, batch.views)
        again, occ2, _ = infer(trainer.model, batch.images, batch.views)
        assert occ.shape == tuple(cfg.backbone.grid_dims)
        assert np.array_equal(occ, occ2) and len(preds) == len(again)
    # an untrained head predicts padding in every slot
    assert preds == []
    report = evaluate(trainer.model, samples, 2)
    assert 0 <= report.mean_occupancy_iou <= 1 and len(report.scenes) == 2


def test_novel_view_term_joins_phase_two(samples):
    cfg = tiny_config(phase1_steps=0, phase2_steps=1).replace(heads={"nvs": True})
    record = Trainer(cfg, samples).train_step()
    assert 0 < record["nvs"] < 1


def test_novel_view_head_overfits_a_training_view():
    torch.manual_seed(0)
    cfg = tiny_config().replace(heads={"nvs": True, "seg_widths": [16, 16, 8, 8]})
    sample = make_sample(1, toy_config().scenes)
    from raysparse.model import SceneModel

    model = SceneModel(cfg)
    opt = AdamW(model.parameters(), lr=2e-3, weight_decay=0.0)
    batch = make_batch(sample, [0, 6, 12, 18])
    geometry = model.geometry(batch.views)
    b = cfg.backbone
    for _ in range(100):
        opt.zero_grad()
        voxels = model.backbone(batch.images, geometry).voxels
        image = model.nvs(voxels, batch.views[1], geometry.grid, (b.feature_height, b.feature_width))
        loss = torch.mean((image - batch.images[1]) ** 2)
        loss.backward()
        opt.step()
    assert float(loss.detach()) <= 0.01
