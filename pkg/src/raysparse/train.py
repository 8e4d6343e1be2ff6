"""Two-phase training, checkpoints, inference and evaluation."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config
from .geometry import CameraView
from .losses import GTTensors, detection_loss, occupancy_loss, segmentation_loss
from .metrics import RELAXED, Thresholds, pose_accuracy
from .model import SceneModel
from .optim import AdamW
from .synthetic import SceneSample, frame_subset, make_sample, scene_seeds
from .targets import occupancy_iou

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RTCK"
_LEN = struct.Struct("<4sQ")


# --- checkpoints -----------------------------------------------------------


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().contiguous().cpu().numpy().tobytes()


def checkpoint_bytes(model: SceneModel, optimizer: AdamW | None, step: int, config: Config) -> bytes:
    """Parameters and buffers, optimizer moments, step and config as one blob.

    Layout: magic, header length (u64), a JSON header listing every tensor's
    name, dtype, shape and byte offset, then the raw little-endian tensors.
    Nothing time- or host-dependent is recorded, so equal states give equal bytes.
    """
    tensors: list[tuple[str, torch.Tensor]] = list(model.state_dict().items())
    moment_steps = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if state:
                    name = names[id(p)]
                    moment_steps[name] = int(state["step"])
                    tensors.append((f"optim.exp_avg.{name}", state["exp_avg"]))
                    tensors.append((f"optim.exp_avg_sq.{name}", state["exp_avg_sq"]))
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        raw = _tensor_bytes(t)
        entries.append({"name": name, "dtype": str(t.dtype).removeprefix("torch."), "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "step": int(step),
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "moment_steps": moment_steps,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _LEN.pack(CHECKPOINT_MAGIC, len(head)) + head + b"".join(chunks)


@dataclass
class Checkpoint:
    step: int
    config: Config
    config_hash: str
    tensors: dict  # name -> tensor
    moment_steps: dict = field(default_factory=dict)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        magic, n = _LEN.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint")
        header = json.loads(blob[_LEN.size : _LEN.size + n])
        base = _LEN.size + n
        tensors = {}
        for e in header["tensors"]:
            dtype = getattr(torch, e["dtype"])
            raw = bytearray(blob[base + e["offset"] : base + e["offset"] + e["nbytes"]])
            flat = torch.frombuffer(raw, dtype=dtype) if raw else torch.zeros(0, dtype=dtype)
            tensors[e["name"]] = flat.reshape(e["shape"]).clone()
        config = Config.from_dict(header["config"])
        if config.hash() != header["config_hash"]:
            raise ValueError("checkpoint config does not match its hash")
        return cls(header["step"], config, header["config_hash"], tensors, header["moment_steps"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def restore(self, model: SceneModel, optimizer: AdamW | None = None) -> None:
        params = {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}
        model.load_state_dict(params)
        if optimizer is None:
            return
        optimizer.state.clear()
        for name, p in model.named_parameters():
            if name in self.moment_steps:
                optimizer.state[p] = {
                    "step": self.moment_steps[name],
                    "exp_avg": self.tensors[f"optim.exp_avg.{name}"].clone(),
                    "exp_avg_sq": self.tensors[f"optim.exp_avg_sq.{name}"].clone(),
                }


def save_checkpoint(path, model, optimizer, step: int, config: Config) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, optimizer, step, config))


def model_from_checkpoint(path) -> tuple[SceneModel, Checkpoint]:
    ckpt = Checkpoint.load(path)
    model = SceneModel(ckpt.config)
    ckpt.restore(model)
    model.eval()
    return model, ckpt


# --- data ----------------------------------------------------------------


def build_model(config: Config) -> SceneModel:
    torch.manual_seed(config.train.seed)
    return SceneModel(config)


def generate_samples(seed: int, n: int, config: Config) -> list[SceneSample]:
    return [make_sample(s, config.scenes) for s in scene_seeds(seed, n)]


def split_seeds(seed: int) -> tuple[int, int]:
    """Independent seeds for the training and held-out scene sets."""
    a, b = np.random.SeedSequence(int(seed)).spawn(2)
    return int(a.generate_state(1)[0]), int(b.generate_state(1)[0])


@dataclass
class Batch:
    images: torch.Tensor
    views: list
    sample: SceneSample
    frames: list


def make_batch(sample: SceneSample, frames: Sequence[int]) -> Batch:
    return Batch(torch.from_numpy(sample.float_images(frames)), [sample.views[i] for i in frames], sample, list(frames))


def step_choice(
    seed: int, step: int, n_scenes: int, n_pool: int, n_frames: int, sampling: str = "even"
) -> tuple[int, list[int]]:
    """Scene and frames for a training step; a pure function of ``(seed, step)``.

    ``"even"`` takes evenly spaced frames at a random offset. ``"random"`` takes
    any distinct frames, so nearby, overlapping views also appear in training.
    """
    rng = np.random.default_rng([int(seed), int(step)])
    scene = int(rng.integers(n_scenes))
    if sampling == "even":
        return scene, frame_subset(n_pool, n_frames, int(rng.integers(n_pool)))
    if sampling == "random":
        return scene, sorted(int(f) for f in rng.choice(n_pool, n_frames, replace=False))
    raise ValueError(f"unknown frame sampling {sampling!r}")


# --- training ----------------------------------------------------------------


class NonFiniteLoss(FloatingPointError):
    pass


def novel_frame(n_pool: int, frames: Sequence[int]) -> int:
    """The pool frame nearest the midpoint of the first two inputs that is not itself an input."""
    first = frames[0]
    second = frames[1] if len(frames) > 1 else first + n_pool
    target = first + ((second - first) % n_pool or n_pool) / 2
    unused = [f for f in range(n_pool) if f not in set(frames)] or list(range(n_pool))

    def distance(f):
        d = abs(f - target) % n_pool
        return min(d, n_pool - d), f

    return min(unused, key=distance)


def nvs_loss(model: SceneModel, voxels, geometry, sample: SceneSample, frame: int) -> torch.Tensor:
    b = model.config.backbone
    image = model.nvs(voxels, sample.views[frame], geometry.grid, (b.feature_height, b.feature_width),
                      t_near=b.t_near, t_far=b.t_far)
    target = torch.from_numpy(sample.float_images([frame])[0])
    return torch.mean((image - target) ** 2)


def compute_losses(model: SceneModel, batch: Batch, phase: int) -> tuple[torch.Tensor, dict]:
    config = model.config
    w = config.losses
    geometry = model.geometry(batch.views)
    out = model(batch.images, geometry, detect=phase == 2)
    target = torch.from_numpy(batch.sample.occupancy(geometry.grid))
    occ = occupancy_loss(out.occupancy, target)
    terms = {"occupancy": float(occ.detach())}
    total = w.occupancy * occ
    if phase == 2:
        masks = torch.from_numpy(batch.sample.amodal[batch.frames])
        seg = segmentation_loss(out.segmentation, masks)
        gt = GTTensors.from_objects(batch.sample.objects, config.heads.shape_size)
        det = detection_loss(out.detections, gt, w, model.detr.decode_shapes)
        total = total + w.segmentation * seg + w.detection * det.total
        terms["segmentation"] = float(seg.detach())
        terms["detection"] = float(det.total.detach())
        terms.update({f"det_{k}": v for k, v in det.terms.items()})
        if model.nvs is not None:
            query = novel_frame(batch.sample.n_frames, batch.frames)
            nvs = nvs_loss(model, out.backbone.voxels, geometry, batch.sample, query)
            total = total + w.nvs * nvs
            terms["nvs"] = float(nvs.detach())
    terms["total"] = float(total.detach())
    return total, terms


class Trainer:
    """Batch of one scene per step, optional gradient accumulation.

    Steps ``[0, phase1_steps)`` train occupancy only; the remaining
    ``phase2_steps`` add segmentation and detection.
    """

    def __init__(self, config: Config, train_samples: Sequence[SceneSample], eval_samples=(), run_dir=None):
        if not train_samples:
            raise ValueError("need at least one training scene")
        self.config = config
        self.train_samples = list(train_samples)
        self.eval_samples = list(eval_samples)
        self.model = build_model(config)
        t = config.train
        self.optimizer = AdamW(self.model.parameters(), lr=t.lr, betas=t.betas, eps=t.eps, weight_decay=t.weight_decay)
        self.step = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.history: list[dict] = []
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def total_steps(self) -> int:
        return self.config.train.phase1_steps + self.config.train.phase2_steps

    def phase(self, step: int) -> int:
        return 1 if step < self.config.train.phase1_steps else 2

    def batch(self, step: int, micro: int = 0) -> Batch:
        t = self.config.train
        sub = step * t.grad_accumulation + micro
        n_pool = self.train_samples[0].n_frames
        idx, frames = step_choice(t.seed, sub, len(self.train_samples), n_pool, t.train_frames, t.frame_sampling)
        return make_batch(self.train_samples[idx], frames)

    def train_step(self) -> dict:
        t = self.config.train
        phase = self.phase(self.step)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        record = {"step": self.step, "phase": phase}
        sums: dict = {}
        for micro in range(t.grad_accumulation):
            batch = self.batch(self.step, micro)
            loss, terms = compute_losses(self.model, batch, phase)
            if not torch.isfinite(loss):
                self._dump_nonfinite(batch, terms)
            (loss / t.grad_accumulation).backward()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v / t.grad_accumulation
            record.setdefault("scenes", []).append(batch.sample.seed)
        if t.grad_clip > 0:
            record["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), t.grad_clip))
        self.optimizer.step()
        record.update(sums)
        self.step += 1
        return record

    def _dump_nonfinite(self, batch: Batch, terms: dict):
        dump = {"step": self.step, "scene_seed": batch.sample.seed, "frames": batch.frames, "terms": terms}
        if self.run_dir is not None:
            (self.run_dir / f"nonfinite_{self.step:06d}.json").write_text(json.dumps(dump, indent=1))
        raise NonFiniteLoss(f"non-finite loss at step {self.step}: {terms}")

    def run(self, n_steps: int | None = None, log_file=None) -> list[dict]:
        """Train up to ``n_steps`` more steps (default: to the end of phase 2)."""
        end = self.total_steps if n_steps is None else min(self.total_steps, self.step + n_steps)
        t = self.config.train
        out = open(log_file, "a") if log_file is not None else None
        started = time.perf_counter()
        try:
            while self.step < end:
                record = self.train_step()
                self.history.append(record)
                if out is not None:
                    out.write(json.dumps(record, sort_keys=True) + "\n")
                if t.log_every and record["step"] % t.log_every == 0:
                    log.info("step %d phase %d loss %.4f (%.1fs)", record["step"], record["phase"],
                             record["total"], time.perf_counter() - started)
                if t.eval_every and self.step % t.eval_every == 0 and self.eval_samples:
                    report = evaluate(self.model, self.eval_samples, t.eval_frames)
                    summary = {"eval_step": self.step, **report.summary()}
                    log.info("eval %s", summary)
                    if out is not None:
                        out.write(json.dumps(summary, sort_keys=True) + "\n")
        finally:
            if out is not None:
                out.close()
        return self.history

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.model, self.optimizer, self.step, self.config)

    def save(self, path) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    def resume(self, path) -> None:
        ckpt = Checkpoint.load(path)
        if ckpt.config_hash != self.config.hash():
            raise ValueError("checkpoint was trained with a different config")
        ckpt.restore(self.model, self.optimizer)
        self.step = ckpt.step


# --- inference and evaluation ------------------------------------------------


@dataclass
class SceneResult:
    seed: int
    n_frames: int
    occupancy_iou: float
    predictions: list
    occupancy_probs: np.ndarray = field(repr=False)


@torch.no_grad()
def infer(model: SceneModel, images: torch.Tensor, views: Sequence[CameraView], with_shapes: bool = True):
    """Objects and occupancy probabilities for any number of views."""
    model.eval()
    geometry = model.geometry(views)
    out = model(images, geometry)
    preds = model.predict_objects(out.detections[-1], with_shapes=with_shapes)
    return preds, torch.sigmoid(out.occupancy).numpy(), geometry


@dataclass
class EvalReport:
    n_frames: int
    scenes: list  # SceneResult
    strict: object  # AccuracyReport
    relaxed: object

    @property
    def mean_occupancy_iou(self) -> float:
        return float(np.mean([s.occupancy_iou for s in self.scenes])) if self.scenes else 0.0

    def summary(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "n_scenes": len(self.scenes),
            "occupancy_iou": self.mean_occupancy_iou,
            "pose_class_avg": self.strict.class_average,
            "pose_global_avg": self.strict.global_average,
            "relaxed_class_avg": self.relaxed.class_average,
            "relaxed_global_avg": self.relaxed.global_average,
        }

    def to_dict(self) -> dict:
        return {
            **self.summary(),
            "strict": self.strict.to_dict(),
            "relaxed": self.relaxed.to_dict(),
            "per_scene": [
                {"seed": s.seed, "occupancy_iou": s.occupancy_iou, "n_predictions": len(s.predictions)}
                for s in self.scenes
            ],
        }


def evaluate(
    model: SceneModel,
    samples: Sequence[SceneSample],
    n_frames: int,
    thresholds: Thresholds = Thresholds(),
    relaxed: Thresholds = RELAXED,
) -> EvalReport:
    results = []
    for sample in samples:
        frames = frame_subset(sample.n_frames, n_frames)
        batch = make_batch(sample, frames)
        preds, probs, geometry = infer(model, batch.images, batch.views, with_shapes=False)
        iou = occupancy_iou(probs > 0.5, sample.occupancy(geometry.grid))
        results.append(SceneResult(sample.seed, n_frames, iou, preds, probs))
    pairs = [(r.predictions, s.objects) for r, s in zip(results, samples)]
    return EvalReport(n_frames, results, pose_accuracy(pairs, thresholds), pose_accuracy(pairs, relaxed))
