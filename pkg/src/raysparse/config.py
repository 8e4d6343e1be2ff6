"""Configuration dataclasses and the named ``toy`` / ``paper`` presets."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class BackboneConfig:
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    grid_dims: tuple = (16, 16, 8)
    grid_extent: tuple = (4.8, 4.8, 2.8)
    feature_width: int = 8
    feature_height: int = 6
    encoder_widths: tuple = (16, 32, 48, 64)
    ffn_width: int = 64
    positional_encoding: bool = True
    t_near: float = 0.05
    t_far: float = 12.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder needs four stride-2 stages for a 16x reduction")


@dataclass
class HeadConfig:
    n_categories: int = 5
    n_queries: int = 16
    n_decoder_layers: int = 3
    decoder_heads: int = 4
    decoder_ffn: int = 128
    shape_size: int = 15
    shape_channels: int = 16
    seg_widths: tuple = (32, 16, 16, 8)
    occupancy_prior: float = 0.1
    padding_prior: float = 0.9
    nvs: bool = False


@dataclass
class LossWeights:
    occupancy: float = 10.0
    segmentation: float = 0.5
    detection: float = 1.0
    nvs: float = 1.0
    cls: float = 1.0
    center: float = 5.0
    scale: float = 1.0
    rotation: float = 1.0
    shape: float = 1.0
    padding: float = 0.1
    center_beta: float = 1.0
    yaw_beta: float = 0.39269908169872414  # pi / 8


@dataclass
class SceneConfig:
    n_objects: tuple = (0, 4)
    categories: tuple = ("cabinet", "bin", "chair", "table", "sofa")
    room_extent: tuple = (4.4, 4.4, 2.6)
    placement_radius: tuple = (0.9, 2.0)
    image_width: int = 128
    image_height: int = 96
    focal: float = 64.0
    shape_size: int = 15
    n_frames: int = 24
    camera_radius: float = 0.15
    camera_height: float = 1.4
    camera_pitch_deg: float = 30.0
    jitter_deg: float = 4.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    phase1_steps: int = 4000
    phase2_steps: int = 12000
    grad_accumulation: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    train_frames: int = 4
    frame_sampling: str = "random"
    eval_frames: int = 12
    n_train_scenes: int = 200
    n_eval_scenes: int = 20
    eval_every: int = 0
    log_every: int = 50


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    scenes: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, section_cls in (
            ("backbone", BackboneConfig),
            ("heads", HeadConfig),
            ("losses", LossWeights),
            ("scenes", SceneConfig),
            ("train", TrainConfig),
        ):
            values = dict(data.get(name, {}))
            defaults = section_cls()
            for key, value in values.items():
                if isinstance(getattr(defaults, key, None), tuple):
                    values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            kwargs[name] = section_cls(**values)
        assert set(kwargs) == set(sections)
        return cls(**kwargs)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "Config":
        """Copy with selected fields overridden, e.g. ``replace(train={"seed": 3})``."""
        data = self.to_dict()
        for section, values in sections.items():
            data[section].update(values)
        return Config.from_dict(data)


def toy_config() -> Config:
    return Config()


def paper_config() -> Config:
    """Published network and optimization settings.

    Used for index/memory benchmarks and documentation; training at this
    scale is not practical on a CPU.
    """
    return Config(
        backbone=BackboneConfig(
            n_blocks=4,
            d_model=256,
            n_heads=8,
            grid_dims=(48, 48, 16),
            grid_extent=(9.0, 9.0, 3.5),
            feature_width=40,
            feature_height=30,
            encoder_widths=(64, 128, 256, 256),
            ffn_width=256,
        ),
        heads=HeadConfig(n_categories=9, n_queries=64, shape_size=63, shape_channels=32, decoder_ffn=1024),
        scenes=SceneConfig(
            room_extent=(8.0, 8.0, 3.0), image_width=640, image_height=480, focal=480.0, n_frames=96,
            placement_radius=(1.0, 3.8),
        ),
        train=TrainConfig(phase1_steps=200_000, phase2_steps=200_000, train_frames=20, eval_frames=96),
    )


PRESETS = {"toy": toy_config, "paper": paper_config}


def load_config(path: str | None = None, preset: str = "toy") -> Config:
    """Preset defaults, optionally overlaid with a JSON file of partial sections."""
    config = copy.deepcopy(PRESETS[preset]())
    if path is None:
        return config
    with open(path) as fh:
        overrides = json.load(fh)
    if "preset" in overrides:
        config = PRESETS[overrides.pop("preset")]()
    return config.replace(**overrides)
