"""The full network: backbone plus occupancy, segmentation and detection heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneOutput, SceneGeometry
from .config import Config
from .geometry import CameraView, VoxelGridSpec
from .heads import DetectionOutput, DetrHead, NovelViewHead, OccupancyHead, SegmentationHead
from .objects import ObjectPrediction


@dataclass
class ModelOutput:
    occupancy: torch.Tensor  # (nx, ny, nz) logits
    segmentation: torch.Tensor  # (n_views, H, W) logits
    detections: list  # DetectionOutput per decoder layer
    backbone: BackboneOutput

    @property
    def geometry(self) -> SceneGeometry:
        return self.backbone.geometry


class SceneModel(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        b, h = config.backbone, config.heads
        self.backbone = Backbone(b)
        self.occupancy = OccupancyHead(b.d_model, h.occupancy_prior)
        self.segmentation = SegmentationHead(b.d_model, h.seg_widths, h.occupancy_prior)
        self.detr = DetrHead(h, b.d_model)
        self.nvs = NovelViewHead(b.d_model, b.n_heads, b.ffn_width, h.seg_widths) if h.nvs else None

    def geometry(self, views: Sequence[CameraView], grid: VoxelGridSpec | None = None) -> SceneGeometry:
        return self.backbone.geometry(views, grid)

    def forward(self, images: torch.Tensor, geometry: SceneGeometry, detect: bool = True) -> ModelOutput:
        """``images`` is ``(n_views, H, W, 3)`` in [0, 1]."""
        out = self.backbone(images, geometry)
        layout = geometry.layout
        occupancy = self.occupancy(out.voxels, layout)
        segmentation = self.segmentation(out.pixels, layout)
        detections = self.detr(out.voxels, geometry.grid) if detect else []
        return ModelOutput(occupancy, segmentation, detections, out)

    @torch.no_grad()
    def predict_objects(self, layer: DetectionOutput, with_shapes: bool = True) -> list[ObjectPrediction]:
        """Slots whose most likely category is not padding, as posed objects."""
        probs = layer.logits.softmax(-1)
        best = probs.argmax(-1)
        keep = torch.nonzero(best != self.detr.padding_index).flatten()
        shapes = None
        if with_shapes and len(keep):
            shapes = torch.sigmoid(self.detr.decode_shapes(layer.features[keep])).double().numpy()
        preds = []
        for i, q in enumerate(keep.tolist()):
            c = int(best[q])
            preds.append(
                ObjectPrediction(
                    category=c,
                    score=float(probs[q, c]),
                    center=layer.center[q].double().numpy(),
                    scale=np.exp(layer.log_scale[q].double().numpy()),
                    yaw=float(layer.yaw[q]),
                    shape_probs=None if shapes is None else shapes[i],
                )
            )
        return preds
