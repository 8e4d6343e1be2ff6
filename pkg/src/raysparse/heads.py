"""Prediction heads on top of the backbone streams.

* :class:`DetrHead` -- learned object queries decoding class, pose and shape
* :class:`OccupancyHead` -- coarse scene occupancy from the voxel stream
* :class:`SegmentationHead` -- full-resolution amodal foreground masks
* :class:`NovelViewHead` -- renders an unseen view from the voxel stream
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import ChannelNorm, FeedForward, FeatureLayout, sine_cosine, sine_cosine_2d
from .config import HeadConfig
from .geometry import CameraView, VoxelGridSpec, build_interaction_index
from .sparse_attention import VOXELS_TO_PIXELS, SparseMask, SparseMultiheadAttention


def logit(p: float) -> float:
    return math.log(p / (1 - p))


def voxel_positions(dims) -> torch.Tensor:
    """Normalized voxel centers in [0, 1]^3, flat x-fastest order."""
    nx, ny, nz = dims
    z, y, x = torch.meshgrid(
        torch.arange(nz, dtype=torch.float32),
        torch.arange(ny, dtype=torch.float32),
        torch.arange(nx, dtype=torch.float32),
        indexing="ij",
    )
    n = torch.tensor([nx, ny, nz], dtype=torch.float32)
    return (torch.stack([x.reshape(-1), y.reshape(-1), z.reshape(-1)], dim=1) + 0.5) / n


@dataclass
class DetectionOutput:
    """Predictions of one decoder layer for every query slot."""

    logits: torch.Tensor  # (Q, K + 1), last column is the padding category
    center: torch.Tensor  # (Q, 3) world meters
    log_scale: torch.Tensor  # (Q, 3)
    yaw: torch.Tensor  # (Q,)
    features: torch.Tensor  # (Q, d) decoder state, decoded to shapes on demand

    @property
    def n_queries(self) -> int:
        return self.logits.shape[0]


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn), nn.GELU(), nn.Linear(ffn, d_model))
        self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(3))

    def forward(self, x, query_pos, memory, memory_pos):
        q = (x + query_pos)[None]
        x = self.norms[0](x + self.self_attn(q, q, x[None], need_weights=False)[0][0])
        out = self.cross_attn((x + query_pos)[None], (memory + memory_pos)[None], memory[None], need_weights=False)
        x = self.norms[1](x + out[0][0])
        return self.norms[2](x + self.ffn(x))


def _mlp(d_in: int, d_out: int, hidden: int) -> nn.Sequential:
    mlp = nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))
    nn.init.zeros_(mlp[-1].weight)
    nn.init.zeros_(mlp[-1].bias)
    return mlp


class ShapeDecoder(nn.Module):
    """Query embedding -> ``S^3`` shape logits via stride-2 transposed 3D convs (3 -> 7 -> 15 -> ...)."""

    def __init__(self, d_model: int, size: int, channels: int):
        super().__init__()
        n_up = round(math.log2((size + 1) / 4))
        if n_up < 1 or 4 * 2**n_up - 1 != size:
            raise ValueError(f"shape size must be 2^k - 1 with k >= 3, got {size}")
        self.channels = channels
        self.seed = nn.Linear(d_model, channels * 27)
        layers = []
        for i in range(n_up):
            last = i == n_up - 1
            c_out = 1 if last else channels
            layers.append(nn.ConvTranspose3d(channels, c_out, 3, stride=2))
            if not last:
                layers += [ChannelNorm(channels), nn.GELU()]
        self.body = nn.Sequential(*layers)
        self.size = size

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """``(n, d)`` -> ``(n, S, S, S)`` logits indexed along canonical x, y, z."""
        x = self.seed(features).view(-1, self.channels, 3, 3, 3)
        # conv layout is (z, y, x); expose (x, y, z)
        return self.body(x)[:, 0].permute(0, 3, 2, 1)


class DetrHead(nn.Module):
    """Object queries cross-attending to all voxels of the final volume.

    Centers are predicted as offsets from a learned per-query reference point
    in grid-normalized coordinates, so they stay inside the volume.
    """

    def __init__(self, config: HeadConfig, d_model: int):
        super().__init__()
        self.config = config
        q = config.n_queries
        self.query = nn.Parameter(torch.randn(q, d_model) * 0.02)
        self.reference = nn.Parameter(torch.logit(torch.rand(q, 3) * 0.8 + 0.1))
        self.query_pos = nn.Sequential(nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, d_model))
        self.memory_pos = nn.Linear(d_model, d_model)
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, config.decoder_heads, config.decoder_ffn) for _ in range(config.n_decoder_layers)
        )
        self.norm = nn.LayerNorm(d_model)
        self.classify = nn.Linear(d_model, config.n_categories + 1)
        nn.init.zeros_(self.classify.weight)
        with torch.no_grad():
            self.classify.bias.zero_()
            # softmax puts padding_prior on the padding category
            self.classify.bias[-1] = math.log(config.padding_prior * config.n_categories / (1 - config.padding_prior))
        self.center = _mlp(d_model, 3, d_model)
        self.log_scale = _mlp(d_model, 3, d_model)
        self.yaw = _mlp(d_model, 1, d_model)
        self.shape = ShapeDecoder(d_model, config.shape_size, config.shape_channels)

    @property
    def padding_index(self) -> int:
        return self.config.n_categories

    def forward(self, voxels: torch.Tensor, grid: VoxelGridSpec, voxel_pos: torch.Tensor | None = None):
        """Per-layer predictions, first layer first.

        ``voxel_pos`` holds normalized voxel centers aligned with ``voxels``;
        by default the flat x-fastest order of ``grid``.
        """
        if not torch.isfinite(voxels).all():
            raise ValueError("non-finite voxel features")
        if voxel_pos is None:
            voxel_pos = voxel_positions(grid.dims)
        if voxel_pos.shape[0] != voxels.shape[0]:
            raise ValueError("voxel positions do not match the voxel features")
        d = voxels.shape[1]
        dtype = voxels.dtype
        memory_pos = self.memory_pos(sine_cosine(voxel_pos.to(dtype), d))
        ref = torch.sigmoid(self.reference).to(dtype)
        query_pos = self.query_pos(sine_cosine(ref, d))
        origin = torch.tensor(grid.origin, dtype=dtype)
        extent = torch.tensor(grid.extent, dtype=dtype)
        x = self.query.to(dtype)
        outputs = []
        for layer in self.layers:
            x = layer(x, query_pos, voxels, memory_pos)
            h = self.norm(x)
            center = origin + torch.sigmoid(self.reference + self.center(h)) * extent
            outputs.append(DetectionOutput(self.classify(h), center, self.log_scale(h), self.yaw(h)[:, 0], h))
        return outputs

    def decode_shapes(self, features: torch.Tensor) -> torch.Tensor:
        return self.shape(features)


class OccupancyHead(nn.Module):
    """A single kernel-1 3D convolution to one logit per voxel."""

    def __init__(self, d_model: int, prior: float = 0.1):
        super().__init__()
        self.conv = nn.Conv3d(d_model, 1, 1)
        nn.init.constant_(self.conv.bias, logit(prior))

    def forward(self, voxels: torch.Tensor, layout: FeatureLayout) -> torch.Tensor:
        """Flat voxels -> ``(nx, ny, nz)`` logits."""
        return self.conv(layout.voxels_to_volume(voxels))[0, 0].permute(2, 1, 0)


class Upsampler(nn.Module):
    """Four stride-2 transposed convs (16x) ending in ``out_channels``."""

    def __init__(self, d_model: int, widths, out_channels: int):
        super().__init__()
        layers, c_in = [], d_model
        for width in widths:
            layers += [nn.ConvTranspose2d(c_in, width, 2, stride=2), ChannelNorm(width), nn.GELU()]
            c_in = width
        layers.append(nn.Conv2d(c_in, out_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    @property
    def output(self) -> nn.Conv2d:
        return self.body[-1]

    def forward(self, x):
        return self.body(x)


class SegmentationHead(nn.Module):
    def __init__(self, d_model: int, widths=(32, 16, 16, 8), prior: float = 0.1):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("need four upsampling stages for 16x")
        self.up = Upsampler(d_model, widths, 1)
        nn.init.constant_(self.up.output.bias, logit(prior))

    def forward(self, pixels: torch.Tensor, layout: FeatureLayout) -> torch.Tensor:
        """Flat pixels -> ``(n_views, 16 H_f, 16 W_f)`` logits."""
        return self.up(layout.pixels_to_images(pixels))[:, 0]


class NovelViewHead(nn.Module):
    """Renders a query view: one voxel->pixel attention, a 2D FFN and a 16x upsampler.

    The pixel stream starts from the attention output alone, so pixels whose
    rays miss the volume feed zeros into the decoder.
    """

    def __init__(self, d_model: int, n_heads: int, ffn_width: int, widths=(32, 16, 16, 8)):
        super().__init__()
        self.ray_embed = nn.Linear(6, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.attend = SparseMultiheadAttention(d_model, n_heads, zero_init_output=False)
        self.ffn = FeedForward(d_model, ffn_width, 2, zero_init_output=True)
        self.up = Upsampler(d_model, widths, 3)

    def features(self, voxels, view: CameraView, grid: VoxelGridSpec, feature_hw, t_near=0.05, t_far=12.0):
        """Query-view pixel features ``(1, d, H_f, W_f)`` before upsampling."""
        fh, fw = feature_hw
        view = view.with_feature_grid(fw, fh)
        index = build_interaction_index([view], grid, t_near, t_far)
        mask = SparseMask.from_index(index, VOXELS_TO_PIXELS)
        if mask.nnz == 0:
            warnings.warn("query view sees no voxel of the volume", RuntimeWarning, stacklevel=2)
        _, dirs = view.feature_rays()
        offset = (view.center - grid.center) / grid.extent
        rays = torch.cat(
            [torch.as_tensor(dirs), torch.as_tensor(offset).expand(len(dirs), 3)], dim=1
        ).to(voxels.dtype)
        query = self.ray_embed(rays) + sine_cosine_2d(fh, fw, voxels.shape[1]).to(voxels.dtype)
        pixels = self.attend(self.norm(query), self.norm(voxels), mask)
        covered = (mask.row_counts > 0).to(voxels.dtype).view(1, 1, fh, fw)
        images = pixels.T.reshape(1, -1, fh, fw)
        return images + self.ffn(images) * covered

    def forward(self, voxels, view, grid, feature_hw, **kw) -> torch.Tensor:
        """``(H, W, 3)`` image in [0, 1]."""
        return torch.sigmoid(self.up(self.features(voxels, view, grid, feature_hw, **kw)))[0].permute(1, 2, 0)
