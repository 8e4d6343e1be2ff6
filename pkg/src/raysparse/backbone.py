"""Image encoder, unprojection initialization and the stack of 2D/3D blocks.

Feature layouts used throughout:

* pixels: ``(n_views * H_f * W_f, d)``, view-major then row-major
* voxels: ``(nx * ny * nz, d)``, flat x-fastest (see :mod:`raysparse.geometry`)

Convolutions see the voxels as a ``(1, d, nz, ny, nx)`` volume and the
pixels as ``(n_views, d, H_f, W_f)`` images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig
from .geometry import (
    CameraView,
    InteractionIndex,
    VoxelGridSpec,
    build_interaction_index,
    center_volume,
    unproject_init,
)
from .sparse_attention import PIXELS_TO_VOXELS, VOXELS_TO_PIXELS, SparseMask, SparseMultiheadAttention


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an ``(N, C, ...)`` tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


def sine_cosine_2d(height: int, width: int, dim: int) -> torch.Tensor:
    rows, cols = torch.meshgrid(
        torch.arange(height, dtype=torch.float32), torch.arange(width, dtype=torch.float32), indexing="ij"
    )
    coords = torch.stack([rows.reshape(-1) / max(height, 1), cols.reshape(-1) / max(width, 1)], dim=1)
    return sine_cosine(coords, dim)


def sine_cosine(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Fourier features of ``(n, k)`` coordinates in roughly [0, 1]; zero-padded to ``dim``."""
    n, k = coords.shape
    n_freq = dim // (2 * k)
    freqs = math.pi * 2.0 ** torch.arange(n_freq, dtype=coords.dtype)
    angles = coords.unsqueeze(-1) * freqs
    feats = torch.cat([angles.sin(), angles.cos()], dim=-1).reshape(n, -1)
    return F.pad(feats, (0, dim - feats.shape[1]))


class ImageEncoder(nn.Module):
    """Four stride-2 conv stages (16x reduction) and a 1x1 projection to ``d_model``."""

    def __init__(self, widths: Sequence[int], d_model: int, zero_init_output: bool = False):
        super().__init__()
        layers, c_in = [], 3
        for width in widths:
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), ChannelNorm(width), nn.GELU()]
            c_in = width
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c_in, d_model, 1)
        if zero_init_output:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(N, H, W, 3)`` images in [0, 1] -> ``(N, H/16, W/16, d_model)``."""
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError("images must be (N, H, W, 3)")
        if images.shape[1] % 16 or images.shape[2] % 16:
            raise ValueError("image height and width must be divisible by 16")
        x = images.permute(0, 3, 1, 2) - 0.5
        return self.proj(self.body(x)).permute(0, 2, 3, 1)


class FeedForward(nn.Module):
    """Two kernel-3 convolutions with a channel LayerNorm and GELU in between."""

    def __init__(self, d_model: int, width: int, spatial_dims: int, zero_init_output: bool = True):
        super().__init__()
        conv = nn.Conv3d if spatial_dims == 3 else nn.Conv2d
        self.norm_in = ChannelNorm(d_model)
        self.conv1 = conv(d_model, width, 3, padding=1)
        self.norm = ChannelNorm(width)
        self.conv2 = conv(width, d_model, 3, padding=1)
        if zero_init_output:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(F.gelu(self.norm(self.conv1(self.norm_in(x)))))


@dataclass(frozen=True)
class FeatureLayout:
    n_views: int
    feature_height: int
    feature_width: int
    dims: tuple

    @property
    def n_pixels(self) -> int:
        return self.n_views * self.feature_height * self.feature_width

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxels_to_volume(self, v: torch.Tensor) -> torch.Tensor:
        nx, ny, nz = self.dims
        return v.T.reshape(1, -1, nz, ny, nx)

    def voxels_from_volume(self, vol: torch.Tensor) -> torch.Tensor:
        return vol.reshape(vol.shape[1], -1).T

    def pixels_to_images(self, p: torch.Tensor) -> torch.Tensor:
        return p.view(self.n_views, self.feature_height, self.feature_width, -1).permute(0, 3, 1, 2)

    def pixels_from_images(self, img: torch.Tensor) -> torch.Tensor:
        return img.permute(0, 2, 3, 1).reshape(self.n_pixels, -1)

    def voxel_grid(self, v: torch.Tensor) -> torch.Tensor:
        """Flat voxels -> ``(nx, ny, nz, d)``."""
        return self.voxels_to_volume(v)[0].permute(3, 2, 1, 0)


@dataclass(eq=False)
class SceneGeometry:
    """Everything about a set of views that does not depend on learned weights."""

    views: list
    grid: VoxelGridSpec
    index: InteractionIndex
    mask_2d3d: SparseMask
    mask_3d2d: SparseMask
    layout: FeatureLayout
    ray_features: torch.Tensor  # (n_pixels, 6): world direction, camera offset / extent

    @classmethod
    def build(
        cls,
        views: Sequence[CameraView],
        config: BackboneConfig,
        grid: VoxelGridSpec | None = None,
    ) -> "SceneGeometry":
        views = [v.with_feature_grid(config.feature_width, config.feature_height) for v in views]
        if grid is None:
            grid = center_volume(views, config.grid_extent, config.grid_dims)
        index = build_interaction_index(views, grid, config.t_near, config.t_far)
        layout = FeatureLayout(len(views), config.feature_height, config.feature_width, grid.dims)
        rays = []
        for view in views:
            _, dirs = view.feature_rays()
            offset = (view.center - grid.center) / grid.extent
            rays.append(np.column_stack([dirs, np.broadcast_to(offset, dirs.shape)]))
        return cls(
            views=views,
            grid=grid,
            index=index,
            mask_2d3d=SparseMask.from_index(index, PIXELS_TO_VOXELS),
            mask_3d2d=SparseMask.from_index(index, VOXELS_TO_PIXELS),
            layout=layout,
            ray_features=torch.from_numpy(np.concatenate(rays)).float(),
        )


class RayBlock(nn.Module):
    """One 2D/3D block: parallel pixel->voxel and voxel->pixel attention, then conv FFNs.

    Both attention layers read the block inputs, so the two streams update
    independently within a block.
    """

    def __init__(self, d_model: int, n_heads: int, ffn_width: int, zero_init: bool = True):
        super().__init__()
        self.norm_pixels = nn.LayerNorm(d_model)
        self.norm_voxels = nn.LayerNorm(d_model)
        self.to_voxels = SparseMultiheadAttention(d_model, n_heads, zero_init_output=zero_init)
        self.to_pixels = SparseMultiheadAttention(d_model, n_heads, zero_init_output=zero_init)
        self.ffn_3d = FeedForward(d_model, ffn_width, 3, zero_init_output=zero_init)
        self.ffn_2d = FeedForward(d_model, ffn_width, 2, zero_init_output=zero_init)

    def forward(self, pixels, voxels, geometry: SceneGeometry):
        layout = geometry.layout
        if pixels.shape[0] != layout.n_pixels or voxels.shape[0] != layout.n_voxels:
            raise ValueError("features do not match the scene geometry")
        p_in, v_in = self.norm_pixels(pixels), self.norm_voxels(voxels)
        voxels = voxels + self.to_voxels(v_in, p_in, geometry.mask_2d3d)
        pixels = pixels + self.to_pixels(p_in, v_in, geometry.mask_3d2d)
        voxels = voxels + layout.voxels_from_volume(self.ffn_3d(layout.voxels_to_volume(voxels)))
        pixels = pixels + layout.pixels_from_images(self.ffn_2d(layout.pixels_to_images(pixels)))
        return pixels, voxels


@dataclass
class BackboneOutput:
    pixels: torch.Tensor
    voxels: torch.Tensor
    initial_pixels: torch.Tensor
    initial_voxels: torch.Tensor
    geometry: SceneGeometry


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        nx, ny, nz = config.grid_dims
        self.encoder = ImageEncoder(config.encoder_widths, d)
        self.blocks = nn.ModuleList(
            RayBlock(d, config.n_heads, config.ffn_width) for _ in range(config.n_blocks)
        )
        if config.positional_encoding:
            self.voxel_embed = nn.Parameter(torch.randn(nx * ny * nz, d) * 0.02)
            self.ray_embed = nn.Linear(6, d)
            self.register_buffer(
                "pixel_sincos", sine_cosine_2d(config.feature_height, config.feature_width, d), persistent=False
            )

    def geometry(self, views: Sequence[CameraView], grid: VoxelGridSpec | None = None) -> SceneGeometry:
        return SceneGeometry.build(views, self.config, grid)

    def initial_features(self, images: torch.Tensor, geometry: SceneGeometry):
        feats = self.encoder(images)
        layout = geometry.layout
        if feats.shape[1:3] != (layout.feature_height, layout.feature_width):
            raise ValueError("encoder output does not match the configured feature grid")
        pixels = feats.reshape(layout.n_pixels, -1)
        if self.config.positional_encoding:
            pixels = pixels + self.pixel_sincos.to(pixels.dtype).repeat(layout.n_views, 1)
            pixels = pixels + self.ray_embed(geometry.ray_features.to(pixels.dtype))
        voxels = unproject_init(pixels, geometry.index)
        if self.config.positional_encoding:
            voxels = voxels + self.voxel_embed
        return pixels, voxels

    def forward(self, images: torch.Tensor, geometry: SceneGeometry) -> BackboneOutput:
        p0, v0 = self.initial_features(images, geometry)
        pixels, voxels = p0, v0
        for block in self.blocks:
            pixels, voxels = block(pixels, voxels, geometry)
        return BackboneOutput(pixels, voxels, p0, v0, geometry)


def backbone_forward(
    model: Backbone, images: torch.Tensor, views: Sequence[CameraView], grid: VoxelGridSpec | None = None
) -> BackboneOutput:
    """Encode, center the volume on the cameras, trace the index, unproject, run the blocks."""
    return model(images, model.geometry(views, grid))
