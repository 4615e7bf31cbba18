"""Convolutional feature pyramid, exemplar ROI pooling, and scale alignment.

The desk backbone is a small 4-stage convolutional pyramid; the interface
(`extract_pyramid` returning a list of maps plus strides) is what downstream
modules depend on, so a pretrained backbone can be swapped in behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .data import ExemplarBox


class ConfigurationError(ValueError):
    pass


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128, 128)
    strides: tuple[int, ...] = (4, 8, 16, 16)
    frozen: bool = False

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ConfigurationError("channels and strides must have equal length")
        if any(b < a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigurationError("strides must be nondecreasing")

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    @property
    def out_dim(self) -> int:
        return self.channels[-1]


@dataclass
class FeaturePyramid:
    """L feature maps (each 1×C×H_j×W_j) with their input strides."""

    levels: list[torch.Tensor]
    strides: list[int]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ConfigurationError("levels/strides length mismatch")

    @property
    def finest_used(self) -> torch.Tensor:
        return self.levels[-1]


@dataclass
class AlignedExemplarFeatures:
    """N_e = N_B·L rows of dimension C_L, exemplar-major / scale-minor."""

    rows: torch.Tensor  # (N_e, C_L)
    provenance: list[tuple[int, int]]  # (exemplar index, scale index) per row

    def __post_init__(self):
        if self.rows.shape[0] != len(self.provenance):
            raise ConfigurationError("provenance length mismatch")


class PyramidBackbone(nn.Module):
    """Small strided-conv pyramid producing one map per configured stage."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = 3
        prev_stride = 1
        for ch, stride in zip(config.channels, config.strides):
            step = stride // prev_stride
            if step * prev_stride != stride:
                raise ConfigurationError(
                    f"stride {stride} is not a multiple of previous stride {prev_stride}")
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, kernel_size=3, stride=step, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
            ))
            in_ch = ch
            prev_stride = stride
        self.stages = nn.ModuleList(stages)
        if config.frozen:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """image: 1×3×H×W, H and W divisible by the coarsest stride."""
        h, w = image.shape[-2:]
        coarsest = self.config.strides[-1]
        if h % coarsest or w % coarsest:
            raise ConfigurationError(
                f"input {h}×{w} not divisible by coarsest stride {coarsest}")
        levels = []
        x = image
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels=levels, strides=list(self.config.strides))


def extract_pyramid(image: torch.Tensor, backbone: PyramidBackbone) -> FeaturePyramid:
    return backbone(image)


def roi_pool(level: torch.Tensor, box: ExemplarBox, stride: int) -> torch.Tensor:
    """Mean-pool a box region of one feature map into a C_j vector.

    The box is projected onto the feature grid (divide by stride, round
    outward), clamped to the grid, with a 1×1-cell floor for sub-cell boxes.
    """
    fmap = level[0] if level.dim() == 4 else level  # C×H×W
    _, fh, fw = fmap.shape
    x0 = min(max(int(math.floor(box.x1 / stride)), 0), fw - 1)
    y0 = min(max(int(math.floor(box.y1 / stride)), 0), fh - 1)
    x1 = min(max(int(math.ceil(box.x2 / stride)), x0 + 1), fw)
    y1 = min(max(int(math.ceil(box.y2 / stride)), y0 + 1), fh)
    x0 = min(x0, x1 - 1)
    y0 = min(y0, y1 - 1)
    return fmap[:, y0:y1, x0:x1].mean(dim=(1, 2))


class ScaleAligner(nn.Module):
    """Per-scale affine maps bringing pooled exemplar vectors to C_L dims.

    Scales whose channel count already equals C_L pass through unchanged.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.out_dim = config.out_dim
        self.projections = nn.ModuleDict()
        for j, ch in enumerate(config.channels):
            if ch != self.out_dim:
                self.projections[str(j)] = nn.Linear(ch, self.out_dim)
        self.num_levels = config.num_levels

    def forward(self, pooled: list[list[torch.Tensor]]) -> AlignedExemplarFeatures:
        """pooled[i][j] = C_j vector for exemplar i at scale j."""
        rows = []
        provenance = []
        for i, per_scale in enumerate(pooled):
            if len(per_scale) != self.num_levels:
                raise ConfigurationError(
                    f"exemplar {i}: expected {self.num_levels} scales, got {len(per_scale)}")
            for j, vec in enumerate(per_scale):
                key = str(j)
                if key in self.projections:
                    vec = self.projections[key](vec)
                elif vec.shape[-1] != self.out_dim:
                    raise ConfigurationError(
                        f"scale {j}: channel dim {vec.shape[-1]} != {self.out_dim} "
                        "and no projection configured")
                rows.append(vec)
                provenance.append((i, j))
        return AlignedExemplarFeatures(rows=torch.stack(rows), provenance=provenance)


def pool_exemplars(pyramid: FeaturePyramid,
                   exemplars: list[ExemplarBox]) -> list[list[torch.Tensor]]:
    """ROI-pool every exemplar at every pyramid level."""
    return [[roi_pool(level, box, stride)
             for level, stride in zip(pyramid.levels, pyramid.strides)]
            for box in exemplars]
