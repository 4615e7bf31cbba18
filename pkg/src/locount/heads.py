"""Prediction heads, anchor grid, and point-proposal decoding.

Three identical convolutional branches read the correlated query tensor and
emit offsets, confidence scores, and sizes per anchor. Each s×s input patch
carries a fixed 2×2 sub-grid of anchor points; one proposal decodes from
each anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConfigurationError

# Anchor order within a patch: (dx, dy) fractions of the stride.
ANCHOR_OFFSETS = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


@dataclass
class HeadConfig:
    channels: int = 128
    n_anchor: int = 4
    stride: int = 16
    # Offset and size scales; both default to the stride so raw head
    # outputs stay in patch units.
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self):
        if self.n_anchor != len(ANCHOR_OFFSETS):
            raise ConfigurationError("only the 2x2 anchor layout is supported")
        if self.alpha is None:
            self.alpha = float(self.stride)
        if self.beta is None:
            self.beta = float(self.stride)


@dataclass
class HeadOutputs:
    offsets: torch.Tensor  # H×W×(2·N_anchor), raw
    scores: torch.Tensor   # H×W×N_anchor, post-sigmoid in (0,1)
    sizes: torch.Tensor    # H×W×(2·N_anchor), post-softplus > 0


@dataclass
class ProposalSet:
    """Flat proposal arrays; index order is row-major cells, anchor-minor."""

    xy: torch.Tensor       # (N, 2)
    scores: torch.Tensor   # (N,)
    sizes: torch.Tensor    # (N, 2) width/height
    provenance: torch.Tensor  # (N, 3) int: row, col, anchor

    def __len__(self) -> int:
        return self.xy.shape[0]


def anchor_grid(h: int, w: int, stride: int) -> torch.Tensor:
    """(H·W·N_anchor, 2) anchor coordinates in input-image pixels.

    Depends only on the grid shape and stride; anchors sit at the
    quarter-points of each patch.
    """
    ys = torch.arange(h, dtype=torch.float64) * stride
    xs = torch.arange(w, dtype=torch.float64) * stride
    cells_y = ys[:, None].expand(h, w).reshape(-1)
    cells_x = xs[None, :].expand(h, w).reshape(-1)
    anchors = []
    for cy, cx in zip(cells_y, cells_x):
        for fx, fy in ANCHOR_OFFSETS:
            anchors.append((cx + fx * stride, cy + fy * stride))
    return torch.tensor(anchors, dtype=torch.float32)


def _branch(channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(channels, channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(channels, out_channels, 3, padding=1),
    )


class LocalizationHeads(nn.Module):
    """Offset, classification, and size branches over the query tensor."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        n = config.n_anchor
        self.offset_branch = _branch(config.channels, 2 * n)
        self.score_branch = _branch(config.channels, n)
        self.size_branch = _branch(config.channels, 2 * n)
        # Bias scores toward ~0.1 at init so early negatives aren't saturated.
        nn.init.constant_(self.score_branch[-1].bias, -2.0)

    def forward(self, query_tensor: torch.Tensor) -> HeadOutputs:
        """query_tensor: H×W×C map from the correlation stage."""
        x = query_tensor.permute(2, 0, 1)[None]  # 1×C×H×W
        offsets = self.offset_branch(x)[0].permute(1, 2, 0)
        scores = torch.sigmoid(self.score_branch(x)[0].permute(1, 2, 0))
        sizes = F.softplus(self.size_branch(x)[0].permute(1, 2, 0))
        return HeadOutputs(offsets=offsets, scores=scores, sizes=sizes)


def decode(heads: HeadOutputs, anchors: torch.Tensor,
           alpha: float, beta: float) -> ProposalSet:
    """Decode head maps into point proposals.

    Point = anchor + alpha * offset; size = beta * raw size. No clipping to
    image bounds; the matching stage handles out-of-image proposals.
    """
    h, w, n2 = heads.offsets.shape
    n_anchor = n2 // 2
    if anchors.shape[0] != h * w * n_anchor:
        raise ConfigurationError("anchor grid does not match head shape")
    offsets = heads.offsets.reshape(h * w * n_anchor, 2)
    sizes = heads.sizes.reshape(h * w * n_anchor, 2)
    scores = heads.scores.reshape(h * w * n_anchor)
    xy = anchors.to(offsets.dtype) + alpha * offsets
    rows = torch.arange(h).repeat_interleave(w * n_anchor)
    cols = torch.arange(w).repeat_interleave(n_anchor).repeat(h)
    idx = torch.arange(n_anchor).repeat(h * w)
    provenance = torch.stack([rows, cols, idx], dim=1)
    return ProposalSet(xy=xy, scores=scores, sizes=beta * sizes,
                       provenance=provenance)


def infer_objects(proposals: ProposalSet, threshold: float = 0.5) -> ProposalSet:
    """Keep proposals scoring above the threshold; no NMS (one-to-one
    training keeps proposals non-duplicative)."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError("threshold must be in [0, 1]")
    keep = proposals.scores > threshold
    return ProposalSet(
        xy=proposals.xy[keep],
        scores=proposals.scores[keep],
        sizes=proposals.sizes[keep],
        provenance=proposals.provenance[keep],
    )
