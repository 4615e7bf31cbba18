"""Query-image correlation against the enhanced exemplar set.

Image tokens (feature vectors at each spatial position of the coarsest map,
plus sinusoidal position embeddings) cross-attend to the exemplar tokens,
then a squeeze-excite-style gate derived from the exemplars recalibrates the
output channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import ConfigurationError
from .enhance import AttentionStackConfig, FeedForward, MultiHeadAttention


def sinusoidal_position_embedding(h: int, w: int, dim: int,
                                  device=None, dtype=None) -> torch.Tensor:
    """2-D sinusoidal embeddings, (h*w, dim), row-major flattening.

    Half the channels encode y, half encode x, each with interleaved
    sin/cos at geometrically spaced frequencies.
    """
    if dim % 4:
        raise ConfigurationError("position embedding dim must be divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, device=device, dtype=dtype) / quarter)
    ys = torch.arange(h, device=device, dtype=freqs.dtype)
    xs = torch.arange(w, device=device, dtype=freqs.dtype)
    y_ang = ys[:, None] * freqs[None, :]  # (h, quarter)
    x_ang = xs[:, None] * freqs[None, :]  # (w, quarter)
    y_emb = torch.cat([torch.sin(y_ang), torch.cos(y_ang)], dim=-1)  # (h, dim/2)
    x_emb = torch.cat([torch.sin(x_ang), torch.cos(x_ang)], dim=-1)  # (w, dim/2)
    grid = torch.cat([
        y_emb[:, None, :].expand(h, w, dim // 2),
        x_emb[None, :, :].expand(h, w, dim // 2),
    ], dim=-1)
    return grid.reshape(h * w, dim)


def tokenize_query(fmap: torch.Tensor,
                   use_position: bool = True) -> tuple[torch.Tensor, tuple[int, int]]:
    """Flatten a 1×C×H×W map into (H·W, C) tokens with position embeddings.

    Returns the token matrix and the (H, W) grid shape for folding back.
    """
    fm = fmap[0] if fmap.dim() == 4 else fmap
    c, h, w = fm.shape
    tokens = fm.permute(1, 2, 0).reshape(h * w, c)
    if use_position:
        tokens = tokens + sinusoidal_position_embedding(
            h, w, c, device=tokens.device, dtype=tokens.dtype)
    return tokens, (h, w)


def fold_tokens(tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of tokenize_query's flattening: (H·W, C) -> H×W×C."""
    h, w = grid
    return tokens.reshape(h, w, tokens.shape[-1])


class CrossAttentionLayer(nn.Module):
    """Pre-norm cross-attention (image queries, exemplar keys/values) plus
    a feed-forward block; only the query stream is updated."""

    def __init__(self, dim: int, kv_dim: int, config: AttentionStackConfig):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.attn = MultiHeadAttention(dim, config.heads, kv_dim=kv_dim,
                                       dropout=config.dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, config.hidden, config.dropout)

    def forward(self, queries: torch.Tensor, exemplars: torch.Tensor) -> torch.Tensor:
        kv = self.norm_kv(exemplars)
        queries = queries + self.attn(self.norm_q(queries), kv, kv)
        queries = queries + self.ff(self.norm2(queries))
        return queries


class SpatialCorrelator(nn.Module):
    """L_q cross-attention layers correlating image tokens with the whole
    exemplar set at once; output folds back to an H×W×C_t map."""

    def __init__(self, query_dim: int, exemplar_dim: int, token_dim: int,
                 config: AttentionStackConfig):
        super().__init__()
        self.in_proj = (nn.Linear(query_dim, token_dim)
                        if query_dim != token_dim else nn.Identity())
        self.layers = nn.ModuleList(
            CrossAttentionLayer(token_dim, exemplar_dim, config)
            for _ in range(config.layers))

    def forward(self, tokens: torch.Tensor, grid: tuple[int, int],
                exemplars: torch.Tensor) -> torch.Tensor:
        x = self.in_proj(tokens)
        for layer in self.layers:
            x = layer(x, exemplars)
        return fold_tokens(x, grid)


class ChannelGate(nn.Module):
    """Exemplar-derived channel recalibration.

    Exemplar tokens are mean-pooled, passed through a reduce/expand
    bottleneck, and softmax-normalized, so the gate is nonnegative and sums
    to 1 over channels.
    """

    def __init__(self, exemplar_dim: int, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.pool_proj = (nn.Linear(exemplar_dim, channels)
                          if exemplar_dim != channels else nn.Identity())
        self.net = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )

    def gate(self, exemplars: torch.Tensor) -> torch.Tensor:
        pooled = self.pool_proj(exemplars.mean(dim=0))
        return torch.softmax(self.net(pooled), dim=-1)

    def forward(self, correlated: torch.Tensor,
                exemplars: torch.Tensor) -> torch.Tensor:
        """correlated: H×W×C map; returns the channel-reweighted map."""
        return correlated * self.gate(exemplars)
