"""Exemplar token assembly and collaborative self-attention enhancement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import AlignedExemplarFeatures, ConfigurationError


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention, softmax(QK^T/sqrt(d))V.

    Softmax is stabilized by per-row max subtraction. Works on (..., n, d)
    batches; the scale is the key dimension.
    """
    d = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    logits = logits - logits.max(dim=-1, keepdim=True).values
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate key/value input dimension.

    Queries have dimension `dim`; keys and values have `kv_dim` (defaults to
    `dim`). Per-head splits realize the single-matrix Q/K/V description.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None,
                 dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, key: torch.Tensor,
                value: torch.Tensor) -> torch.Tensor:
        nq = query.shape[0]
        nk = key.shape[0]
        q = self.q_proj(query).view(nq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).view(nk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).view(nk, self.heads, self.head_dim).transpose(0, 1)
        out = attention(q, k, v)
        out = out.transpose(0, 1).reshape(nq, self.heads * self.head_dim)
        return self.dropout(self.out_proj(out))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class AttentionStackConfig:
    layers: int = 1
    heads: int = 4
    hidden: int = 128
    dropout: float = 0.1


class SelfAttentionLayer(nn.Module):
    """Pre-norm MHSA + pre-norm feed-forward, each residual."""

    def __init__(self, dim: int, config: AttentionStackConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, config.heads, dropout=config.dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, config.hidden, config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        x = x + self.ff(self.norm2(x))
        return x


class ExemplarEnhancer(nn.Module):
    """Self-attention stack over exemplar tokens (no positional encoding,
    so the stack is permutation-equivariant by construction)."""

    def __init__(self, dim: int, config: AttentionStackConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            SelfAttentionLayer(dim, config) for _ in range(config.layers))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens


def assemble_tokens(aligned: AlignedExemplarFeatures,
                    prompts: list[torch.Tensor]) -> torch.Tensor:
    """Add each exemplar's size prompt to all L of its aligned feature rows.

    prompts[i] is the d_e prompt for exemplar i; row (i, j) of the output is
    aligned feature + prompt.
    """
    rows = []
    for row, (ex_idx, _scale) in zip(aligned.rows, aligned.provenance):
        prompt = prompts[ex_idx]
        if prompt.shape != row.shape:
            raise ConfigurationError(
                f"prompt dim {tuple(prompt.shape)} != feature dim {tuple(row.shape)}")
        rows.append(row + prompt)
    return torch.stack(rows)
