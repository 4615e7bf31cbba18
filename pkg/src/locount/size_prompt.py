"""Equal-population size intervals and learnable size-prompt embeddings.

Width and height get independent interval tables. An exemplar's prompt is
the concatenation of the embedding of its width bin and its height bin.
"""

from __future__ import annotations

import bisect

import torch
import torch.nn as nn


class FitError(ValueError):
    pass


def fit_intervals(sizes: list[float], t: int) -> list[float]:
    """Cut points dividing `sizes` into `t` equal-population bins.

    With sorted sizes w_1..w_N (1-indexed) and n = floor(N/t), bound k is
    w_{k·n}. Bin k covers (bound_{k-1}, bound_k] with bound_0 = 0 and
    bound_t = +inf, so each non-final bin holds exactly n of the training
    values and the final bin absorbs the remainder.
    """
    if not sizes:
        raise FitError("no sizes to fit")
    if t < 1:
        raise FitError("interval count must be >= 1")
    if t > len(sizes):
        raise FitError(f"interval count {t} exceeds sample count {len(sizes)}")
    ordered = sorted(sizes)
    n = len(ordered) // t
    return [float(ordered[k * n - 1]) for k in range(1, t)]


def fit_uniform_intervals(sizes: list[float], t: int) -> list[float]:
    """Equal-width bins over [min, max]; the ablation alternative."""
    if not sizes:
        raise FitError("no sizes to fit")
    if t < 1:
        raise FitError("interval count must be >= 1")
    lo, hi = min(sizes), max(sizes)
    return [lo + (hi - lo) * k / t for k in range(1, t)]


def bin_index(value: float, bounds: list[float]) -> int:
    """1-based bin of `value`: 1 + number of bounds strictly below it.

    A value equal to a cut point stays in the lower bin; values above the
    last bound fall in the final, unbounded bin.
    """
    return 1 + bisect.bisect_left(bounds, value)


class SizePromptTable(nn.Module):
    """2T learnable embeddings indexed by width/height bin.

    Bounds are fit once on the training split (post-rescale sizes) and
    frozen; they serialize with the checkpoint so evaluation bins
    identically.
    """

    def __init__(self, t: int, embed_dim: int):
        super().__init__()
        if embed_dim % 2:
            raise FitError("embedding dimension must be even")
        self.t = t
        self.embed_dim = embed_dim
        self.width_embeddings = nn.Embedding(t, embed_dim // 2)
        self.height_embeddings = nn.Embedding(t, embed_dim // 2)
        nn.init.normal_(self.width_embeddings.weight, std=0.02)
        nn.init.normal_(self.height_embeddings.weight, std=0.02)
        self.register_buffer("width_bounds", torch.zeros(max(t - 1, 0)))
        self.register_buffer("height_bounds", torch.zeros(max(t - 1, 0)))
        self._fitted = t == 1

    def fit(self, widths: list[float], heights: list[float],
            mode: str = "equifrequent") -> None:
        if mode == "equifrequent":
            wb = fit_intervals(widths, self.t)
            hb = fit_intervals(heights, self.t)
        elif mode == "uniform":
            wb = fit_uniform_intervals(widths, self.t)
            hb = fit_uniform_intervals(heights, self.t)
        else:
            raise FitError(f"unknown interval mode {mode!r}")
        self.width_bounds.copy_(torch.tensor(wb, dtype=self.width_bounds.dtype))
        self.height_bounds.copy_(torch.tensor(hb, dtype=self.height_bounds.dtype))
        self._fitted = True

    def load_bounds(self, width_bounds: list[float], height_bounds: list[float]) -> None:
        self.width_bounds.copy_(torch.tensor(width_bounds, dtype=self.width_bounds.dtype))
        self.height_bounds.copy_(torch.tensor(height_bounds, dtype=self.height_bounds.dtype))
        self._fitted = True

    def lookup(self, width: float, height: float) -> torch.Tensor:
        """Size prompt [E^w_a, E^h_b] for an exemplar of the given size."""
        if not self._fitted:
            raise FitError("interval bounds not fitted")
        a = bin_index(width, self.width_bounds.tolist())
        b = bin_index(height, self.height_bounds.tolist())
        dev = self.width_embeddings.weight.device
        ew = self.width_embeddings(torch.tensor(a - 1, device=dev))
        eh = self.height_embeddings(torch.tensor(b - 1, device=dev))
        return torch.cat([ew, eh])
