"""Full counting network: backbone -> exemplar enhancement -> query
correlation -> localization heads -> proposal decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import (BackboneConfig, PyramidBackbone, ScaleAligner,
                       pool_exemplars)
from .correlate import ChannelGate, SpatialCorrelator, tokenize_query
from .data import AnnotatedImage
from .enhance import (AttentionStackConfig, ExemplarEnhancer, assemble_tokens)
from .heads import (HeadConfig, HeadOutputs, LocalizationHeads, ProposalSet,
                    anchor_grid, decode)
from .size_prompt import SizePromptTable


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    embed_dim: int = 128          # exemplar token dimension d_e
    token_dim: int = 128          # correlation token dimension C_t
    prompt_intervals: int = 20    # T
    prompt_mode: str = "equifrequent"  # or "uniform"
    enhance: AttentionStackConfig = field(
        default_factory=lambda: AttentionStackConfig(layers=1, heads=4,
                                                     hidden=128, dropout=0.1))
    correlate: AttentionStackConfig = field(
        default_factory=lambda: AttentionStackConfig(layers=2, heads=4,
                                                     hidden=128, dropout=0.1))
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in self.backbone.items()})
        if isinstance(self.enhance, dict):
            self.enhance = AttentionStackConfig(**self.enhance)
        if isinstance(self.correlate, dict):
            self.correlate = AttentionStackConfig(**self.correlate)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        # Keep the head and anchor stride tied to the backbone's coarsest map.
        self.head.channels = self.token_dim
        self.head.stride = self.backbone.strides[-1]
        if self.head.alpha is None:
            self.head.alpha = float(self.head.stride)
        if self.head.beta is None:
            self.head.beta = float(self.head.stride)


@dataclass
class ForwardResult:
    heads: HeadOutputs
    proposals: ProposalSet
    grid: tuple[int, int]


class CountingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = PyramidBackbone(config.backbone)
        self.aligner = ScaleAligner(config.backbone)
        self.prompts = SizePromptTable(config.prompt_intervals, config.embed_dim)
        self.enhancer = ExemplarEnhancer(config.embed_dim, config.enhance)
        self.correlator = SpatialCorrelator(
            query_dim=config.backbone.out_dim, exemplar_dim=config.embed_dim,
            token_dim=config.token_dim, config=config.correlate)
        self.gate = ChannelGate(config.embed_dim, config.token_dim)
        self.heads = LocalizationHeads(config.head)
        self._anchor_cache: dict[tuple[int, int], torch.Tensor] = {}

    def fit_prompts(self, samples: list[AnnotatedImage]) -> None:
        """Fit size-prompt intervals on the (preprocessed) training split."""
        widths = [b.width for s in samples for b in s.exemplars]
        heights = [b.height for s in samples for b in s.exemplars]
        t = min(self.prompts.t, len(widths))
        if t != self.prompts.t:
            self.prompts = SizePromptTable(t, self.config.embed_dim)
        self.prompts.fit(widths, heights, mode=self.config.prompt_mode)

    def anchors_for(self, grid: tuple[int, int]) -> torch.Tensor:
        if grid not in self._anchor_cache:
            self._anchor_cache[grid] = anchor_grid(
                grid[0], grid[1], self.config.head.stride)
        return self._anchor_cache[grid]

    def enhanced_exemplars(self, pyramid, sample: AnnotatedImage) -> torch.Tensor:
        pooled = pool_exemplars(pyramid, sample.exemplars)
        aligned = self.aligner(pooled)
        prompt_vecs = [self.prompts.lookup(b.width, b.height)
                       for b in sample.exemplars]
        tokens = assemble_tokens(aligned, prompt_vecs)
        return self.enhancer(tokens)

    def forward(self, sample: AnnotatedImage,
                n_exemplars: int | None = None) -> ForwardResult:
        """Run the full pipeline on one preprocessed sample.

        `n_exemplars` optionally restricts how many exemplar boxes are used
        (the 1-3 exemplar sweep).
        """
        if n_exemplars is not None:
            sample = type(sample)(
                image_id=sample.image_id, image=sample.image,
                points=sample.points,
                exemplars=sample.exemplars[:n_exemplars],
                class_name=sample.class_name, scale=sample.scale)
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        image = torch.from_numpy(np.ascontiguousarray(sample.image)) \
            .permute(2, 0, 1)[None].to(device=device, dtype=dtype)
        pyramid = self.backbone(image)
        exemplar_tokens = self.enhanced_exemplars(pyramid, sample)
        tokens, grid = tokenize_query(pyramid.finest_used)
        correlated = self.correlator(tokens, grid, exemplar_tokens)
        query_tensor = self.gate(correlated, exemplar_tokens)
        head_out = self.heads(query_tensor)
        anchors = self.anchors_for(grid).to(device=device, dtype=dtype)
        proposals = decode(head_out, anchors,
                           self.config.head.alpha, self.config.head.beta)
        return ForwardResult(heads=head_out, proposals=proposals, grid=grid)
