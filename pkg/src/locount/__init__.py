"""Few-shot class-agnostic counting by localization.

Given an image and one to three exemplar boxes of an arbitrary class, the
model locates every instance of that class, predicts its approximate size,
and counts. Training uses a Hungarian-matched localization loss with
exemplar-size regularization.
"""

from .data import (AnnotatedImage, DatasetSplit, ExemplarBox, SyntheticConfig,
                   generate_synthetic, load_annotations, preprocess)
from .harness import ExperimentConfig, evaluate, load_checkpoint, train
from .model import CountingModel, ModelConfig

__all__ = [
    "AnnotatedImage", "DatasetSplit", "ExemplarBox", "SyntheticConfig",
    "generate_synthetic", "load_annotations", "preprocess",
    "ExperimentConfig", "evaluate", "load_checkpoint", "train",
    "CountingModel", "ModelConfig",
]
