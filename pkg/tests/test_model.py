import numpy as np
import pytest
import torch

from locount.data import SyntheticConfig, generate_synthetic, preprocess
from locount.model import CountingModel, ModelConfig


@pytest.fixture(scope="module")
def sample_384x512():
    cfg = SyntheticConfig(image_size=(384, 512), target_count_range=(6, 10),
                          blob_size_range=(12, 28), rng_seed=2)
    sample = generate_synthetic(cfg, 1).samples[0]
    return preprocess(sample, 384, stride=16)


@pytest.fixture(scope="module")
def model(sample_384x512):
    torch.manual_seed(0)
    m = CountingModel(ModelConfig(prompt_intervals=3))
    m.fit_prompts([sample_384x512])
    return m.eval()


class TestPipeline:
    @pytest.mark.parametrize("n_b", [1, 2, 3])
    def test_proposal_count_and_ranges(self, model, sample_384x512, n_b):
        with torch.no_grad():
            result = model(sample_384x512, n_exemplars=n_b)
        h, w = result.grid
        assert (h, w) == (24, 32)
        assert len(result.proposals) == 4 * h * w
        assert (result.proposals.scores > 0).all()
        assert (result.proposals.scores < 1).all()
        assert (result.proposals.sizes > 0).all()

    def test_eval_deterministic(self, model, sample_384x512):
        with torch.no_grad():
            a = model(sample_384x512)
            b = model(sample_384x512)
        assert torch.equal(a.proposals.scores, b.proposals.scores)
        assert torch.equal(a.proposals.xy, b.proposals.xy)

    def test_overpopulation(self, model, sample_384x512):
        with torch.no_grad():
            result = model(sample_384x512)
        assert len(result.proposals) >= 4 * len(sample_384x512.points)

    def test_exemplar_order_invariance(self, model, sample_384x512):
        import dataclasses
        with torch.no_grad():
            a = model(sample_384x512)
            flipped = dataclasses.replace(
                sample_384x512, exemplars=sample_384x512.exemplars[::-1])
            b = model(flipped)
        assert torch.allclose(a.proposals.scores, b.proposals.scores, atol=1e-5)
