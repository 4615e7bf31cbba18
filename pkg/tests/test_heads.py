import pytest
import torch

from locount.backbone import ConfigurationError
from locount.heads import (HeadConfig, LocalizationHeads, ProposalSet,
                           anchor_grid, decode, infer_objects)


@pytest.fixture
def config():
    return HeadConfig(channels=16, stride=16)


def run(config, h=6, w=8):
    torch.manual_seed(0)
    heads = LocalizationHeads(config).eval()
    out = heads(torch.randn(h, w, config.channels))
    return out


class TestHeads:
    def test_shapes(self, config):
        out = run(config, 24, 32)
        assert out.offsets.shape == (24, 32, 8)
        assert out.scores.shape == (24, 32, 4)
        assert out.sizes.shape == (24, 32, 8)

    def test_score_range(self, config):
        out = run(config)
        assert (out.scores > 0).all() and (out.scores < 1).all()

    def test_sizes_positive(self, config):
        out = run(config)
        assert (out.sizes > 0).all()


class TestAnchorGrid:
    def test_quarter_point_layout(self):
        grid = anchor_grid(1, 1, 16)
        expected = torch.tensor([[4.0, 4.0], [12.0, 4.0],
                                 [4.0, 12.0], [12.0, 12.0]])
        assert torch.allclose(grid, expected)

    def test_count_and_golden_values(self):
        grid = anchor_grid(2, 3, 8)
        assert grid.shape == (24, 2)
        # Second cell of the first row starts at x=8.
        assert torch.allclose(grid[4], torch.tensor([10.0, 2.0]))
        # First cell of the second row starts at y=8.
        assert torch.allclose(grid[12], torch.tensor([2.0, 10.0]))

    def test_depends_only_on_shape(self):
        assert torch.equal(anchor_grid(3, 4, 16), anchor_grid(3, 4, 16))


class TestDecode:
    def outputs(self, h=1, w=1):
        from locount.heads import HeadOutputs
        return HeadOutputs(
            offsets=torch.zeros(h, w, 8),
            scores=torch.full((h, w, 4), 0.5),
            sizes=torch.ones(h, w, 8))

    def test_offset_arithmetic(self):
        out = self.outputs()
        out.offsets[0, 0, :2] = torch.tensor([1.0, -2.0])
        anchors = torch.tensor([[8.0, 8.0]] * 4)
        props = decode(out, anchors, alpha=4.0, beta=1.0)
        assert props.xy[0].tolist() == [12.0, 0.0]

    def test_zero_offset_lands_on_anchor(self):
        anchors = anchor_grid(1, 1, 16)
        props = decode(self.outputs(), anchors, alpha=16.0, beta=16.0)
        assert torch.allclose(props.xy, anchors)

    def test_size_arithmetic(self):
        out = self.outputs()
        out.sizes[0, 0, :2] = torch.tensor([2.0, 3.0])
        props = decode(out, anchor_grid(1, 1, 16), alpha=1.0, beta=8.0)
        assert props.sizes[0].tolist() == [16.0, 24.0]

    def test_decode_is_affine_in_offsets(self):
        out = self.outputs(2, 2)
        torch.manual_seed(0)
        out.offsets = torch.randn(2, 2, 8)
        anchors = anchor_grid(2, 2, 16)
        p1 = decode(out, anchors, alpha=16.0, beta=1.0)
        out2 = type(out)(offsets=out.offsets * 2, scores=out.scores,
                         sizes=out.sizes)
        p2 = decode(out2, anchors, alpha=16.0, beta=1.0)
        assert torch.allclose(p2.xy - anchors, 2 * (p1.xy - anchors), atol=1e-6)

    def test_proposal_count(self):
        out = self.outputs(6, 8)
        props = decode(out, anchor_grid(6, 8, 16), alpha=16.0, beta=16.0)
        assert len(props) == 4 * 6 * 8

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            decode(self.outputs(2, 2), anchor_grid(1, 1, 16), 16.0, 16.0)


class TestInferObjects:
    def props(self, scores):
        n = len(scores)
        return ProposalSet(xy=torch.zeros(n, 2),
                           scores=torch.tensor(scores),
                           sizes=torch.ones(n, 2),
                           provenance=torch.zeros(n, 3, dtype=torch.long))

    def test_threshold_filter(self):
        kept = infer_objects(self.props([0.9, 0.4, 0.51]), 0.5)
        assert len(kept) == 2

    def test_empty_result(self):
        kept = infer_objects(self.props([0.1, 0.2]), 0.5)
        assert len(kept) == 0

    def test_zero_threshold_keeps_all(self):
        kept = infer_objects(self.props([0.9, 0.4, 0.51]), 0.0)
        assert len(kept) == 3
