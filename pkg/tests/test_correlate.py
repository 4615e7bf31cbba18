import numpy as np
import pytest
import torch

from locount.correlate import (ChannelGate, SpatialCorrelator, fold_tokens,
                               sinusoidal_position_embedding, tokenize_query)
from locount.enhance import AttentionStackConfig


CFG = AttentionStackConfig(layers=2, heads=4, hidden=32, dropout=0.0)


class TestTokenize:
    def test_token_count(self):
        tokens, grid = tokenize_query(torch.rand(1, 16, 24, 32))
        assert tokens.shape == (768, 16)
        assert grid == (24, 32)

    def test_zero_map_gives_pure_position(self):
        tokens, _ = tokenize_query(torch.zeros(1, 16, 4, 6))
        pos = sinusoidal_position_embedding(4, 6, 16)
        assert torch.allclose(tokens, pos)

    def test_fold_unfold_round_trip(self):
        fmap = torch.rand(1, 16, 5, 7)
        tokens, grid = tokenize_query(fmap, use_position=False)
        folded = fold_tokens(tokens, grid)
        assert torch.allclose(folded, fmap[0].permute(1, 2, 0))


class TestSpatialCorrelator:
    def net(self, qdim=16, edim=16, tdim=16):
        torch.manual_seed(0)
        return SpatialCorrelator(qdim, edim, tdim, CFG).eval()

    def test_output_shape(self):
        net = self.net()
        tokens, grid = tokenize_query(torch.rand(1, 16, 6, 8))
        out = net(tokens, grid, torch.rand(9, 16))
        assert out.shape == (6, 8, 16)

    def test_exemplar_permutation_invariance(self):
        net = self.net()
        tokens, grid = tokenize_query(torch.rand(1, 16, 4, 4))
        ex = torch.rand(8, 16)
        with torch.no_grad():
            a = net(tokens, grid, ex)
            b = net(tokens, grid, ex[torch.randperm(8)])
        assert torch.allclose(a, b, atol=1e-5)

    def test_single_exemplar_token(self):
        # Softmax over one key is 1 regardless of the query content; two
        # different query maps attend identically to the lone exemplar.
        net = self.net()
        ex = torch.rand(1, 16)
        t1, grid = tokenize_query(torch.rand(1, 16, 3, 3))
        with torch.no_grad():
            out = net(t1, grid, ex)
        assert out.shape == (3, 3, 16)
        assert torch.isfinite(out).all()

    def test_content_translation_equivariance_without_positions(self):
        net = self.net()
        fmap = torch.rand(1, 16, 4, 6)
        rolled = torch.roll(fmap, shifts=1, dims=3)
        ex = torch.rand(5, 16)
        t1, grid = tokenize_query(fmap, use_position=False)
        t2, _ = tokenize_query(rolled, use_position=False)
        with torch.no_grad():
            a = net(t1, grid, ex)
            b = net(t2, grid, ex)
        assert torch.allclose(torch.roll(a, shifts=1, dims=1), b, atol=1e-5)

    def test_gradient_check(self):
        torch.manual_seed(1)
        net = SpatialCorrelator(8, 8, 8,
                                AttentionStackConfig(layers=1, heads=2,
                                                     hidden=16, dropout=0.0))
        net = net.double().eval()
        gate = ChannelGate(8, 8).double().eval()
        ex = torch.rand(3, 8, dtype=torch.float64)
        tokens = torch.rand(6, 8, dtype=torch.float64, requires_grad=True)

        def f(t):
            return gate(net(t, (2, 3), ex), ex).sum()

        (grad,) = torch.autograd.grad(f(tokens), tokens)
        eps = 1e-6
        fd = torch.zeros_like(tokens)
        with torch.no_grad():
            for i in range(tokens.shape[0]):
                for j in range(tokens.shape[1]):
                    tp = tokens.detach().clone(); tp[i, j] += eps
                    tm = tokens.detach().clone(); tm[i, j] -= eps
                    fd[i, j] = (f(tp) - f(tm)) / (2 * eps)
        assert (grad - fd).norm() / fd.norm() < 1e-4


class TestChannelGate:
    def test_gate_normalized(self):
        gate = ChannelGate(16, 16).eval()
        for seed in range(100):
            torch.manual_seed(seed)
            g = gate.gate(torch.randn(torch.randint(1, 12, (1,)).item(), 16))
            assert (g >= 0).all()
            assert g.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_uniform_gate_divides_by_channels(self):
        gate = ChannelGate(16, 16).eval()
        # Zero the bottleneck so logits are constant -> uniform softmax.
        for p in gate.net.parameters():
            torch.nn.init.zeros_(p)
        x = torch.rand(4, 5, 16)
        out = gate(x, torch.rand(3, 16))
        assert torch.allclose(out, x / 16, atol=1e-6)

    def test_one_hot_gate_selects_channel(self):
        gate = ChannelGate(16, 16).eval()
        x = torch.rand(2, 2, 16)
        one_hot = torch.zeros(16)
        one_hot[3] = 1.0
        out = x * one_hot
        assert (out[..., :3] == 0).all() and (out[..., 4:] == 0).all()
        assert torch.equal(out[..., 3], x[..., 3])

    def test_exemplar_permutation_invariance(self):
        gate = ChannelGate(16, 16).eval()
        ex = torch.rand(7, 16)
        a = gate.gate(ex)
        b = gate.gate(ex[torch.randperm(7)])
        assert torch.allclose(a, b, atol=1e-6)
