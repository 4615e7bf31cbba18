import pytest
import torch

from locount.backbone import AlignedExemplarFeatures, ConfigurationError
from locount.enhance import (AttentionStackConfig, ExemplarEnhancer,
                             assemble_tokens, attention)


class TestAttention:
    def test_single_key(self):
        q = torch.rand(5, 8)
        k = torch.rand(1, 8)
        v = torch.rand(1, 8)
        out = attention(q, k, v)
        assert torch.allclose(out, v.expand(5, 8))

    def test_identical_keys_give_mean_of_values(self):
        q = torch.rand(3, 8)
        k = torch.rand(1, 8).expand(6, 8)
        v = torch.rand(6, 8)
        out = attention(q, k, v)
        assert torch.allclose(out, v.mean(dim=0).expand(3, 8), atol=1e-6)

    def test_uniform_logit_shift_invariance(self):
        # Adding the same vector to every key shifts each query row's
        # logits by a constant, so the softmax weights cannot change.
        q = torch.rand(4, 8, dtype=torch.float64)
        k = torch.rand(6, 8, dtype=torch.float64)
        v = torch.rand(6, 8, dtype=torch.float64)
        shift = torch.rand(8, dtype=torch.float64) * 5
        base = attention(q, k, v)
        shifted = attention(q, k + shift, v)
        assert torch.allclose(shifted, base, atol=1e-9)

    def test_rows_sum_to_one(self):
        q = torch.randn(7, 8) * 50  # large logits exercise stabilization
        k = torch.randn(9, 8) * 50
        d = q.shape[-1]
        logits = q @ k.T / d ** 0.5
        weights = torch.softmax(logits - logits.max(-1, keepdim=True).values, -1)
        assert torch.allclose(weights.sum(-1), torch.ones(7), atol=1e-6)


class TestAssembleTokens:
    def aligned(self, n_b=3, levels=4, dim=16):
        rows = torch.rand(n_b * levels, dim)
        prov = [(i, j) for i in range(n_b) for j in range(levels)]
        return AlignedExemplarFeatures(rows=rows, provenance=prov)

    def test_zero_prompts_identity(self):
        a = self.aligned()
        tokens = assemble_tokens(a, [torch.zeros(16)] * 3)
        assert torch.equal(tokens, a.rows)

    def test_count(self):
        tokens = assemble_tokens(self.aligned(3, 4), [torch.rand(16)] * 3)
        assert tokens.shape == (12, 16)

    def test_single_exemplar_sum(self):
        a = self.aligned(1, 1)
        p = torch.rand(16)
        tokens = assemble_tokens(a, [p])
        assert torch.allclose(tokens[0], a.rows[0] + p)

    def test_same_prompt_for_all_scales_of_one_exemplar(self):
        a = self.aligned(2, 3)
        prompts = [torch.rand(16), torch.rand(16)]
        tokens = assemble_tokens(a, prompts)
        for r, (i, _) in enumerate(a.provenance):
            assert torch.allclose(tokens[r], a.rows[r] + prompts[i])

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            assemble_tokens(self.aligned(1, 1, 16), [torch.rand(8)])


class TestEnhancer:
    def test_empty_stack_is_identity(self):
        net = ExemplarEnhancer(16, AttentionStackConfig(layers=0))
        x = torch.rand(5, 16)
        assert torch.equal(net(x), x)

    @pytest.mark.parametrize("n_b", [1, 2, 3])
    def test_output_shape(self, n_b):
        net = ExemplarEnhancer(16, AttentionStackConfig(layers=1, heads=4,
                                                        hidden=32)).eval()
        out = net(torch.rand(n_b * 4, 16))
        assert out.shape == (n_b * 4, 16)

    def test_permutation_equivariance(self):
        net = ExemplarEnhancer(16, AttentionStackConfig(layers=2, heads=4,
                                                        hidden=32)).eval()
        x = torch.rand(10, 16)
        perm = torch.randperm(10)
        with torch.no_grad():
            assert torch.allclose(net(x)[perm], net(x[perm]), atol=1e-5)

    def test_gradient_check_one_layer(self):
        torch.manual_seed(0)
        net = ExemplarEnhancer(8, AttentionStackConfig(layers=1, heads=2,
                                                       hidden=16, dropout=0.0))
        net = net.double().eval()
        x = torch.rand(4, 8, dtype=torch.float64, requires_grad=True)
        loss = net(x).sum()
        (grad,) = torch.autograd.grad(loss, x)
        # Central finite differences.
        fd = torch.zeros_like(x)
        eps = 1e-6
        with torch.no_grad():
            for i in range(x.shape[0]):
                for j in range(x.shape[1]):
                    xp = x.detach().clone(); xp[i, j] += eps
                    xm = x.detach().clone(); xm[i, j] -= eps
                    fd[i, j] = (net(xp).sum() - net(xm).sum()) / (2 * eps)
        rel = (grad - fd).norm() / fd.norm()
        assert rel < 1e-4
