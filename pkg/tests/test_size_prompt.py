import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from locount.size_prompt import (FitError, SizePromptTable, bin_index,
                                 fit_intervals, fit_uniform_intervals)


class TestFitIntervals:
    def test_primes_example(self):
        assert fit_intervals([2, 3, 5, 7, 11, 13, 17, 19], 4) == [3, 7, 13]

    def test_single_bin(self):
        assert fit_intervals([1.0, 2.0, 3.0], 1) == []

    def test_too_many_bins(self):
        with pytest.raises(FitError):
            fit_intervals([1.0, 2.0], 3)

    def test_equal_population(self):
        rng = np.random.default_rng(0)
        sizes = rng.permutation(rng.uniform(1, 100, size=1000)).tolist()
        bounds = fit_intervals(sizes, 20)
        counts = np.bincount([bin_index(s, bounds) for s in sizes],
                             minlength=21)[1:]
        assert all(c == 50 for c in counts[:-1])
        assert counts[-1] == 50  # 1000 divides evenly

    def test_remainder_in_last_bin(self):
        sizes = list(np.linspace(1, 10, 23))
        bounds = fit_intervals(sizes, 4)  # n = 5, remainder 3
        counts = np.bincount([bin_index(s, bounds) for s in sizes],
                             minlength=5)[1:]
        assert counts.tolist() == [5, 5, 5, 8]


class TestBinIndex:
    def test_mid_value(self):
        assert bin_index(5, [3, 7, 13]) == 2

    def test_above_all_bounds(self):
        assert bin_index(20, [3, 7, 13]) == 4

    def test_value_on_bound_stays_low(self):
        assert bin_index(7, [3, 7, 13]) == 2

    @given(st.floats(0.1, 1000), st.floats(0.1, 1000))
    def test_monotone(self, a, b):
        bounds = [3.0, 7.0, 13.0, 40.0]
        lo, hi = sorted((a, b))
        assert bin_index(lo, bounds) <= bin_index(hi, bounds)


class TestUniformIntervals:
    def test_equal_width(self):
        bounds = fit_uniform_intervals([0.0, 10.0], 4)
        assert bounds == pytest.approx([2.5, 5.0, 7.5])


class TestSizePromptTable:
    def test_prompt_is_concatenation(self):
        table = SizePromptTable(4, 16)
        table.fit([2, 3, 5, 7, 11, 13, 17, 19], [2, 3, 5, 7, 11, 13, 17, 19])
        p = table.lookup(5.0, 20.0)
        assert p.shape == (16,)
        assert torch.equal(p[:8], table.width_embeddings.weight[1])   # bin 2
        assert torch.equal(p[8:], table.height_embeddings.weight[3])  # bin 4

    def test_sparse_gradients(self):
        table = SizePromptTable(4, 8)
        table.fit(list(range(1, 9)), list(range(1, 9)))
        # Bounds are [2, 4, 6]: width 3 -> bin 2, height 5 -> bin 3.
        table.lookup(3.0, 5.0).sum().backward()
        wgrad = table.width_embeddings.weight.grad
        hgrad = table.height_embeddings.weight.grad
        # Only the selected row of each embedding receives gradient.
        assert (wgrad.abs().sum(dim=1) > 0).tolist() == [False, True, False, False]
        assert (hgrad.abs().sum(dim=1) > 0).tolist() == [False, False, True, False]

    def test_bounds_round_trip(self):
        table = SizePromptTable(4, 8)
        table.fit([2, 3, 5, 7, 11, 13, 17, 19], [1, 2, 3, 4, 5, 6, 7, 8])
        other = SizePromptTable(4, 8)
        other.load_bounds(table.width_bounds.tolist(),
                          table.height_bounds.tolist())
        assert torch.equal(other.width_bounds, table.width_bounds)

    def test_unfitted_lookup_raises(self):
        with pytest.raises(FitError):
            SizePromptTable(4, 8).lookup(1.0, 1.0)

    def test_odd_dim_rejected(self):
        with pytest.raises(FitError):
            SizePromptTable(4, 7)
