import numpy.testing as npt
import pytest
import torch

from conftest import dyadic, randn
from mmchange.core import init_parameters
from mmchange.tde import TdeBlock
from mmchange.training import gradcheck


def make_block(channels=4, seed=0):
    block = TdeBlock(channels)
    init_parameters(block, seed)
    return block.eval()


class TestShapes:
    def test_doubles_spatial_dims(self):
        block = make_block()
        with torch.no_grad():
            out = block(randn((4, 5, 6), 1), randn((4, 5, 6), 2))
        assert out.shape == (4, 10, 12)

    def test_explicit_target_grid(self):
        block = make_block()
        with torch.no_grad():
            out = block(randn((4, 3, 3), 3), randn((4, 3, 3), 4), out_hw=(5, 5))
        assert out.shape == (4, 5, 5)

    def test_batched_inputs(self):
        block = make_block()
        with torch.no_grad():
            out = block(randn((2, 4, 3, 3), 5), randn((2, 4, 3, 3), 6))
        assert out.shape == (2, 4, 6, 6)

    def test_rejects_shape_mismatch(self):
        block = make_block()
        with pytest.raises(ValueError, match="differ"):
            block(randn((4, 3, 3), 7), randn((4, 4, 3), 8))

    def test_rejects_wrong_channels(self):
        block = make_block(channels=4)
        with pytest.raises(ValueError, match="channels"):
            block(randn((8, 3, 3), 9), randn((8, 3, 3), 10))


class TestAlgebra:
    def test_zero_difference_gives_zero_output(self):
        block = make_block()
        t = randn((4, 4, 4), 11)
        with torch.no_grad():
            out = block(t, t.clone())
        npt.assert_array_equal(out.numpy(), 0.0)

    def test_equal_pairs_agree_regardless_of_value(self):
        block = make_block()
        a, b = randn((4, 4, 4), 12), randn((4, 4, 4), 13)
        with torch.no_grad():
            npt.assert_array_equal(block(a, a).numpy(), block(b, b).numpy())

    def test_offset_invariance_is_bit_exact(self):
        block = make_block()
        for seed in range(10):
            a = dyadic((4, 4, 4), "tde-a", seed)
            b = dyadic((4, 4, 4), "tde-b", seed)
            c = dyadic((4, 4, 4), "tde-c", seed)
            with torch.no_grad():
                base = block(a, b)
                shifted = block(a + c, b + c)
            npt.assert_array_equal(base.numpy(), shifted.numpy())

    def test_output_is_non_negative(self):
        block = make_block()
        for seed in range(5):
            with torch.no_grad():
                out = block(randn((4, 4, 4), 100 + seed), randn((4, 4, 4), 200 + seed))
            assert out.min().item() >= 0.0

    def test_branches_are_independently_parameterized(self):
        block = make_block()
        w1 = block.branch1_conv.conv.weight.detach()
        w2 = block.branch2_conv.conv.weight.detach()
        assert not torch.equal(w1, w2)


class TestGradients:
    def test_gradcheck_small_dims(self):
        report = gradcheck("tde", dims=(4, 4, 4))
        assert report.max_rel_err < 1e-4, report
