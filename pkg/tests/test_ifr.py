import numpy.testing as npt
import pytest
import torch

from conftest import dyadic, randn
from mmchange.core import init_parameters
from mmchange.ifr import IfrBlock
from mmchange.training import gradcheck


def make_block(channels=4, seed=0):
    block = IfrBlock(channels)
    init_parameters(block, seed)
    return block.eval()


class TestShapes:
    def test_preserves_shape(self):
        block = make_block(8)
        with torch.no_grad():
            out = block(randn((8, 5, 6), 1), randn((8, 5, 6), 2))
        assert out.shape == (8, 5, 6)

    def test_batched(self):
        block = make_block(4)
        with torch.no_grad():
            out = block(randn((3, 4, 4, 4), 3), randn((3, 4, 4, 4), 4))
        assert out.shape == (3, 4, 4, 4)

    def test_rejects_channels_not_divisible_by_four(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            IfrBlock(6)

    def test_rejects_shape_mismatch(self):
        block = make_block(4)
        with pytest.raises(ValueError, match="differ"):
            block(randn((4, 4, 4), 5), randn((4, 4, 5), 6))


class TestAlgebra:
    def test_offset_invariance_is_bit_exact(self):
        block = make_block()
        for seed in range(10):
            a = dyadic((4, 4, 4), "ifr-a", seed)
            b = dyadic((4, 4, 4), "ifr-b", seed)
            c = dyadic((4, 4, 4), "ifr-c", seed)
            with torch.no_grad():
                npt.assert_array_equal(block(a, b).numpy(), block(a + c, b + c).numpy())

    def test_equal_pairs_reduce_to_the_same_output(self):
        block = make_block()
        a, b = randn((4, 4, 4), 7), randn((4, 4, 4), 8)
        with torch.no_grad():
            npt.assert_array_equal(block(a, a).numpy(), block(b, b).numpy())

    def test_gate_strictly_attenuates(self):
        block = make_block()
        for seed in range(5):
            f1 = randn((4, 4, 4), 300 + seed)
            f2 = randn((4, 4, 4), 400 + seed)
            with torch.no_grad():
                out, pre_gate = block(f1, f2, return_pre_gate=True)
            nonzero = pre_gate != 0
            assert (out.abs()[nonzero] < pre_gate.abs()[nonzero]).all()
            npt.assert_array_equal(out.numpy()[(~nonzero).numpy()], 0.0)


class TestGroupedConv:
    def test_zeroed_group_stays_zero_before_residual(self):
        block = make_block(8)
        x = randn((1, 8, 6, 6), 9)
        x[:, 2:4] = 0.0  # second of four groups (2 channels each)
        with torch.no_grad():
            y = block.group_conv(x)
        npt.assert_array_equal(y[:, 2:4].numpy(), 0.0)
        assert y[:, :2].abs().sum() > 0

    def test_group_count_is_four(self):
        block = make_block(8)
        assert block.group_conv.conv.groups == 4


class TestGradients:
    def test_gradcheck_small_dims(self):
        report = gradcheck("ifr", dims=(4, 4, 4))
        assert report.max_rel_err < 1e-4, report
