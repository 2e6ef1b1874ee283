import numpy as np
import pytest

from lkdnet.blocks import CEFN, DLKCB, ChannelAttention, Decomposition, FeedForward, LKDBlock
from lkdnet.tensor import Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


def _x(shape, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


class TestDecomposition:
    def test_default_21_3(self):
        d = Decomposition()
        assert (d.kernel, d.dilation) == (21, 3)
        assert d.k_small == 5
        assert d.k_dilated == 7
        assert d.composed_extent == 23

    def test_13_3(self):
        d = Decomposition(13, 3)
        assert d.k_small == 5
        assert d.k_dilated == 5
        assert d.composed_extent == 17

    def test_dilation_one_plain(self):
        d = Decomposition(7, 1)
        assert d.k_small == 1
        assert d.k_dilated == 7
        assert d.composed_extent == 7

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Decomposition(20, 3)

    def test_ceil_rule_always_covers(self):
        # k_small + d * (ceil(K / d) - 1) >= 2d - 1 + K - d >= K for d >= 1,
        # so every valid (K, d) pair spans at least K.
        for k in range(1, 41, 2):
            for dil in range(1, 12):
                assert Decomposition(k, dil).composed_extent >= k


class TestChannelAttention:
    def test_gate_range_and_shape(self):
        ca = ChannelAttention(16, reduction=8, rng=_rng(2))
        x = _x((2, 16, 6, 6))
        g = ca.forward(x)
        assert g.shape == (2, 16, 1, 1)
        assert np.all(g.data > 0.0) and np.all(g.data < 1.0)

    def test_hidden_floor(self):
        ca = ChannelAttention(4, reduction=8, rng=_rng(3))
        # hidden = max(4 // 8, 1) = 1
        assert ca.fc1.weight.value.shape[0] == 1

    def test_param_count(self):
        ca = ChannelAttention(24, reduction=8, rng=_rng(4))
        # fc1: 24 * 3 + 3, fc2: 3 * 24 + 24
        assert ca.param_count() == 24 * 3 + 3 + 3 * 24 + 24


class TestDLKCB:
    def test_param_count_paired_pointwise(self):
        m = DLKCB(24, Decomposition(21, 3), _rng(5), paired_pointwise=True)
        # BN 48 + PW 600 + DW5 (600 + 24) + DW7d3 (1176 + 24) + PW 600 + scale 24
        assert m.param_count() == 3096

    def test_param_count_single_pointwise(self):
        m = DLKCB(24, Decomposition(21, 3), _rng(6), paired_pointwise=False)
        assert m.param_count() == 2496

    def test_plain_large_kernel(self):
        m = DLKCB(8, 7, _rng(7))
        assert m.dw_dilated is None
        assert m.dw_small.spec.kernel == (7, 7)
        y = m.forward(_x((1, 8, 12, 12)))
        assert y.shape == (1, 8, 12, 12)

    def test_even_plain_kernel_rejected(self):
        with pytest.raises(ValueError):
            DLKCB(8, 6, _rng(8))

    def test_unknown_gating_rejected(self):
        with pytest.raises(ValueError):
            DLKCB(8, 7, _rng(9), gating="concat")

    def test_near_identity_at_init(self):
        # Residual scale starts at 1e-2, so the block starts near identity.
        m = DLKCB(8, Decomposition(21, 3), _rng(10))
        x = _x((2, 8, 16, 16))
        y = m.forward(x)
        assert float(np.max(np.abs(y.data - x.data))) < 0.5
        assert float(np.max(np.abs(y.data - x.data))) > 0.0

    def test_multiply_gating_runs(self):
        m = DLKCB(6, Decomposition(13, 3), _rng(11), gating="multiply")
        x = _x((2, 6, 10, 10))
        y = m.forward(x)
        g = m.backward(Tensor.ones(y.shape))
        assert g.shape == x.shape

    def test_spatial_mixing_reach(self):
        # A centered impulse must influence outputs out to the composed
        # footprint radius after the two depth-wise legs.
        m = DLKCB(1, Decomposition(21, 3), _rng(12))
        x = Tensor.zeros((1, 1, 31, 31))
        base = m.forward(x).data.copy()
        x2 = Tensor.zeros((1, 1, 31, 31))
        x2.data[0, 0, 15, 15] = 1.0
        delta = np.abs(m.forward(x2).data - base)[0, 0]
        ys, xs = np.nonzero(delta > 0)
        assert ys.min() <= 15 - 10 and ys.max() >= 15 + 10
        assert xs.min() <= 15 - 10 and xs.max() >= 15 + 10


class TestFeedForwardAndCEFN:
    def test_feedforward_param_count(self):
        m = FeedForward(24, 4, _rng(13))
        # BN 48 + expand 24*96+96 + reduce 96*24+24 + scale 24
        assert m.param_count() == 48 + 24 * 96 + 96 + 96 * 24 + 24 + 24

    def test_cefn_param_count(self):
        m = CEFN(24, 4, _rng(14), ca_reduction=8)
        want = (
            48  # norm_in
            + 24 * 96 + 96  # expand
            + 96 * 9 + 96  # dw 3x3
            + 96 * 24 + 24  # reduce
            + (24 * 3 + 3 + 3 * 24 + 24)  # channel attention
            + 48  # norm_out
            + 24  # scale
        )
        assert m.param_count() == want

    def test_unknown_form_rejected(self):
        with pytest.raises(ValueError):
            CEFN(8, 2, _rng(15), form="other")

    @pytest.mark.parametrize("form", ["standard", "literal"])
    def test_forward_backward_shapes(self, form):
        m = CEFN(8, 2, _rng(16), form=form)
        x = _x((2, 8, 6, 6))
        y = m.forward(x)
        assert y.shape == x.shape
        g = m.backward(Tensor.ones(y.shape))
        assert g.shape == x.shape

    def test_forms_differ(self):
        xa = _x((2, 8, 6, 6))
        ya = CEFN(8, 2, _rng(17), form="standard").forward(xa)
        yb = CEFN(8, 2, _rng(17), form="literal").forward(xa)
        assert not np.allclose(ya.data, yb.data)

    def test_near_identity_at_init(self):
        m = CEFN(8, 2, _rng(18))
        x = _x((2, 8, 6, 6))
        y = m.forward(x)
        assert float(np.max(np.abs(y.data - x.data))) < 0.5


class TestLKDBlock:
    def test_composition(self):
        r = _rng(19)
        blk = LKDBlock(
            DLKCB(8, Decomposition(21, 3), r),
            CEFN(8, 2, r),
        )
        x = _x((2, 8, 8, 8))
        y = blk.forward(x)
        assert y.shape == x.shape
        g = blk.backward(Tensor.ones(y.shape))
        assert g.shape == x.shape

    def test_spatial_runs_before_channel(self):
        r = _rng(20)
        sp = DLKCB(4, 7, r)
        ch = FeedForward(4, 2, r)
        blk = LKDBlock(sp, ch)
        x = _x((1, 4, 8, 8))
        want = ch.forward(sp.forward(x))
        r2 = _rng(20)
        sp2 = DLKCB(4, 7, r2)
        ch2 = FeedForward(4, 2, r2)
        got = LKDBlock(sp2, ch2).forward(x)
        np.testing.assert_array_equal(got.data, want.data)
