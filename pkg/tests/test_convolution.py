import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lkdnet import precision
from lkdnet.convolution import (
    ConvSpec,
    conv2d_backward,
    conv2d_forward,
    conv2d_reference,
)
from lkdnet.tensor import ShapeError, Tensor


def _rand(shape, seed, f64=False):
    r = np.random.default_rng(seed)
    a = r.standard_normal(shape)
    return Tensor(a if f64 else a.astype(np.float32))


def _operands(spec, n, h, w, seed, f64=False):
    x = _rand((n, spec.in_ch, h, w), seed, f64)
    wt = _rand(spec.weight_shape, seed + 1, f64)
    b = _rand((1, spec.out_ch, 1, 1), seed + 2, f64) if spec.has_bias else None
    return x, wt, b


class TestConvSpec:
    def test_same_padding_resolved(self):
        s = ConvSpec(3, 8, 5)
        assert s.padding == (2, 2)
        assert s.extent == (5, 5)

    def test_dilated_extent(self):
        s = ConvSpec(4, 4, 7, dilation=3, groups=4)
        assert s.extent == (19, 19)
        assert s.padding == (9, 9)

    def test_even_extent_same_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(3, 3, 4)

    def test_groups_must_divide(self):
        with pytest.raises(ValueError):
            ConvSpec(6, 8, 3, groups=4)

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(0, 3, 3)
        with pytest.raises(ValueError):
            ConvSpec(3, 3, 3, stride=0)

    def test_out_size_strided(self):
        s = ConvSpec(3, 8, 3, stride=2)
        assert s.out_size(8, 8) == (4, 4)
        assert s.out_size(9, 9) == (5, 5)

    def test_param_count(self):
        assert ConvSpec(24, 48, 1).param_count() == 24 * 48 + 48
        assert ConvSpec(24, 24, 5, groups=24, has_bias=False).param_count() == 24 * 25

    def test_macs(self):
        s = ConvSpec(8, 16, 3)
        assert s.macs(10, 10) == 10 * 10 * 16 * 8 * 9

    def test_depthwise_flag(self):
        assert ConvSpec(8, 8, 3, groups=8).is_depthwise
        assert not ConvSpec(8, 8, 3, groups=4).is_depthwise


class TestForwardAgainstReference:
    def test_depthwise_bitwise_f32(self):
        spec = ConvSpec(6, 6, 5, groups=6, has_bias=True)
        x, w, b = _operands(spec, 2, 11, 9, seed=10)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_array_equal(fast.data, ref.data)

    def test_depthwise_bitwise_f64(self):
        precision.set_dtype("f64")
        spec = ConvSpec(4, 4, 7, dilation=2, groups=4, has_bias=False)
        x, w, b = _operands(spec, 1, 15, 15, seed=11, f64=True)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_array_equal(fast.data, ref.data)

    def test_depthwise_strided_bitwise(self):
        spec = ConvSpec(3, 3, 3, stride=2, groups=3)
        x, w, b = _operands(spec, 2, 9, 12, seed=12)
        np.testing.assert_array_equal(
            conv2d_forward(x, spec, w, b).data, conv2d_reference(x, spec, w, b).data
        )

    def test_dense_close_f64(self):
        precision.set_dtype("f64")
        spec = ConvSpec(5, 7, 3)
        x, w, b = _operands(spec, 2, 8, 8, seed=13, f64=True)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-12, atol=1e-12)

    def test_pointwise_close_f64(self):
        precision.set_dtype("f64")
        spec = ConvSpec(12, 5, 1)
        x, w, b = _operands(spec, 3, 6, 7, seed=14, f64=True)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-12, atol=1e-12)

    def test_grouped_close_f64(self):
        precision.set_dtype("f64")
        spec = ConvSpec(8, 12, 3, groups=4)
        x, w, b = _operands(spec, 2, 7, 7, seed=15, f64=True)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-12, atol=1e-12)

    def test_dense_close_f32(self):
        spec = ConvSpec(5, 7, 3, stride=2)
        x, w, b = _operands(spec, 2, 9, 9, seed=16)
        fast = conv2d_forward(x, spec, w, b)
        ref = conv2d_reference(x, spec, w, b)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-5, atol=1e-6)

    def test_impulse_taps_of_dilated_depthwise(self):
        # An impulse at the center must light up exactly the dilated tap grid.
        spec = ConvSpec(1, 1, 3, dilation=3, groups=1, has_bias=False)
        x = Tensor.zeros((1, 1, 13, 13))
        x.data[0, 0, 6, 6] = 1.0
        w = Tensor.ones(spec.weight_shape)
        out = conv2d_forward(x, spec, w).data[0, 0]
        ys, xs = np.nonzero(out)
        assert sorted(set(ys)) == [3, 6, 9]
        assert sorted(set(xs)) == [3, 6, 9]
        assert len(ys) == 9


class TestBackward:
    def _fd_input(self, spec, x, w, b, eps=1e-6):
        precision_dtype = x.data.dtype
        assert precision_dtype == np.float64
        oh, ow = spec.out_size(x.shape[2], x.shape[3])
        r = np.random.default_rng(99)
        seed_g = r.standard_normal((x.shape[0], spec.out_ch, oh, ow))
        go = Tensor(seed_g)

        def loss(xv):
            out = conv2d_forward(Tensor(xv), spec, w, b)
            return float((out.data * seed_g).sum())

        gx, gw, gb = conv2d_backward(x, spec, w, go)
        num = np.zeros_like(x.data)
        flat = x.data.ravel()
        idx = r.choice(flat.size, size=min(20, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(x.data)
            flat[i] = orig - eps
            dn = loss(x.data)
            flat[i] = orig
            num.ravel()[i] = (up - dn) / (2 * eps)
            a = gx.data.ravel()[i]
            n = num.ravel()[i]
            assert abs(a - n) <= 1e-6 * max(abs(a), abs(n), 1.0)
        return gw, gb, seed_g

    def test_dense_gradients_fd(self):
        precision.set_dtype("f64")
        spec = ConvSpec(3, 4, 3, stride=2)
        x, w, b = _operands(spec, 2, 7, 7, seed=20, f64=True)
        gw, gb, seed_g = self._fd_input(spec, x, w, b)
        np.testing.assert_allclose(
            gb.data.ravel(), seed_g.sum(axis=(0, 2, 3)), rtol=1e-10
        )

    def test_depthwise_gradients_fd(self):
        precision.set_dtype("f64")
        spec = ConvSpec(3, 3, 5, dilation=2, groups=3, has_bias=False)
        x, w, b = _operands(spec, 1, 12, 12, seed=21, f64=True)
        self._fd_input(spec, x, w, b)

    def test_grouped_gradients_fd(self):
        precision.set_dtype("f64")
        spec = ConvSpec(4, 6, 3, groups=2)
        x, w, b = _operands(spec, 2, 6, 6, seed=22, f64=True)
        self._fd_input(spec, x, w, b)

    def test_grad_out_shape_checked(self):
        spec = ConvSpec(3, 4, 3)
        x, w, _ = _operands(spec, 1, 6, 6, seed=23)
        with pytest.raises(ShapeError):
            conv2d_backward(x, spec, w, Tensor.ones((1, 4, 5, 6)))

    def test_operand_shape_checked(self):
        spec = ConvSpec(3, 4, 3)
        x = Tensor.ones((1, 2, 6, 6))
        w = Tensor.ones(spec.weight_shape)
        with pytest.raises(ShapeError):
            conv2d_forward(x, spec, w, Tensor.zeros((1, 4, 1, 1)))


@st.composite
def conv_case(draw):
    groups_kind = draw(st.sampled_from(["dense", "depthwise", "grouped"]))
    k = draw(st.sampled_from([1, 3, 5]))
    dil = draw(st.sampled_from([1, 2])) if k > 1 else 1
    stride = draw(st.sampled_from([1, 2]))
    if groups_kind == "depthwise":
        c = draw(st.integers(1, 4))
        spec = ConvSpec(c, c, k, stride=stride, dilation=dil, groups=c, has_bias=draw(st.booleans()))
    elif groups_kind == "grouped":
        g = draw(st.sampled_from([2, 3]))
        spec = ConvSpec(
            g * draw(st.integers(1, 2)),
            g * draw(st.integers(1, 2)),
            k,
            stride=stride,
            dilation=dil,
            groups=g,
            has_bias=draw(st.booleans()),
        )
    else:
        spec = ConvSpec(
            draw(st.integers(1, 4)),
            draw(st.integers(1, 4)),
            k,
            stride=stride,
            dilation=dil,
            has_bias=draw(st.booleans()),
        )
    eh, _ = spec.extent
    h = draw(st.integers(eh, eh + 4))
    w = draw(st.integers(eh, eh + 4))
    n = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 10_000))
    return spec, n, h, w, seed


class TestPropertyFastMatchesReference:
    @given(case=conv_case())
    @settings(max_examples=40, deadline=None)
    def test_f64_agreement(self, case):
        spec, n, h, w, seed = case
        precision.set_dtype("f64")
        try:
            x, wt, b = _operands(spec, n, h, w, seed, f64=True)
            fast = conv2d_forward(x, spec, wt, b)
            ref = conv2d_reference(x, spec, wt, b)
        finally:
            precision.set_dtype("f32")
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-12, atol=1e-12)
        assert fast.shape == (n, spec.out_ch, *spec.out_size(h, w))
