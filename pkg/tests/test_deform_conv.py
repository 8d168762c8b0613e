import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformdet import deform_conv as dc
from deformdet.tensor import ConvParams, ShapeError, conv2d, conv2d_backward, finite_diff_grad, grad_error

from oracles import deform_conv_loops


def random_layer(rng, in_c=2, out_c=3, k=3, stride=1):
    layer = dc.make_dc_layer(in_c, out_c, k, stride, seed=int(rng.integers(1 << 30)))
    layer.main.bias[...] = rng.normal(size=out_c)
    return layer


def fractional(rng, shape):
    # keep every displacement away from integers so no sample lands on a cell edge
    return rng.integers(-2, 3, shape) + rng.uniform(0.2, 0.8, shape)


class TestForward:
    def test_fresh_layer_is_plain_conv(self):
        rng = np.random.default_rng(0)
        layer = dc.make_dc_layer(3, 4, 3, seed=5)
        x = rng.normal(size=(2, 3, 7, 6))
        y, off = dc.dc_forward(x, layer)
        assert not off.any()
        np.testing.assert_allclose(y, conv2d(x, layer.main), rtol=0, atol=1e-12)

    def test_shift_up_by_one_row(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        params = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1), 1, 0)
        offsets = np.zeros((1, 2, 3, 3))
        offsets[:, 0] = 1.0
        y = dc.deform_conv2d(x, params, offsets)
        np.testing.assert_array_equal(y[0, 0], [[4, 5, 6], [7, 8, 9], [0, 0, 0]])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 8, 8))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        offsets = rng.normal(0, 1.5, size=(1, 18, 8, 8))
        got = dc.deform_conv2d(x, ConvParams(w, b, 1, 1), offsets)
        np.testing.assert_allclose(got, deform_conv_loops(x, w, b, offsets, 1, 1), atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 2),
           st.integers(0, 2**31))
    def test_naive_loop_property(self, c, o, k, stride, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, c, 6, 5))
        w, b = rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        pad = k // 2
        ho = (6 + 2 * pad - k) // stride + 1
        wo = (5 + 2 * pad - k) // stride + 1
        offsets = rng.normal(0, 2.0, size=(2, 2 * k * k, ho, wo))
        got = dc.deform_conv2d(x, ConvParams(w, b, stride, pad), offsets)
        np.testing.assert_allclose(got, deform_conv_loops(x, w, b, offsets, stride, pad),
                                   atol=1e-12)

    def test_offset_channel_count_checked(self):
        x = np.zeros((1, 1, 4, 4))
        params = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        with pytest.raises(ShapeError):
            dc.deform_conv2d(x, params, np.zeros((1, 9, 4, 4)))

    def test_offset_spatial_checked(self):
        params = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        with pytest.raises(ShapeError):
            dc.deform_conv2d(np.zeros((1, 1, 4, 4)), params, np.zeros((1, 18, 3, 4)))

    def test_input_channels_checked(self):
        with pytest.raises(ShapeError):
            dc.dc_forward(np.zeros((1, 3, 4, 4)), dc.make_dc_layer(2, 2, 3))

    def test_branch_shape_validated(self):
        main = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        bad = ConvParams(np.zeros((9, 1, 3, 3)), np.zeros(9), 1, 1)
        with pytest.raises(ShapeError):
            dc.DeformConvLayer(main, bad)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_translation_consistency(self, seed):
        rng = np.random.default_rng(seed)
        layer = dc.make_dc_layer(2, 2, 3, seed=seed)
        x = rng.normal(size=(1, 2, 9, 9))
        shifted = np.zeros_like(x)
        shifted[:, :, 1:, :] = x[:, :, :-1, :]
        y, _ = dc.dc_forward(x, layer)
        ys, _ = dc.dc_forward(shifted, layer)
        # away from the borders, the output shifts with the input
        np.testing.assert_allclose(ys[:, :, 2:-1, 1:-1], y[:, :, 1:-2, 1:-1], atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-1e6, 1e6), st.integers(0, 2**31))
    def test_clamped_offsets_stay_finite(self, bias, seed):
        rng = np.random.default_rng(seed)
        layer = dc.make_dc_layer(1, 1, 3, seed=seed, clamp=4.0)
        layer.offset_branch.bias[...] = bias
        x = rng.normal(size=(1, 1, 5, 5))
        y, raw = dc.dc_forward(x, layer)
        assert np.all(np.isfinite(y))
        expected = dc.deform_conv2d(x, layer.main, np.clip(raw, -4.0, 4.0))
        np.testing.assert_array_equal(y, expected)


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        layer = random_layer(rng)
        layer.offset_branch.bias[...] = fractional(rng, 18)
        x = rng.normal(size=(1, 2, 5, 5))
        y, off = dc.dc_forward(x, layer)
        g = dc.dc_backward(x, layer, off, np.zeros_like(y))
        for arr in (g.d_input, g.d_weights, g.d_bias, g.d_offsets, g.d_offset_weights,
                    g.d_offset_bias):
            assert not arr.any()

    def test_frozen_branch_matches_conv_backward(self):
        rng = np.random.default_rng(3)
        layer = random_layer(rng)
        x = rng.normal(size=(2, 2, 6, 6))
        y, off = dc.dc_forward(x, layer)
        up = rng.normal(size=y.shape)
        g = dc.dc_backward(x, layer, off, up, through_branch=False)
        ref = conv2d_backward(x, layer.main, up)
        np.testing.assert_allclose(g.d_weights, ref.d_weights, atol=1e-12)
        np.testing.assert_allclose(g.d_bias, ref.d_bias, atol=1e-12)
        np.testing.assert_allclose(g.d_input, ref.d_input, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("stride", [1, 2])
    def test_every_group_matches_finite_differences(self, seed, stride):
        rng = np.random.default_rng([seed, stride])
        layer = random_layer(rng, stride=stride)
        layer.offset_branch.weights[...] = rng.normal(0, 0.02, layer.offset_branch.weights.shape)
        layer.offset_branch.bias[...] = fractional(rng, 18)
        x = rng.normal(size=(2, 2, 6, 7))
        y, off = dc.dc_forward(x, layer)
        up = rng.normal(size=y.shape)
        g = dc.dc_backward(x, layer, off, up)

        def f(_):
            return float((dc.dc_forward(x, layer)[0] * up).sum())

        for analytic, arr in ((g.d_input, x), (g.d_weights, layer.main.weights),
                              (g.d_bias, layer.main.bias),
                              (g.d_offset_weights, layer.offset_branch.weights),
                              (g.d_offset_bias, layer.offset_branch.bias)):
            assert grad_error(analytic, finite_diff_grad(f, arr)) < 1e-4

        numeric = finite_diff_grad(lambda o: float((dc.deform_conv2d(x, layer.main, o) * up).sum()),
                                   off)
        assert grad_error(g.d_offsets, numeric) < 1e-4

    def test_sign_hook_breaks_offset_gradient(self, monkeypatch):
        rng = np.random.default_rng(4)
        layer = random_layer(rng)
        layer.offset_branch.bias[...] = fractional(rng, 18)
        x = rng.normal(size=(1, 2, 5, 5))
        y, off = dc.dc_forward(x, layer)
        up = rng.normal(size=y.shape)
        good = dc.dc_backward(x, layer, off, up).d_offsets
        monkeypatch.setattr(dc, "_OFFSET_GRAD_SIGN", -1.0)
        np.testing.assert_allclose(dc.dc_backward(x, layer, off, up).d_offsets, -good)


class TestMakeLayer:
    def test_same_seed_same_layer(self):
        a, b = dc.make_dc_layer(3, 5, 3, seed=9), dc.make_dc_layer(3, 5, 3, seed=9)
        np.testing.assert_array_equal(a.main.weights, b.main.weights)

    @pytest.mark.parametrize("seed", [0, 1, 123])
    def test_branch_starts_at_zero(self, seed):
        layer = dc.make_dc_layer(2, 2, 5, seed=seed)
        assert not layer.offset_branch.weights.any() and not layer.offset_branch.bias.any()
        assert layer.offset_branch.out_channels == 50

    @pytest.mark.parametrize("k", [0, 2, -1])
    def test_invalid_kernel(self, k):
        with pytest.raises(ValueError):
            dc.make_dc_layer(1, 1, k)
