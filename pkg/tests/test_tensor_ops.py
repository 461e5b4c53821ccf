"""Forward semantics of the tensor ops against direct oracles and worked cases."""

import numpy as np
import pytest

from demoe import tensor as T

import oracles as O


def randn(rng, shape):
    return rng.normal(size=shape).astype(np.float32)


def randu(rng, shape):
    # unit-scale draws keep f32 accumulation error well under the 1e-6 oracle tolerance
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


class TestConv2d:
    def test_scalar_pointwise_multiply_add(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
        w = T.Tensor(np.full((1, 1, 1, 1), 3.0, np.float32))
        b = T.Tensor(np.full((1, 1, 1, 1), 1.0, np.float32))
        out = T.conv2d(x, w, b, "pointwise_1x1")
        assert out.data.reshape(()) == np.float32(7.0)

    def test_depthwise_delta_kernel_is_identity(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(randn(rng, (2, 3, 5, 5)))
        w = np.zeros((3, 1, 3, 3), np.float32)
        w[:, 0, 1, 1] = 1.0
        b = T.Tensor(np.zeros((1, 3, 1, 1), np.float32))
        out = T.conv2d(x, T.Tensor(w), b, "depthwise_3x3")
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_pointwise_matches_nested_loops(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = randu(rng, (1, 2, 4, 4))
        w = randu(rng, (3, 2, 1, 1))
        b = randu(rng, (1, 3, 1, 1))
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), "pointwise_1x1")
        ref = O.conv_pointwise_loops(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
        assert np.max(np.abs(out.data - ref)) <= 1e-6

    @pytest.mark.parametrize("padding", ["zero", "reflect"])
    @pytest.mark.parametrize("seed", range(5))
    def test_depthwise_matches_nested_loops(self, seed, padding):
        rng = np.random.default_rng(200 + seed)
        x = randu(rng, (2, 4, 8, 8))
        w = randu(rng, (4, 1, 3, 3))
        b = randu(rng, (1, 4, 1, 1))
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), "depthwise_3x3", padding=padding)
        ref = O.conv_depthwise_loops(
            x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), padding
        )
        assert np.max(np.abs(out.data - ref)) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_down_matches_nested_loops(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = randu(rng, (2, 3, 8, 6))
        w = randu(rng, (6, 3, 2, 2))
        b = randu(rng, (1, 6, 1, 1))
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), "strided_2x2_down")
        ref = O.conv_down_loops(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
        assert out.data.shape == (2, 6, 4, 3)
        assert np.max(np.abs(out.data - ref)) <= 1e-6

    def test_shape_mismatch_rejected(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4), np.float32))
        w = T.Tensor(np.zeros((2, 4, 1, 1), np.float32))
        with pytest.raises(T.ShapeError, match="does not map"):
            T.conv2d(x, w, None, "pointwise_1x1")
        wd = T.Tensor(np.zeros((4, 1, 3, 3), np.float32))
        with pytest.raises(T.ShapeError, match="input channels"):
            T.conv2d(x, wd, None, "depthwise_3x3")

    def test_zero_extent_spatial_rejected(self):
        x = T.Tensor(np.zeros((1, 3, 0, 4), np.float32))
        w = T.Tensor(np.zeros((3, 3, 1, 1), np.float32))
        with pytest.raises(T.ShapeError, match="zero-extent"):
            T.conv2d(x, w, None, "pointwise_1x1")

    def test_odd_extent_down_rejected(self):
        x = T.Tensor(np.zeros((1, 2, 5, 4), np.float32))
        w = T.Tensor(np.zeros((4, 2, 2, 2), np.float32))
        with pytest.raises(T.ShapeError, match="even"):
            T.conv2d(x, w, None, "strided_2x2_down")


class TestLayerNorm:
    def test_two_channel_vector(self):
        x = T.Tensor(np.array([1.0, 3.0], np.float32).reshape(1, 2, 1, 1))
        g = T.Tensor(np.ones((1, 2, 1, 1), np.float32))
        b = T.Tensor(np.zeros((1, 2, 1, 1), np.float32))
        out = T.layer_norm_channels(x, g, b, eps=1e-6)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-5)

    def test_constant_vector_collapses_to_shift(self):
        x = T.Tensor(np.full((1, 2, 1, 1), 5.0, np.float32))
        g = T.Tensor(np.ones((1, 2, 1, 1), np.float32))
        b = T.Tensor(np.full((1, 2, 1, 1), 0.25, np.float32))
        out = T.layer_norm_channels(x, g, b)
        np.testing.assert_allclose(out.data.reshape(-1), [0.25, 0.25], atol=1e-3)

    def test_affine_on_normalized_values(self):
        x = T.Tensor(np.array([1.0, 3.0], np.float32).reshape(1, 2, 1, 1))
        g = T.Tensor(np.full((1, 2, 1, 1), 2.0, np.float32))
        b = T.Tensor(np.ones((1, 2, 1, 1), np.float32))
        out = T.layer_norm_channels(x, g, b)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 3.0], atol=1e-4)

    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        x = randn(rng, (2, 5, 3, 4))
        g = randn(rng, (1, 5, 1, 1))
        b = randn(rng, (1, 5, 1, 1))
        out = T.layer_norm_channels(T.Tensor(x), T.Tensor(g), T.Tensor(b))
        ref = O.ref_layer_norm(x.astype(np.float64), g.astype(np.float64), b.astype(np.float64))
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_bad_eps_rejected(self):
        x = T.Tensor(np.zeros((1, 2, 1, 1), np.float32))
        g = T.Tensor(np.ones((1, 2, 1, 1), np.float32))
        b = T.Tensor(np.zeros((1, 2, 1, 1), np.float32))
        with pytest.raises(T.ShapeError, match="eps"):
            T.layer_norm_channels(x, g, b, eps=0.0)


class TestSimpleGate:
    def test_constant_halves(self):
        x = np.zeros((1, 2, 2, 2), np.float32)
        x[0, 0] = 2.0
        x[0, 1] = 3.0
        out = T.simple_gate(T.Tensor(x))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 6.0, np.float32))

    def test_self_product_squares(self):
        rng = np.random.default_rng(5)
        half = randn(rng, (1, 2, 3, 3))
        x = np.concatenate([half, half], axis=1)
        out = T.simple_gate(T.Tensor(x))
        np.testing.assert_array_equal(out.data, half * half)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(6)
        x = randn(rng, (1, 4, 3, 3))
        out = T.simple_gate(T.Tensor(x))
        np.testing.assert_array_equal(out.data, O.ref_simple_gate(x))

    def test_odd_channels_rejected(self):
        with pytest.raises(T.ShapeError, match="even"):
            T.simple_gate(T.Tensor(np.zeros((1, 3, 2, 2), np.float32)))


class TestSCA:
    def test_zero_attention_weights_zero_output(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(randn(rng, (2, 3, 4, 4)))
        w = T.Tensor(np.zeros((3, 3, 1, 1), np.float32))
        b = T.Tensor(np.zeros((1, 3, 1, 1), np.float32))
        out = T.simplified_channel_attention(x, w, b)
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_constant_input_identity_weight_squares(self):
        c = 0.5
        x = T.Tensor(np.full((1, 2, 3, 3), c, np.float32))
        w = np.zeros((2, 2, 1, 1), np.float32)
        w[0, 0] = w[1, 1] = 1.0
        out = T.simplified_channel_attention(x, T.Tensor(w), T.Tensor(np.zeros((1, 2, 1, 1), np.float32)))
        np.testing.assert_allclose(out.data, np.full((1, 2, 3, 3), c * c), atol=1e-7)

    def test_matches_pool_conv_scale_oracle(self):
        rng = np.random.default_rng(9)
        x = randn(rng, (2, 4, 5, 5))
        w = randn(rng, (4, 4, 1, 1))
        b = randn(rng, (1, 4, 1, 1))
        out = T.simplified_channel_attention(T.Tensor(x), T.Tensor(w), T.Tensor(b))
        ref = O.ref_sca(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
        assert np.max(np.abs(out.data - ref)) <= 1e-6

    def test_channel_mismatch_rejected(self):
        x = T.Tensor(np.zeros((1, 3, 2, 2), np.float32))
        w = T.Tensor(np.zeros((2, 2, 1, 1), np.float32))
        with pytest.raises(T.ShapeError):
            T.simplified_channel_attention(x, w, None)


class TestPixelShuffle:
    def test_definitional_layout(self):
        x = np.arange(4, dtype=np.float32).reshape(1, 4, 1, 1)  # (a, b, c, d)
        out = T.pixel_shuffle(T.Tensor(x), "up")
        np.testing.assert_array_equal(out.data.reshape(2, 2), [[0, 1], [2, 3]])

    def test_round_trip_exact(self):
        rng = np.random.default_rng(11)
        x = randn(rng, (2, 4, 3, 5))
        up = T.pixel_shuffle(T.Tensor(x), "up")
        back = T.pixel_shuffle(up, "down")
        assert np.array_equal(back.data, x)

    def test_shape_law(self):
        x = T.Tensor(np.zeros((2, 8, 3, 5), np.float32))
        assert T.pixel_shuffle(x, "up").shape == (2, 2, 6, 10)

    def test_divisibility_enforced(self):
        with pytest.raises(T.ShapeError, match="divisible"):
            T.pixel_shuffle(T.Tensor(np.zeros((1, 3, 2, 2), np.float32)), "up")
        with pytest.raises(T.ShapeError, match="divisible"):
            T.pixel_shuffle(T.Tensor(np.zeros((1, 3, 3, 2), np.float32)), "down")


class TestSoftmax:
    def test_uniform_logits(self):
        out = T.softmax(np.zeros(5))
        np.testing.assert_allclose(out, np.full(5, 0.2), atol=1e-12)

    def test_closed_form(self):
        out = T.softmax([np.log(2.0), 0.0])
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        v = rng.normal(size=7)
        for c in (-3.0, 0.5, 100.0):
            np.testing.assert_allclose(T.softmax(v + c), T.softmax(v), atol=1e-12)

    def test_probability_vector(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            out = T.softmax(rng.normal(size=rng.integers(1, 9)) * 10)
            assert np.all(out > 0)
            assert abs(out.sum() - 1.0) <= 1e-6

    def test_empty_rejected(self):
        with pytest.raises(T.ShapeError, match="empty"):
            T.softmax([])

    def test_channel_softmax_matches_vector(self):
        rng = np.random.default_rng(14)
        x = randn(rng, (3, 6, 1, 1))
        out = T.softmax_channels(T.Tensor(x))
        for i in range(3):
            np.testing.assert_allclose(
                out.data[i, :, 0, 0], T.softmax(x[i, :, 0, 0]), atol=1e-6
            )


class TestInvariants:
    def test_rank4_enforced(self):
        with pytest.raises(T.ShapeError, match="rank-4"):
            T.Tensor(np.zeros((3, 3), np.float32))

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(15)
        x = randn(rng, (2, 4, 4, 4)) * 50
        g = randn(rng, (1, 4, 1, 1))
        b = randn(rng, (1, 4, 1, 1))
        outs = [
            T.layer_norm_channels(T.Tensor(x), T.Tensor(g), T.Tensor(b)),
            T.simple_gate(T.Tensor(x)),
            T.softmax_channels(T.Tensor(x)),
            T.global_avg_pool(T.Tensor(x)),
        ]
        for out in outs:
            assert np.all(np.isfinite(out.data))
