"""Unit tests for the differentiable layer core."""

import numpy as np
import pytest
from pydantic import ValidationError

from ce_vae.exceptions import BatchSizeError, MissingCacheError, NonFiniteError, ShapeError
from ce_vae.nn import LayerKind, LayerSpec, Sequential, Tensor
from ce_vae.nn.layers import (
    batchnorm1d_backward,
    batchnorm1d_forward,
    conv1d_backward,
    conv1d_forward,
    conv1d_output_length,
    conv_transpose1d_backward,
    conv_transpose1d_forward,
    conv_transpose1d_output_length,
    dense_backward,
    dense_forward,
    flatten,
    relu_backward,
    relu_forward,
)


def finite_difference(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus = x.copy()
        minus = x.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (f(plus) - f(minus)) / (2 * h)
    return grad


def assert_gradient_close(analytic, numeric, tol=1e-5):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(analytic - numeric) / scale <= tol


def naive_conv1d(x, w, b, stride, padding):
    batch, c_in, length = x.shape
    c_out, _, kernel = w.shape
    padded = np.zeros((batch, c_in, length + 2 * padding))
    padded[:, :, padding : padding + length] = x
    out_len = conv1d_output_length(length, kernel, stride, padding)
    out = np.zeros((batch, c_out, out_len))
    for n in range(batch):
        for o in range(c_out):
            for i in range(out_len):
                total = b[o]
                for c in range(c_in):
                    for k in range(kernel):
                        total += w[o, c, k] * padded[n, c, i * stride + k]
                out[n, o, i] = total
    return out


class TestConv1d:
    """Test strided 1D convolution forward and backward passes."""

    def test_identity_kernel(self):
        """Test that a unit kernel of size one reproduces the input."""
        x = np.array([[[1.0, 2.0, 3.0]]])

        out, _ = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1), stride=1, padding=0)

        np.testing.assert_array_equal(out, x)

    def test_output_length_halves(self):
        """Test kernel 11, stride 2, padding 5 maps length 64 to 32."""
        assert conv1d_output_length(64, 11, 2, 5) == 32

    def test_matches_naive_loops(self, rng):
        """Test forward output against a nested-loop reference."""
        x = rng.standard_normal((2, 3, 16))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)

        out, _ = conv1d_forward(x, w, b, stride=2, padding=2)

        np.testing.assert_allclose(out, naive_conv1d(x, w, b, 2, 2), atol=1e-12, rtol=0)

    def test_zero_upstream_gradient(self, rng):
        """Test that a zero upstream gradient gives zero gradients everywhere."""
        x = rng.standard_normal((2, 3, 8))
        w = rng.standard_normal((2, 3, 3))
        out, cache = conv1d_forward(x, w, np.zeros(2), stride=1, padding=1)

        grad_x, grad_w, grad_b = conv1d_backward(np.zeros_like(out), cache)

        assert not grad_x.any() and not grad_w.any() and not grad_b.any()

    def test_scalar_chain_rule(self):
        """Test dLoss/da = sum(grad_out * input) for a 1x1 kernel [a]."""
        x = np.array([[[2.0, -3.0]]])
        grad_out = np.array([[[0.5, 4.0]]])
        _, cache = conv1d_forward(x, np.array([[[1.7]]]), np.zeros(1), stride=1, padding=0)

        _, grad_w, _ = conv1d_backward(grad_out, cache)

        assert grad_w[0, 0, 0] == pytest.approx(2.0 * 0.5 - 3.0 * 4.0)

    def test_gradients_match_finite_differences(self, rng):
        """Test input, weight and bias gradients against central differences."""
        x = rng.standard_normal((2, 2, 9))
        w = rng.standard_normal((3, 2, 3))
        b = rng.standard_normal(3)
        upstream = rng.standard_normal((2, 3, conv1d_output_length(9, 3, 2, 1)))

        def loss(x_, w_, b_):
            return float(np.sum(conv1d_forward(x_, w_, b_, 2, 1)[0] * upstream))

        _, cache = conv1d_forward(x, w, b, 2, 1)
        grad_x, grad_w, grad_b = conv1d_backward(upstream, cache)

        assert_gradient_close(grad_x, finite_difference(lambda v: loss(v, w, b), x))
        assert_gradient_close(grad_w, finite_difference(lambda v: loss(x, v, b), w))
        assert_gradient_close(grad_b, finite_difference(lambda v: loss(x, w, v), b))

    def test_backward_without_cache(self):
        """Test that backward before forward raises a named error."""
        with pytest.raises(MissingCacheError):
            conv1d_backward(np.zeros((1, 1, 1)), None)

    def test_channel_mismatch(self, rng):
        """Test that disagreeing channel counts are rejected."""
        with pytest.raises(ShapeError) as exc_info:
            conv1d_forward(rng.standard_normal((1, 2, 8)), np.ones((1, 3, 3)), np.zeros(1), 1, 1)

        assert "channels" in str(exc_info.value)


class TestConvTranspose1d:
    """Test transposed convolution."""

    def test_output_length_doubles(self):
        """Test kernel 11, stride 2, padding 5, output padding 1 maps 32 to 64."""
        assert conv_transpose1d_output_length(32, 11, 2, 5, 1) == 64

    def test_adjoint_of_conv1d(self, rng):
        """Test <conv(x), y> = <x, convT(y)> with shared weights."""
        x = rng.standard_normal((2, 3, 64))
        w = rng.standard_normal((4, 3, 11))
        conv_out, _ = conv1d_forward(x, w, np.zeros(4), stride=2, padding=5)
        y = rng.standard_normal(conv_out.shape)

        convt_out, _ = conv_transpose1d_forward(
            y, w, np.zeros(3), stride=2, padding=5, output_padding=1
        )

        assert convt_out.shape == x.shape
        assert np.sum(conv_out * y) == pytest.approx(np.sum(x * convt_out), abs=1e-12 * x.size)

    def test_gradients_match_finite_differences(self, rng):
        """Test input, weight and bias gradients against central differences."""
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 2, 3))
        b = rng.standard_normal(2)
        out_len = conv_transpose1d_output_length(4, 3, 2, 1, 1)
        upstream = rng.standard_normal((2, 2, out_len))

        def loss(x_, w_, b_):
            return float(np.sum(conv_transpose1d_forward(x_, w_, b_, 2, 1, 1)[0] * upstream))

        _, cache = conv_transpose1d_forward(x, w, b, 2, 1, 1)
        grad_x, grad_w, grad_b = conv_transpose1d_backward(upstream, cache)

        assert_gradient_close(grad_x, finite_difference(lambda v: loss(v, w, b), x))
        assert_gradient_close(grad_w, finite_difference(lambda v: loss(x, v, b), w))
        assert_gradient_close(grad_b, finite_difference(lambda v: loss(x, w, v), b))

    def test_output_padding_must_be_below_stride(self, rng):
        """Test that output padding >= stride is rejected."""
        with pytest.raises(ShapeError):
            conv_transpose1d_forward(
                rng.standard_normal((1, 1, 4)), np.ones((1, 1, 3)), np.zeros(1), 2, 1, 2
            )

    def test_non_positive_output_length(self):
        """Test that a configuration cropping everything away is rejected."""
        with pytest.raises(ShapeError):
            conv_transpose1d_forward(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros(1), 1, 1)


class TestDenseAndActivations:
    """Test dense, ReLU and flatten."""

    def test_dense_gradients(self, rng):
        """Test dense gradients against central differences."""
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        upstream = rng.standard_normal((3, 4))

        def loss(x_, w_, b_):
            return float(np.sum(dense_forward(x_, w_, b_)[0] * upstream))

        _, cache = dense_forward(x, w, b)
        grad_x, grad_w, grad_b = dense_backward(upstream, cache)

        assert_gradient_close(grad_x, finite_difference(lambda v: loss(v, w, b), x))
        assert_gradient_close(grad_w, finite_difference(lambda v: loss(x, v, b), w))
        assert_gradient_close(grad_b, finite_difference(lambda v: loss(x, w, v), b))

    def test_dense_rejects_wrong_width(self, rng):
        with pytest.raises(ShapeError):
            dense_forward(rng.standard_normal((2, 3)), np.ones((4, 5)), np.zeros(4))

    def test_relu(self):
        """Test ReLU([-1, 0, 2]) = [0, 0, 2] and its gradient mask."""
        out, cache = relu_forward(np.array([-1.0, 0.0, 2.0]))

        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_backward(np.ones(3), cache), [0.0, 0.0, 1.0])

    def test_flatten(self):
        assert flatten(np.zeros((2, 3, 4))).shape == (2, 12)


class TestBatchNorm1d:
    """Test batch normalization in train and eval modes."""

    @staticmethod
    def _stats(channels):
        return np.zeros(channels), np.ones(channels)

    def test_normalized_input_passes_through(self, rng):
        """Test that zero-mean unit-variance input is returned unchanged."""
        x = rng.standard_normal((8, 3, 5))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        mean, var = self._stats(3)

        out, _ = batchnorm1d_forward(x, np.ones(3), np.zeros(3), mean, var, training=True)

        np.testing.assert_allclose(out, x, rtol=1e-5, atol=0)

    def test_running_statistics_update(self, rng):
        """Test momentum 0.1 updates with the unbiased batch variance."""
        x = rng.standard_normal((4, 2, 3)) * 2.0 + 1.0
        mean, var = self._stats(2)

        batchnorm1d_forward(x, np.ones(2), np.zeros(2), mean, var, training=True)

        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))

    def test_eval_mode_uses_running_statistics(self, rng):
        """Test eval mode normalizes with the stored statistics and leaves them alone."""
        x = rng.standard_normal((1, 2, 4))
        mean = np.array([1.0, -1.0])
        var = np.array([4.0, 0.25])

        out, _ = batchnorm1d_forward(x, np.ones(2), np.zeros(2), mean, var, training=False)

        expected = (x - mean[None, :, None]) / np.sqrt(var[None, :, None] + 1e-5)
        np.testing.assert_allclose(out, expected)
        np.testing.assert_array_equal(mean, [1.0, -1.0])

    def test_batch_of_one_in_training(self, rng):
        """Test that training mode rejects a single-sample batch."""
        mean, var = self._stats(2)

        with pytest.raises(BatchSizeError):
            batchnorm1d_forward(
                rng.standard_normal((1, 2, 4)), np.ones(2), np.zeros(2), mean, var, training=True
            )

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients_match_finite_differences(self, rng, training):
        """Test input, scale and shift gradients in both modes."""
        x = rng.standard_normal((4, 2, 3))
        gamma = rng.standard_normal(2)
        beta = rng.standard_normal(2)
        upstream = rng.standard_normal(x.shape)
        running = (np.array([0.3, -0.2]), np.array([1.5, 0.7]))

        def loss(x_, g_, b_):
            mean, var = running[0].copy(), running[1].copy()
            out, _ = batchnorm1d_forward(x_, g_, b_, mean, var, training=training)
            return float(np.sum(out * upstream))

        _, cache = batchnorm1d_forward(
            x, gamma, beta, running[0].copy(), running[1].copy(), training=training
        )
        grad_x, grad_gamma, grad_beta = batchnorm1d_backward(upstream, cache)

        assert_gradient_close(grad_x, finite_difference(lambda v: loss(v, gamma, beta), x))
        assert_gradient_close(grad_gamma, finite_difference(lambda v: loss(x, v, beta), gamma))
        assert_gradient_close(grad_beta, finite_difference(lambda v: loss(x, gamma, v), beta))


class TestSequential:
    """Test layer specs and the sequential container."""

    def test_spec_requires_fields_for_kind(self):
        """Test that a conv spec without channels is rejected."""
        with pytest.raises(ValidationError) as exc_info:
            LayerSpec(kind=LayerKind.CONV1D, kernel_size=3)

        assert "in_channels" in str(exc_info.value)

    def test_named_tensors_include_buffers(self, rng):
        """Test naming and that batch-norm running statistics are listed."""
        specs = [
            LayerSpec(
                kind=LayerKind.CONV1D, in_channels=2, out_channels=3, kernel_size=3, padding=1
            ),
            LayerSpec(kind=LayerKind.BATCHNORM1D, features=3),
            LayerSpec(kind=LayerKind.RELU),
        ]
        net = Sequential.from_specs(specs, rng, name="encoder")

        names = [name for name, _ in net.named_tensors()]

        assert names == [
            "encoder.0.weight",
            "encoder.0.bias",
            "encoder.1.gamma",
            "encoder.1.beta",
            "encoder.1.running_mean",
            "encoder.1.running_var",
        ]
        assert len(net.parameters()) == 4

    def test_backward_accumulates_gradients(self, rng):
        """Test that a chained backward fills every parameter gradient."""
        specs = [
            LayerSpec(kind=LayerKind.DENSE, in_features=3, out_features=4),
            LayerSpec(kind=LayerKind.RELU),
            LayerSpec(kind=LayerKind.DENSE, in_features=4, out_features=2),
        ]
        net = Sequential.from_specs(specs, rng, name="mlp")
        out = net.forward(rng.standard_normal((5, 3)))

        net.backward(np.ones_like(out))

        assert all(p.grad is not None and p.grad.shape == p.shape for p in net.parameters())
        net.zero_grad()
        assert all(p.grad is None for p in net.parameters())

    def test_non_finite_activation_names_layer(self, rng):
        """Test that NaN activations abort with the layer index."""
        specs = [
            LayerSpec(kind=LayerKind.DENSE, in_features=2, out_features=2),
            LayerSpec(kind=LayerKind.RELU),
        ]
        net = Sequential.from_specs(specs, rng, name="net")
        net.layers[0].weight.data[0, 0] = np.nan

        with pytest.raises(NonFiniteError) as exc_info:
            net.forward(np.ones((2, 2)))

        assert exc_info.value.layer_index == 0

    def test_zero_init_spec(self, rng):
        """Test that zero-initialized dense layers output zeros."""
        specs = [LayerSpec(kind=LayerKind.DENSE, in_features=3, out_features=2, zero_init=True)]
        net = Sequential.from_specs(specs, rng)

        assert not net.forward(rng.standard_normal((4, 3))).any()


class TestTensor:
    """Test the parameter tensor."""

    def test_rejects_empty_shape(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)), name="empty")

    def test_accumulate_adds_and_checks_shape(self):
        """Test gradient accumulation and its shape guard."""
        t = Tensor.zeros((2,), name="t")
        t.accumulate(np.array([1.0, 2.0]))
        t.accumulate(np.array([1.0, 2.0]))

        np.testing.assert_array_equal(t.grad, [2.0, 4.0])
        with pytest.raises(ShapeError):
            t.accumulate(np.ones(3))

    def test_check_finite(self):
        t = Tensor(np.array([1.0, np.inf]), name="bad")

        with pytest.raises(NonFiniteError):
            t.check_finite()
