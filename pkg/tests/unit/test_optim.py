"""Unit tests for the Adam optimizer."""

import numpy as np
import pytest

from ce_vae.exceptions import NonFiniteError
from ce_vae.nn import Adam, Tensor


class TestAdam:
    """Test bias-corrected Adam updates."""

    @pytest.fixture
    def param(self):
        return Tensor(np.array([1.0, -2.0, 0.5]), name="p")

    def test_first_step_moves_by_learning_rate(self, param):
        """Test that the first step with a constant gradient moves each entry by ~lr."""
        optimizer = Adam([param], lr=1e-3)
        before = param.data.copy()
        param.accumulate(np.array([3.0, -0.2, 7.0]))

        optimizer.step()

        expected = 1e-3 * np.sign([3.0, -0.2, 7.0])
        np.testing.assert_allclose(before - param.data, expected, rtol=1e-6)

    def test_zero_gradient_leaves_parameters(self, param):
        """Test that a zero gradient does not move the parameters."""
        optimizer = Adam([param])
        before = param.data.copy()
        param.accumulate(np.zeros(3))

        optimizer.step()

        np.testing.assert_array_equal(param.data, before)

    def test_two_steps_match_hand_trace(self, param):
        """Test two steps with different gradients against the Adam recurrences."""
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g1 = np.array([1.0, 2.0, -1.0])
        g2 = np.array([0.5, -1.0, 3.0])
        optimizer = Adam([param], lr=lr, beta1=b1, beta2=b2, eps=eps)
        expected = param.data.copy()

        # Execute
        param.accumulate(g1)
        optimizer.step()
        optimizer.zero_grad()
        param.accumulate(g2)
        optimizer.step()

        # Assert - replay the recurrences by hand
        m = (1 - b1) * g1
        v = (1 - b2) * g1**2
        expected -= lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2**2
        expected -= lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        np.testing.assert_allclose(param.data, expected, rtol=1e-12)

    def test_skips_frozen_tensors(self, param):
        """Test that tensors without requires_grad are not optimized."""
        frozen = Tensor(np.ones(2), name="buffer", requires_grad=False)
        optimizer = Adam([param, frozen])
        frozen.grad = np.ones(2)

        optimizer.step()

        assert optimizer.params == [param]
        np.testing.assert_array_equal(frozen.data, np.ones(2))

    def test_non_finite_gradient_aborts_before_update(self, param):
        """Test that a NaN gradient raises and leaves every parameter untouched."""
        other = Tensor(np.ones(2), name="other")
        optimizer = Adam([other, param])
        other.accumulate(np.ones(2))
        param.accumulate(np.array([np.nan, 0.0, 0.0]))

        with pytest.raises(NonFiniteError) as exc_info:
            optimizer.step()

        assert "'p'" in str(exc_info.value)
        np.testing.assert_array_equal(other.data, np.ones(2))
        assert optimizer.state.step == 0
