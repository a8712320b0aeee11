"""Tests for scaled dot-product and multi-head attention."""

import numpy as np
import pytest

from caption_lens.core.exceptions import ConfigurationError, ContractError, DimensionError
from caption_lens.core.gradcheck import finite_diff_check
from caption_lens.core.tensor import Tensor, softmax
from caption_lens.model.attention import (
    MultiHeadParams,
    attention_weights,
    causal_mask,
    head_weights,
    multi_head,
    scaled_dot_product,
)
from caption_lens.model.params import ModelParams


def _heads(d: int, heads: int, seed: int = 0) -> MultiHeadParams:
    return MultiHeadParams.create(ModelParams(), "att", d, heads, np.random.default_rng(seed))


class TestScaledDotProduct:
    def test_causal_mask(self):
        np.testing.assert_array_equal(
            causal_mask(3),
            [[True, False, False], [True, True, False], [True, True, True]],
        )
        with pytest.raises(ContractError):
            causal_mask(0)

    def test_masked_positions_get_zero_weight(self, rng):
        q = Tensor(rng.normal(0.0, 1.0, (4, 6)))
        weights = attention_weights(q, q, causal_mask(4)).data

        np.testing.assert_array_equal(np.triu(weights, k=1), np.zeros((4, 4)))
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones(4))
        assert weights[0, 0] == pytest.approx(1.0)

    def test_rows_sum_to_one_over_random_draws(self):
        rng = np.random.default_rng(3)

        for _ in range(1000):
            n_q, n_k, width = (int(v) for v in rng.integers(1, 7, 3))
            scale = 10.0 ** rng.uniform(-2.0, 2.0)
            q = Tensor(rng.normal(0.0, scale, (n_q, width)))
            k = Tensor(rng.normal(0.0, scale, (n_k, width)))
            mask = rng.random((n_q, n_k)) < 0.6
            mask[np.arange(n_q), rng.integers(0, n_k, n_q)] = True

            weights = attention_weights(q, k, mask).data
            rows = softmax(Tensor(rng.normal(0.0, 10.0 * scale, (n_q, n_k)))).data

            assert np.all(np.abs(weights.sum(axis=-1) - 1.0) <= 1e-9)
            assert np.all(weights[~mask] == 0.0)
            assert np.all(np.abs(rows.sum(axis=-1) - 1.0) <= 1e-9)

    def test_scaling_by_key_width(self):
        """Two keys whose scores differ by sqrt(d) get weights in ratio e."""
        q = Tensor(np.ones((1, 4)))
        k = Tensor(np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]) * 2.0)
        weights = attention_weights(q, k).data[0]
        assert weights[0] / weights[1] == pytest.approx(np.e)

    def test_rejects_row_without_keys(self):
        q = Tensor(np.ones((2, 3)))
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ContractError, match="no allowed key"):
            attention_weights(q, q, mask)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            attention_weights(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
        with pytest.raises(DimensionError):
            scaled_dot_product(
                Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))
            )
        with pytest.raises(DimensionError):
            attention_weights(
                Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), np.ones((3, 3), dtype=bool)
            )


class TestMultiHead:
    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigurationError):
            _heads(6, 4)

    def test_single_identity_head_matches_scaled_dot_product(self, rng):
        eye = np.eye(5)
        params = MultiHeadParams(
            w_q=Tensor(eye), w_k=Tensor(eye), w_v=Tensor(eye), w_o=Tensor(eye), heads=1
        )
        q = Tensor(rng.normal(0.0, 1.0, (3, 5)))
        kv = Tensor(rng.normal(0.0, 1.0, (4, 5)))

        np.testing.assert_allclose(
            multi_head(q, kv, kv, params).data,
            scaled_dot_product(q, kv, kv).data,
            atol=1e-12,
        )

    def test_output_and_head_shapes(self, rng):
        params = _heads(8, 2)
        q = Tensor(rng.normal(0.0, 1.0, (3, 8)))
        kv = Tensor(rng.normal(0.0, 1.0, (5, 8)))

        assert multi_head(q, kv, kv, params).shape == (3, 8)
        weights = head_weights(q, kv, params).data
        assert weights.shape == (2, 3, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones((2, 3)))

    def test_self_attention_is_permutation_equivariant(self, rng):
        params = _heads(8, 4)
        x = rng.normal(0.0, 1.0, (5, 8))
        order = np.array([3, 0, 4, 1, 2])

        out = multi_head(Tensor(x), Tensor(x), Tensor(x), params).data
        permuted = multi_head(
            Tensor(x[order]), Tensor(x[order]), Tensor(x[order]), params
        ).data

        np.testing.assert_allclose(permuted, out[order], atol=1e-12)

    def test_wrong_width_rejected(self, rng):
        params = _heads(8, 2)
        with pytest.raises(DimensionError):
            multi_head(
                Tensor(np.ones((2, 6))), Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), params
            )

    @pytest.mark.gradcheck
    def test_gradients_with_causal_mask(self, rng):
        params = _heads(6, 3, seed=2)
        x = Tensor(rng.normal(0.0, 1.0, (4, 6)), requires_grad=True)
        weights = Tensor(rng.normal(0.0, 1.0, (4, 6)))

        report = finite_diff_check(
            lambda: (multi_head(x, x, x, params, causal_mask(4)) * weights).sum(),
            {
                "x": x,
                "w_q": params.w_q,
                "w_k": params.w_k,
                "w_v": params.w_v,
                "w_o": params.w_o,
            },
        )

        assert report.passed, report.failures
