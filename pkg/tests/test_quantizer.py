import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resquant import (
    Conv2D,
    Dense,
    QuantConfig,
    compute_scales,
    dequantize,
    expand,
    fuse_kernels,
    make_structured_mask,
    quantize,
)
from resquant.bounds import weight_bound
from resquant.model import apply_layer
from resquant.quantizer import kept_count


class TestScales:
    def test_three_bit_row(self):
        assert compute_scales([[1.0, -2.0, 0.5]], QuantConfig(3))[0] == pytest.approx(2 / 3)

    def test_zero_row(self):
        assert compute_scales([[0.0, 0.0]], QuantConfig(8)).tolist() == [1.0]

    def test_ternary(self):
        assert compute_scales([[0.9, -0.9]], QuantConfig(2))[0] == pytest.approx(0.9)

    def test_conv_channels(self, rng):
        W = rng.standard_normal((3, 2, 3, 3))
        s = compute_scales(W, QuantConfig(4))
        np.testing.assert_allclose(s, np.abs(W).reshape(3, -1).max(axis=1) / 7)

    @pytest.mark.parametrize("bits", [1, 17])
    def test_bits_range(self, bits):
        with pytest.raises(ValueError):
            QuantConfig(bits)


class TestQuantize:
    def test_half_rounds_away_from_zero(self):
        q = quantize([[1.0, -2.0, 0.5]], [2 / 3], QuantConfig(3))
        assert q.values.tolist() == [[2, -3, 1]]
        assert q.values.dtype == np.int32

    def test_zero_maps_to_zero(self):
        assert quantize([[0.0, 0.0]], [0.37], QuantConfig(5)).values.tolist() == [[0, 0]]

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(1e-6, 1e6), bits=st.integers(2, 16))
    def test_max_maps_to_top_code(self, x, bits):
        cfg = QuantConfig(bits)
        q = quantize([[x]], compute_scales([[x]], cfg), cfg)
        assert q.values[0, 0] == cfg.qmax

    def test_symmetric_clamp(self):
        q = quantize([[100.0, -100.0]], [1.0], QuantConfig(3))
        assert q.values.tolist() == [[3, -3]]

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.inf])
    def test_non_positive_scale(self, bad):
        with pytest.raises(ValueError):
            quantize([[1.0]], [bad], QuantConfig(8))


class TestDequantize:
    def test_lattice_points_exact(self, rng):
        s = np.array([0.25, 0.1, 3.0])
        codes = rng.integers(-7, 8, (3, 5))
        W = codes * s[:, None]
        q = quantize(W, s, QuantConfig(4))
        assert np.array_equal(dequantize(q), W)

    def test_zero_codes(self):
        q = quantize(np.zeros((2, 2)), [1.0, 2.0], QuantConfig(4))
        assert not np.any(dequantize(q))

    def test_rounding_error_at_most_half_step(self, rng):
        W = rng.standard_normal((16, 32))
        cfg = QuantConfig(8)
        s = compute_scales(W, cfg)
        err = np.abs(W - dequantize(quantize(W, s, cfg))).max(axis=1)
        assert np.all(err <= s / 2 * (1 + 1e-12))


class TestExpand:
    def test_first_order_is_plain_quantization(self, rng):
        W = rng.standard_normal((5, 7))
        cfg = QuantConfig(4)
        plain = dequantize(quantize(W, compute_scales(W, cfg), cfg))
        assert np.array_equal(expand(W, cfg, 1).partial_sum(), plain)

    def test_hand_two_orders(self):
        exp = expand([[0.7, 0.2]], QuantConfig(2), 2)
        assert exp.terms[0].scales[0] == pytest.approx(0.7)
        np.testing.assert_allclose(exp.terms[0].weight, [[0.7, 0.0]])
        assert exp.terms[1].scales[0] == pytest.approx(0.2)
        np.testing.assert_allclose(exp.terms[1].weight, [[0.0, 0.2]])
        np.testing.assert_allclose(exp.partial_sum(), [[0.7, 0.2]], atol=1e-15)

    def test_error_bound_every_order(self, rng):
        W = rng.standard_normal((64, 64))
        exp = expand(W, QuantConfig(4), 5)
        for k in range(1, 6):
            err = np.abs(W - exp.partial_sum(k)).max(axis=1)
            assert np.all(err <= weight_bound(exp, k))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), bits=st.integers(2, 8))
    def test_monotone_refinement(self, seed, bits):
        W = np.random.default_rng(seed).standard_normal((6, 9))
        exp = expand(W, QuantConfig(bits), 5)
        prev = np.abs(W)
        for k in range(1, 6):
            cur = np.abs(W - exp.partial_sum(k))
            assert np.all(cur <= prev)
            prev = cur

    def test_representable_weights_terminate(self):
        W = np.array([[3.0, -1.0, 2.0], [0.75, 0.25, -0.5]])
        exp = expand(W, QuantConfig(3), 4)
        for term in exp.terms[1:]:
            assert not np.any(term.weight)
        assert np.array_equal(exp.partial_sum(), W)

    def test_masks_from_order(self, rng):
        exp = expand(rng.standard_normal((4, 3)), QuantConfig(4), 4, gamma=0.5, from_order=3)
        assert [t.mask is None for t in exp.terms] == [True, True, False, False]
        assert all(t.mask.kept == 2 for t in exp.terms[2:])

    def test_from_order_beyond_k_disables_masks(self, rng):
        exp = expand(rng.standard_normal((4, 3)), QuantConfig(4), 3, gamma=0.5, from_order=4)
        assert all(t.mask is None for t in exp.terms)

    def test_masked_term_is_what_gets_subtracted(self, rng):
        W = rng.standard_normal((4, 6))
        exp = expand(W, QuantConfig(3), 2, gamma=0.25)
        pruned = exp.terms[1].mask.pruned_rows
        np.testing.assert_array_equal((W - exp.partial_sum(2))[pruned], (W - exp.partial_sum(1))[pruned])

    @pytest.mark.parametrize("kwargs", [dict(K=0), dict(K=2, gamma=0.0), dict(K=2, gamma=1.5),
                                        dict(K=2, from_order=1)])
    def test_rejected_arguments(self, kwargs):
        with pytest.raises(ValueError):
            expand(np.eye(2), QuantConfig(4), **kwargs)


class TestMask:
    def test_full(self, rng):
        assert make_structured_mask(rng.standard_normal((5, 2)), 1.0).kept == 5

    def test_sort(self):
        err = np.array([[3.0], [1.0], [2.0]])
        assert make_structured_mask(err, 1 / 3).kept_rows.tolist() == [True, False, False]

    def test_tie_goes_to_lower_index(self):
        err = np.array([[1.0], [1.0], [5.0]])
        assert make_structured_mask(err, 2 / 3).kept_rows.tolist() == [True, False, True]

    @settings(max_examples=100, deadline=None)
    @given(rows=st.integers(1, 50), gamma=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
    def test_budget_is_ceil(self, rows, gamma, seed):
        err = np.random.default_rng(seed).standard_normal((rows, 3))
        mask = make_structured_mask(err, gamma)
        assert mask.kept == kept_count(gamma, rows)
        assert mask.kept == min(rows, int(np.ceil(round(gamma * rows, 9))))

    def test_kept_rows_have_largest_norms(self, rng):
        err = rng.standard_normal((10, 4))
        mask = make_structured_mask(err, 0.3)
        norms = np.linalg.norm(err, axis=1)
        assert norms[mask.kept_rows].min() >= norms[mask.pruned_rows].max()


class TestFuse:
    def test_first_order_unchanged(self, rng):
        layer = Dense(rng.standard_normal((3, 4)), rng.standard_normal(3))
        exp = expand(layer.weight, QuantConfig(8), 1)
        fused = fuse_kernels(exp, layer)
        assert fused.summation.tolist() == [0, 1, 2]
        np.testing.assert_array_equal(fused.layer.weight, exp.partial_sum())
        np.testing.assert_array_equal(fused.layer.bias, layer.bias)

    def test_two_orders_dense(self, rng):
        layer = Dense(rng.standard_normal((2, 2)), rng.standard_normal(2))
        exp = expand(layer.weight, QuantConfig(3), 2)
        fused = fuse_kernels(exp, layer)
        assert fused.layer.weight.shape == (4, 2)
        xs = rng.standard_normal((6, 2))
        halves = fused.layer.weight[:2] + fused.layer.weight[2:]
        np.testing.assert_allclose(fused.forward_batch(xs), xs @ halves.T + layer.bias, atol=1e-12)

    def test_masked_rows_dropped(self, rng):
        layer = Dense(rng.standard_normal((2, 3)))
        exp = expand(layer.weight, QuantConfig(4), 3, gamma=0.5, from_order=3)
        fused = fuse_kernels(exp, layer)
        assert fused.layer.weight.shape[0] == 5

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        layer = Conv2D(rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4), 2, "same")
        exp = expand(layer.weight, QuantConfig(3), 3, gamma=0.5)
        fused = fuse_kernels(exp, layer)
        xs = rng.standard_normal((3, 2, 7, 7))
        per_order = [apply_layer(Conv2D(w, None, 2, "same"), xs) for w in exp.weights()]
        ref = sum(per_order) + layer.bias[None, :, None, None]
        np.testing.assert_allclose(fused.forward_batch(xs), ref, atol=1e-9)
