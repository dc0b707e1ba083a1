import numpy as np
import pytest

from quantdiff.errors import ParameterError, StateError
from quantdiff.network import ForwardRecord, model_forward
from quantdiff.quantizer import (QuantConfig, QuantizerParams, init_act_quantizer,
                                 init_scale_minmax, init_scale_mse, quantize_dequantize,
                                 quantize_model, round_half_away, symmetric_bounds)
from quantdiff.rng import Rng


def sym4():
    return QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=-8, c_max=7)


class TestRounding:
    def test_half_away_from_zero(self):
        x = np.array([2.5, -2.5, 0.5, -0.5, 1.4, -1.4, 0.0])
        assert np.array_equal(round_half_away(x), [3.0, -3.0, 1.0, -1.0, 1.0, -1.0, 0.0])


class TestQuantizeDequantize:
    def test_basic_arithmetic(self):
        p = sym4()
        assert np.isclose(quantize_dequantize(np.float32([0.34]), p)[0], 0.3)

    def test_clip_branch(self):
        p = sym4()
        assert np.isclose(quantize_dequantize(np.float32([5.0]), p)[0], 0.7)
        assert np.isclose(quantize_dequantize(np.float32([-5.0]), p)[0], -0.8)

    def test_fixed_points(self):
        p = sym4()
        grid = 0.1 * np.arange(-8, 8, dtype=np.float32)
        assert np.array_equal(quantize_dequantize(grid, p), grid)

    def test_idempotence_randomized(self):
        p = QuantizerParams(bits=6, scale=np.asarray(0.037), c_min=-32, c_max=31)
        w = (Rng(0).normal((100000,)) * 2.0).astype(np.float32)
        once = quantize_dequantize(w, p)
        assert np.array_equal(quantize_dequantize(once, p), once)

    def test_error_bound_in_range(self):
        """|w_hat - w| <= s/2 whenever |w/s| <= c_max."""
        p = sym4()
        w = (Rng(1).uniform((100000,), dtype=np.float64) * 1.4 - 0.7).astype(np.float32)
        assert np.all(np.abs(w / float(p.scale)) <= p.c_max)
        err = np.abs(quantize_dequantize(w, p) - w)
        assert err.max() <= float(p.scale) / 2 + 1e-7

    def test_exhaustive_all_4bit_codes(self):
        """Every representable 4-bit code round-trips exactly, all scales tested."""
        for s in (0.025, 0.1, 0.33, 1.0, 7.5):
            p = QuantizerParams(bits=4, scale=np.asarray(s), c_min=-8, c_max=7)
            codes = np.arange(-8, 8, dtype=np.float32)
            grid = (codes * np.float32(s)).astype(np.float32)
            assert np.array_equal(quantize_dequantize(grid, p), grid)

    def test_sign_symmetry_on_interior_domain(self):
        p = sym4()
        w = (Rng(2).normal((100000,)) * 0.3).astype(np.float32)
        interior = np.abs(round_half_away(w / float(p.scale))) <= min(-p.c_min, p.c_max)
        w = w[interior]
        assert np.array_equal(quantize_dequantize(-w, p), -quantize_dequantize(w, p))

    def test_per_channel_scale_broadcast(self):
        p = QuantizerParams(bits=4, scale=np.asarray([0.1, 0.2], dtype=np.float32),
                            c_min=-8, c_max=7)
        w = np.float32([[0.34, -0.26], [0.34, -0.26]])
        out = quantize_dequantize(w, p)
        assert np.allclose(out, [[0.3, -0.3], [0.4, -0.2]])

    def test_asymmetric_zero_offset(self):
        p = QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=0, c_max=15,
                            zero_offset=np.asarray(5))
        # representable range is [-0.5, 1.0]; zero is exact
        assert quantize_dequantize(np.float32([0.0]), p)[0] == 0.0
        assert np.isclose(quantize_dequantize(np.float32([0.93]), p)[0], 0.9)
        assert np.isclose(quantize_dequantize(np.float32([2.0]), p)[0], 1.0)
        assert np.isclose(quantize_dequantize(np.float32([-2.0]), p)[0], -0.5)

    def test_adaround_saturation(self):
        w = np.float32([0.34, -0.26, 0.71, 0.0])
        up = QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=-8, c_max=7,
                             mode="adaround", v=np.full(4, 30.0, dtype=np.float32))
        down = QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=-8, c_max=7,
                               mode="adaround", v=np.full(4, -30.0, dtype=np.float32))
        floor = np.floor(w / 0.1)
        assert np.allclose(quantize_dequantize(w, up),
                           0.1 * np.clip(floor + 1, -8, 7), atol=1e-6)
        assert np.allclose(quantize_dequantize(w, down),
                           0.1 * np.clip(floor, -8, 7), atol=1e-6)

    def test_adaround_hard_equals_sign_rule(self):
        w = Rng(3).normal((32,)) * 0.5
        v = Rng(4).normal((32,))
        soft = QuantizerParams(bits=4, scale=np.asarray(0.07), c_min=-8, c_max=7,
                               mode="adaround", v=v.copy(), hard=False)
        hard = QuantizerParams(bits=4, scale=np.asarray(0.07), c_min=-8, c_max=7,
                               mode="adaround", v=v.copy(), hard=True)
        expect = 0.07 * np.clip(np.floor(w / 0.07) + (v >= 0), -8, 7)
        assert np.allclose(quantize_dequantize(w, hard), expect, atol=1e-6)
        assert not np.array_equal(quantize_dequantize(w, soft), quantize_dequantize(w, hard))

    def test_invalid_params_rejected(self):
        with pytest.raises(ParameterError):
            QuantizerParams(bits=1, scale=np.asarray(0.1), c_min=-1, c_max=0)
        with pytest.raises(ParameterError):
            QuantizerParams(bits=4, scale=np.asarray(0.0), c_min=-8, c_max=7)
        with pytest.raises(ParameterError):
            QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=7, c_max=-8)
        p = QuantizerParams(bits=4, scale=np.asarray(0.1), c_min=-8, c_max=7,
                            mode="adaround", v=np.zeros(3, dtype=np.float32))
        with pytest.raises(ParameterError):
            quantize_dequantize(np.zeros(4, dtype=np.float32), p)


class TestScaleInit:
    def test_minmax_dense_unit_range(self):
        w = np.linspace(-1, 1, 101).astype(np.float32)
        q = init_scale_minmax(w, 4, "per_tensor")
        assert np.isclose(float(q.scale), 1.0 / 7.0)
        assert (q.c_min, q.c_max) == symmetric_bounds(4) == (-8, 7)

    def test_minmax_all_zero_sentinel(self):
        q = init_scale_minmax(np.zeros((3, 4), dtype=np.float32), 4)
        assert np.all(q.scale == 1.0)
        assert np.all(quantize_dequantize(np.zeros((3, 4), dtype=np.float32), q) == 0.0)

    def test_minmax_per_channel(self):
        w = np.float32([[0.5, -1.0], [2.0, 1.0]])
        q = init_scale_minmax(w, 4, "per_channel")
        assert np.allclose(q.scale, [1.0 / 7.0, 2.0 / 7.0])

    def test_mse_single_candidate_equals_minmax(self):
        w = Rng(5).normal((64,))
        a = init_scale_mse(w, 3, "per_tensor", 1)
        b = init_scale_minmax(w, 3, "per_tensor")
        assert float(a.scale) == float(b.scale)

    def test_mse_never_worse_than_minmax(self):
        for seed in range(5):
            w = Rng(seed).normal((128,)) * (0.1 + seed)
            mm = init_scale_minmax(w, 4, "per_tensor")
            ms = init_scale_mse(w, 4, "per_tensor", 80)
            e_mm = np.sum((w - quantize_dequantize(w, mm)) ** 2)
            e_ms = np.sum((w - quantize_dequantize(w, ms)) ** 2)
            assert e_ms <= e_mm + 1e-12

    def test_mse_matches_bruteforce_oracle(self):
        """16 elements, 2 bits, 80 candidates: independent scalar-loop oracle."""
        w = (Rng(3).normal((16,)) * 0.7).astype(np.float32)
        got = init_scale_mse(w, 2, "per_tensor", 80)
        c_min, c_max = symmetric_bounds(2)
        s_base = float(np.abs(w).max()) / c_max
        best_err, best_s = None, None
        for i in range(80):
            s = s_base * (1.0 - i / 160.0)
            err = 0.0
            for wi in w.astype(np.float64):  # scalar loop, float64 arithmetic
                code = np.floor(abs(wi / s) + 0.5) * np.sign(wi / s)
                code = min(max(code, c_min), c_max)
                err += (wi - s * code) ** 2
            if best_err is None or err < best_err:
                best_err, best_s = err, s
        assert np.isclose(float(got.scale), best_s, rtol=1e-6)

    def test_mse_per_channel_independent(self):
        w = np.vstack([Rng(6).normal((32,)) * 0.2, Rng(7).normal((32,)) * 3.0]).astype(np.float32)
        q = init_scale_mse(w, 4, "per_channel", 40)
        q0 = init_scale_mse(w[0], 4, "per_tensor", 40)
        q1 = init_scale_mse(w[1], 4, "per_tensor", 40)
        assert np.isclose(q.scale[0], float(q0.scale))
        assert np.isclose(q.scale[1], float(q1.scale))

    def test_empty_tensor_rejected(self):
        with pytest.raises(ParameterError):
            init_scale_minmax(np.zeros((0,), dtype=np.float32), 4)

    def test_monotone_precision_minmax(self):
        """More bits never increase round-trip MSE (same scale rule)."""
        w = Rng(8).normal((64, 64))
        for rule in (init_scale_minmax, init_scale_mse):
            prev = None
            for bits in range(2, 9):
                q = rule(w, bits, "per_channel")
                err = float(np.sum((w - quantize_dequantize(w, q)) ** 2))
                if prev is not None:
                    assert err <= prev + 1e-10, f"{rule.__name__} bits={bits}"
                prev = err

    def test_act_quantizer_covers_range_and_zero(self):
        q = init_act_quantizer(-1.3, 2.7, 8)
        assert q.c_min == 0 and q.c_max == 255
        assert quantize_dequantize(np.float32([0.0]), q)[0] == 0.0
        x = np.linspace(-1.3, 2.7, 1000).astype(np.float32)
        err = np.abs(quantize_dequantize(x, q) - x)
        assert err.max() <= float(q.scale)  # within one step everywhere

    def test_act_quantizer_degenerate_range(self):
        q = init_act_quantizer(0.0, 0.0, 8)
        assert float(q.scale) == 1.0


class TestQuantizedModel:
    def test_bypass_is_bit_identical(self, toy_model):
        qm = quantize_model(toy_model, QuantConfig(bits_w=32, bits_a=32))
        x = Rng(9).normal((16, 2))
        assert np.array_equal(qm.predict(x, 500), model_forward(toy_model, x, 500))

    def test_more_bits_less_error(self, toy_model):
        x = Rng(10).normal((64, 2))
        ref = model_forward(toy_model, x, 500)
        errs = {}
        for bits in (8, 4):
            qm = quantize_model(toy_model, QuantConfig(bits_w=bits, bits_a=32))
            errs[bits] = float(np.mean((qm.predict(x, 500) - ref) ** 2))
        assert 0 < errs[8] < errs[4]

    def test_per_layer_output_mse_ordering(self, toy_model):
        """W8 beats W4 on every layer's output, not just end to end."""
        x = Rng(11).normal((64, 2))
        recs = {}
        for bits in (8, 4, 32):
            rec = ForwardRecord()
            qm = quantize_model(toy_model, QuantConfig(bits_w=bits, bits_a=32))
            qm.forward(x, 500, record=rec)
            recs[bits] = rec
        for name in toy_model.layers():
            ref = recs[32].layer_pre[name]
            e8 = float(np.mean((recs[8].layer_pre[name] - ref) ** 2))
            e4 = float(np.mean((recs[4].layer_pre[name] - ref) ** 2))
            assert e8 <= e4, name

    def test_exempt_layer_uses_raw_weights(self, toy_model):
        cfg = QuantConfig(bits_w=4, bits_a=32, layer_overrides={"block1.fc2": "exempt"})
        qm = quantize_model(toy_model, cfg)
        assert qm.weight_q["block1.fc2"] is None
        assert np.array_equal(qm.effective_weight("block1.fc2"), toy_model.blocks[1].fc2.w)
        assert not np.array_equal(qm.effective_weight("block1.fc1"), toy_model.blocks[1].fc1.w)
        # activation-record equality through the exempt layer on equal inputs
        x = Rng(12).normal((8, 2))
        rec_q, rec_fp = ForwardRecord(), ForwardRecord()
        qm.forward(x, 100, record=rec_q)
        model_forward(toy_model, x, 100, record=rec_fp)
        z_q = rec_q.layer_inputs["block1.fc2"]
        expect = z_q @ toy_model.blocks[1].fc2.w.T + toy_model.blocks[1].fc2.b
        assert np.allclose(rec_q.layer_pre["block1.fc2"], expect, atol=1e-6)

    def test_override_bits(self, toy_model):
        cfg = QuantConfig(bits_w=4, bits_a=32, layer_overrides={"output_proj": 8})
        qm = quantize_model(toy_model, cfg)
        assert qm.weight_q["output_proj"].bits == 8
        assert qm.weight_q["input_proj"].bits == 4

    def test_unknown_override_rejected(self, toy_model):
        cfg = QuantConfig(layer_overrides={"block9.fc1": "exempt"})
        with pytest.raises(ParameterError, match="block9.fc1"):
            quantize_model(toy_model, cfg)

    def test_frozen_model_rejects_mutation(self, toy_model):
        qm = quantize_model(toy_model, QuantConfig(bits_w=8, bits_a=32))
        qm.freeze()
        with pytest.raises(StateError):
            qm.invalidate()

    def test_forward_is_pure(self, toy_model):
        qm = quantize_model(toy_model, QuantConfig(bits_w=4, bits_a=32))
        x = Rng(13).normal((8, 2))
        assert np.array_equal(qm.predict(x, 77), qm.predict(x, 77))

    def test_uninitialized_quantizer_is_state_error(self, toy_model):
        from quantdiff.quantizer import QuantizedModel
        cfg = QuantConfig(bits_w=4, bits_a=32)
        qm = QuantizedModel(toy_model.copy(), cfg,
                            {name: None for name in toy_model.layers()},
                            {name: None for name in toy_model.layers()})
        with pytest.raises(StateError, match="not initialized"):
            qm.predict(Rng(14).normal((2, 2)), 5)
