import numpy as np
import pytest

from intquant.quantize import (DegenerateRangeError, MinMaxObserver, QParams,
                               QTensor, dequantize_np, dyadic_qparams_for_range,
                               encode_dyadic_multiplier, observe,
                               qparams_from_range, quantize,
                               requant_weight_per_channel,
                               snap_scale_to_dyadic)


class TestParamsFromRange:
    def test_symmetric_unit_range(self):
        p = qparams_from_range(1.0, -1.0, 8, "asymmetric")
        assert p.scale == pytest.approx(2.0 / 255.0)
        assert p.zero_point == 128  # round-half-even of 127.5

    def test_zero_offset_range(self):
        s0 = 0.01
        p = qparams_from_range(255 * s0, 0.0, 8, "asymmetric")
        assert p.zero_point == 0
        q = quantize(np.array([255 * s0]), p)
        assert q.codes[0] == 255

    def test_degenerate_range_errors(self):
        with pytest.raises(DegenerateRangeError):
            qparams_from_range(1.0, 1.0, 8, "asymmetric")
        with pytest.raises(DegenerateRangeError):
            qparams_from_range(0.0, 0.0, 8, "symmetric")

    def test_symmetric_midpoint_zero(self):
        p = qparams_from_range(2.0, -0.5, 8, "symmetric")
        assert p.zero_point == 128
        assert p.scale == pytest.approx(4.0 / 255.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            QParams(-1.0, 0, 8, "asymmetric")
        with pytest.raises(ValueError):
            QParams(1.0, 300, 8, "asymmetric")
        with pytest.raises(ValueError):
            QParams(1.0, 0, 20, "asymmetric")


class TestQuantizeDequantize:
    def setup_method(self):
        self.p = qparams_from_range(1.0, -1.0, 8, "asymmetric")

    def test_zero_maps_to_zero_point(self):
        assert quantize(np.array([0.0]), self.p).codes[0] == 128

    def test_lower_bound_maps_to_zero_code(self):
        assert quantize(np.array([-1.0]), self.p).codes[0] == 0

    def test_saturation(self):
        assert quantize(np.array([10.0]), self.p).codes[0] == 255

    def test_round_trip_zero(self):
        q = quantize(np.array([0.0]), self.p)
        assert abs(dequantize_np(q)[0]) <= self.p.scale / 2

    def test_zero_point_codes_dequantize_to_zero(self):
        q = QTensor(np.full((3, 3), 128, dtype=np.int32), self.p)
        np.testing.assert_allclose(dequantize_np(q), 0.0)

    def test_round_trip_bound_in_range(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1.0, 1.0, size=10000)
        err = np.abs(dequantize_np(quantize(x, self.p)) - x)
        assert err.max() <= self.p.scale / 2 + 1e-12

    def test_monotone_on_sorted_input(self):
        rng = np.random.default_rng(1)
        x = np.sort(rng.uniform(-2.0, 2.0, size=5000))
        codes = quantize(x, self.p).codes
        assert np.all(np.diff(codes.astype(int)) >= 0)

    def test_codes_always_in_range(self):
        rng = np.random.default_rng(2)
        for bits in (2, 4, 8, 16):
            p = qparams_from_range(3.0, -0.7, bits, "asymmetric")
            q = quantize(rng.normal(0, 10, size=1000), p)
            assert q.codes.min() >= 0 and q.codes.max() <= p.qmax
            q.check()

    def test_per_channel_shape_mismatch(self):
        p = QParams(np.array([1.0, 1.0]), np.array([0, 0]), 8, "symmetric",
                    "per_channel", 0)
        with pytest.raises(ValueError, match="channels"):
            quantize(np.zeros((3, 4)), p)


class TestPerChannel:
    def test_per_channel_equals_per_slice(self):
        rng = np.random.default_rng(3)
        w = rng.normal(0, 0.5, size=(4, 16))
        qw = requant_weight_per_channel(w, 8)
        for ch in range(4):
            amax = np.abs(w[ch]).max()
            p = qparams_from_range(amax, -amax, 8, "symmetric")
            expect = quantize(w[ch], p)
            np.testing.assert_array_equal(qw.codes[ch], expect.codes)


class TestObserver:
    def test_single_update(self):
        o = MinMaxObserver().observe(np.array([-2.0, 3.0]))
        assert o.running_min == -2.0 and o.running_max == 3.0

    def test_monotone_envelope(self):
        o = MinMaxObserver()
        observe(o, np.array([-2.0, 3.0]))
        observe(o, np.array([-5.0, 1.0]))
        assert o.running_min == -5.0 and o.running_max == 3.0
        assert o.samples_seen == 2

    def test_order_independence(self):
        rng = np.random.default_rng(4)
        batches = [rng.normal(0, 1 + i * 0.1, size=(8, 4)) for i in range(100)]
        o_batched = MinMaxObserver()
        for b in batches:
            o_batched.observe(b)
        o_cat = MinMaxObserver().observe(np.concatenate(batches))
        assert o_batched.running_min == o_cat.running_min
        assert o_batched.running_max == o_cat.running_max

    def test_empty_tensor_is_noop(self):
        o = MinMaxObserver()
        o.observe(np.zeros((0,)))
        assert o.samples_seen == 0

    def test_merge_associative(self):
        rng = np.random.default_rng(5)
        xs = [rng.normal(size=10) for _ in range(3)]
        a = MinMaxObserver().observe(xs[0])
        b = MinMaxObserver().observe(xs[1]).observe(xs[2])
        a.merge(b)
        whole = MinMaxObserver().observe(np.concatenate(xs))
        assert a.running_min == whole.running_min
        assert a.running_max == whole.running_max

    def test_degenerate_range_widens_with_warning(self):
        o = MinMaxObserver().observe(np.full(5, 1.25))
        with pytest.warns(RuntimeWarning, match="degenerate"):
            p = o.qparams(8)
        assert float(p.scale) > 0

    def test_per_channel_observer(self):
        o = MinMaxObserver(per_channel_axis=1)
        o.observe(np.array([[1.0, -2.0], [3.0, 0.5]]))
        np.testing.assert_array_equal(o.running_min, [1.0, -2.0])
        np.testing.assert_array_equal(o.running_max, [3.0, 0.5])


class TestDyadicHelpers:
    def test_snap_scale(self):
        s, f = snap_scale_to_dyadic(0.013)
        assert s == 1.0 / 64 and f == 6

    def test_dyadic_params_cover_range(self):
        p = dyadic_qparams_for_range(-5.0, 9.0, 16)
        f = -np.log2(float(p.scale))
        assert f == int(f)
        q = quantize(np.array([-5.0, 9.0]), p)
        assert q.codes.min() >= 0 and q.codes.max() <= p.qmax
        x = dequantize_np(q)
        np.testing.assert_allclose(x, [-5.0, 9.0], atol=float(p.scale))

    def test_multiplier_encoding(self):
        m, e = encode_dyadic_multiplier(0.3)
        assert 1 << 14 <= m < 1 << 15
        assert m / (1 << e) == pytest.approx(0.3, rel=1e-4)
