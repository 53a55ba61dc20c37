import numpy as np
import pytest

from intquant.tensor import (InstrumentedInt, IntegerViolation, KernelMath,
                             OpCounter, Tensor, TensorFormatError, rng_tensor,
                             tensor_read, tensor_write)


class TestFileFormat:
    def test_round_trip_small_real(self, tmp_path):
        t = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        path = tmp_path / "t.iptq"
        tensor_write(t, path)
        back = tensor_read(path)
        assert back.dims == (2, 2)
        assert back.dtype == "real32"
        np.testing.assert_array_equal(back.data, [1, 2, 3, 4])

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad.iptq"
        path.write_bytes(b"XXXX" + bytes([1, 0, 1, 4, 0, 0, 0]) + b"\x00" * 16)
        with pytest.raises(TensorFormatError, match="offset 0"):
            tensor_read(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "bad.iptq"
        path.write_bytes(b"IPTQ" + bytes([1, 9, 1, 1, 0, 0, 0]) + b"\x00" * 4)
        with pytest.raises(TensorFormatError, match="offset 5"):
            tensor_read(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.iptq"
        path.write_bytes(b"IPTQ" + bytes([1, 0, 1, 4, 0, 0, 0]) + b"\x00" * 7)
        with pytest.raises(TensorFormatError, match="payload"):
            tensor_read(path)

    def test_write_read_write_byte_identical_random(self, tmp_path):
        rng = np.random.default_rng(42)
        for i in range(50):
            rank = int(rng.integers(1, 4))
            dims = [int(rng.integers(1, 6)) for _ in range(rank)]
            if rng.random() < 0.5:
                t = Tensor(rng.normal(size=dims).astype(np.float32))
            else:
                t = Tensor(rng.integers(-1000, 1000, size=dims).astype(np.int32))
            p1 = tmp_path / f"a{i}.iptq"
            p2 = tmp_path / f"b{i}.iptq"
            tensor_write(t, p1)
            tensor_write(tensor_read(p1), p2)
            assert p1.read_bytes() == p2.read_bytes()

    def test_int32_round_trip(self, tmp_path):
        t = Tensor(np.array([1, -2, 3], dtype=np.int32))
        path = tmp_path / "i.iptq"
        tensor_write(t, path)
        assert tensor_read(path) == t


class TestRng:
    def test_degenerate_uniform_is_zero(self):
        t = rng_tensor(7, [4], "uniform", 0.0, 0.0)
        np.testing.assert_array_equal(t.values, np.zeros(4, dtype=np.float32))

    def test_same_seed_same_tensor(self):
        a = rng_tensor(7, [32, 8], "normal", 0.0, 1.0)
        b = rng_tensor(7, [32, 8], "normal", 0.0, 1.0)
        assert a == b

    def test_different_seed_differs(self):
        a = rng_tensor(7, [64], "normal", 0.0, 1.0)
        b = rng_tensor(8, [64], "normal", 0.0, 1.0)
        assert a != b

    def test_law_of_large_numbers(self):
        t = rng_tensor(7, [100000], "normal", 0.0, 1.0)
        assert abs(float(t.values.mean())) < 0.02

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            rng_tensor(0, [4], "uniform", 2.0, 1.0)
        with pytest.raises(ValueError):
            rng_tensor(0, [4], "normal", 0.0, -1.0)
        with pytest.raises(ValueError):
            rng_tensor(0, [0], "normal", 0.0, 1.0)


class TestInstrumentedInt:
    def test_arithmetic_counts(self):
        c = OpCounter()
        a = InstrumentedInt(5, c)
        b = InstrumentedInt(3, c)
        assert int(a + b) == 8
        assert int(a - b) == 2
        assert int(a * b) == 15
        assert int(a // b) == 1
        assert int(a >> 1) == 2
        assert int(a << 1) == 10
        assert c.adds == 2 and c.muls == 1 and c.divs == 1 and c.shifts == 2

    def test_negative_shift_is_arithmetic(self):
        c = OpCounter()
        assert int(InstrumentedInt(-16, c) >> 1) == -8
        assert int(InstrumentedInt(-16, c) >> 4) == -1

    def test_float_conversion_records_violation(self):
        c = OpCounter()
        a = InstrumentedInt(5, c)
        with pytest.raises(IntegerViolation):
            float(a)
        assert c.float_violations == 1

    def test_float_operand_records_violation(self):
        c = OpCounter()
        a = InstrumentedInt(5, c)
        with pytest.raises(IntegerViolation):
            a + 0.5
        assert c.float_violations == 1

    def test_construct_from_float_rejected(self):
        c = OpCounter()
        with pytest.raises(IntegerViolation):
            InstrumentedInt(1.5, c)
        assert c.float_violations == 1

    def test_compares_counted(self):
        c = OpCounter()
        a = InstrumentedInt(5, c)
        assert a > 3
        assert a <= 5
        assert c.compares == 2


class TestKernelMath:
    def test_float_array_rejected(self):
        km = KernelMath()
        with pytest.raises(IntegerViolation):
            km.add(np.array([1.0]), np.array([2]))
        assert km.counter.float_violations == 1

    def test_counts_deterministic(self):
        def run():
            km = KernelMath()
            x = km.asarray(np.arange(-8, 8))
            y = km.add(km.mul(x, 3), 1)
            km.sum(y)
            km.max(y)
            return km.counter.as_dict()

        assert run() == run()

    def test_negative_rshift_floor_semantics(self):
        km = KernelMath()
        out = km.rshift(np.array([-63, -1, 7], dtype=np.int64), 1)
        np.testing.assert_array_equal(out, [-32, -1, 3])

    def test_merge(self):
        a = OpCounter(adds=1, muls=2)
        b = OpCounter(adds=3, float_violations=1)
        a.merge(b)
        assert a.adds == 4 and a.muls == 2 and a.float_violations == 1

    def test_mul_overflow_guard(self):
        from intquant.tensor import KernelOverflowError
        km = KernelMath()
        big = np.array([1 << 40], dtype=np.int64)
        with pytest.raises(KernelOverflowError):
            km.mul(big, big)

    def test_lshift_overflow_guard(self):
        from intquant.tensor import KernelOverflowError
        km = KernelMath()
        with pytest.raises(KernelOverflowError):
            km.lshift(np.array([1 << 40], dtype=np.int64), 30)


def test_instrumented_int_rejects_64bit_overflow():
    from intquant.tensor import KernelOverflowError
    c = OpCounter()
    with pytest.raises(KernelOverflowError):
        InstrumentedInt(1 << 63, c)


def test_tensor_validates_dims():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2)), dtype="real64")


def test_tensor_data_is_row_major_flat():
    t = Tensor(np.array([[1, 2], [3, 4]], dtype=np.int32))
    np.testing.assert_array_equal(t.data, [1, 2, 3, 4])
