"""Dense tensor container, deterministic RNG, binary tensor file format,
and instrumented integer arithmetic for the kernel path.

The instrumentation exists to make "integer-only" a checkable claim: every
arithmetic operation on the kernel path flows through a :class:`KernelMath`
facade (arrays) or :class:`InstrumentedInt` (scalars), both of which count
operations and record a violation the moment a floating-point value shows up.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"IPTQ"
FORMAT_VERSION = 1

_DTYPE_BY_CODE = {0: "real32", 1: "int32"}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}
_NP_BY_DTYPE = {"real32": np.dtype("<f4"), "int32": np.dtype("<i4")}

INT64_MAX = np.iinfo(np.int64).max


class TensorFormatError(ValueError):
    """Raised when a tensor file does not conform to the on-disk format."""


class IntegerViolation(RuntimeError):
    """A floating-point value reached the integer-only kernel path."""


class KernelOverflowError(OverflowError):
    """An intermediate on the integer kernel path would exceed 64 signed bits."""


class Tensor:
    """Dense n-dimensional array, row-major, dtype real32 or int32.

    Instances are immutable after construction and safe to share across
    threads.
    """

    __slots__ = ("_values", "dtype")

    def __init__(self, values, dtype: str | None = None):
        if dtype is None:
            arr = np.asarray(values)
            dtype = "int32" if np.issubdtype(arr.dtype, np.integer) else "real32"
        if dtype not in _NP_BY_DTYPE:
            raise ValueError(f"unsupported dtype {dtype!r}")
        arr = np.ascontiguousarray(values, dtype=_NP_BY_DTYPE[dtype])
        if arr.ndim < 1:
            arr = arr.reshape(1)
        if any(e < 1 for e in arr.shape):
            raise ValueError(f"every extent must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self._values = arr
        self.dtype = dtype

    @property
    def dims(self) -> tuple[int, ...]:
        return self._values.shape

    @property
    def values(self) -> np.ndarray:
        """Shaped read-only view of the elements."""
        return self._values

    @property
    def data(self) -> np.ndarray:
        """Flat row-major element buffer."""
        return self._values.reshape(-1)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Tensor)
            and self.dtype == other.dtype
            and self.dims == other.dims
            and bool(np.array_equal(self._values, other._values))
        )

    def __repr__(self) -> str:
        return f"Tensor(dims={list(self.dims)}, dtype={self.dtype!r})"


def tensor_write(t: Tensor, path) -> None:
    """Write ``t`` in the binary tensor format (little-endian, no padding)."""
    header = bytearray()
    header += MAGIC
    header += struct.pack("<BBB", FORMAT_VERSION, _CODE_BY_DTYPE[t.dtype], len(t.dims))
    for extent in t.dims:
        header += struct.pack("<I", extent)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(t.data.astype(_NP_BY_DTYPE[t.dtype]).tobytes())


def tensor_read(path) -> Tensor:
    """Read a tensor file, reproducing dims/dtype/data bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7:
        raise TensorFormatError(f"truncated header at byte offset {len(blob)}")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r} at byte offset 0")
    if blob[4] != FORMAT_VERSION:
        raise TensorFormatError(f"unknown format version {blob[4]} at byte offset 4")
    if blob[5] not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"unknown dtype code {blob[5]} at byte offset 5")
    dtype = _DTYPE_BY_CODE[blob[5]]
    rank = blob[6]
    if rank < 1:
        raise TensorFormatError("rank must be >= 1 at byte offset 6")
    offset = 7
    if len(blob) < offset + 4 * rank:
        raise TensorFormatError(f"truncated extents at byte offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    if any(e < 1 for e in dims):
        raise TensorFormatError(f"zero extent in dims at byte offset {offset - 4 * rank}")
    count = int(np.prod(dims, dtype=np.int64))
    need = count * 4
    if len(blob) - offset != need:
        raise TensorFormatError(
            f"payload is {len(blob) - offset} bytes, expected {need},"
            f" at byte offset {offset}"
        )
    flat = np.frombuffer(blob, dtype=_NP_BY_DTYPE[dtype], count=count, offset=offset)
    return Tensor(flat.reshape(dims), dtype=dtype)


def rng_tensor(seed: int, dims, dist: str, *args) -> Tensor:
    """Deterministic random tensor.

    The generator is PCG64 (numpy's default 128-bit LCG with output
    permutation), seeded directly; the same (seed, dims, dist) triple always
    yields the same tensor.

    dist is either ``"uniform"`` with bounds (a, b), a <= b, or ``"normal"``
    with (mu, sigma), sigma >= 0.
    """
    gen = np.random.Generator(np.random.PCG64(seed))
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError(f"every extent must be >= 1, got {dims}")
    if dist == "uniform":
        a, b = args
        if a > b:
            raise ValueError(f"uniform bounds must satisfy a <= b, got ({a}, {b})")
        vals = gen.uniform(a, b, size=dims) if a < b else np.full(dims, float(a))
    elif dist == "normal":
        mu, sigma = args
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        vals = gen.normal(mu, sigma, size=dims)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return Tensor(vals, dtype="real32")


@dataclass
class OpCounter:
    """Integer-operation counts for one measurement scope.

    Counts are monotonically nondecreasing within a scope; parallel scopes
    keep per-thread counters and merge at the end.
    """

    adds: int = 0
    muls: int = 0
    divs: int = 0
    shifts: int = 0
    compares: int = 0
    float_violations: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        self.adds += other.adds
        self.muls += other.muls
        self.divs += other.divs
        self.shifts += other.shifts
        self.compares += other.compares
        self.float_violations += other.float_violations
        return self

    def total(self) -> int:
        return self.adds + self.muls + self.divs + self.shifts + self.compares

    def as_dict(self) -> dict:
        return {
            "adds": self.adds,
            "muls": self.muls,
            "divs": self.divs,
            "shifts": self.shifts,
            "compares": self.compares,
            "float_violations": self.float_violations,
            "total": self.total(),
        }


class InstrumentedInt:
    """64-bit signed integer whose arithmetic feeds an :class:`OpCounter`.

    Any attempt to convert to or from a real number on this path records a
    violation and raises :class:`IntegerViolation`.
    """

    __slots__ = ("value", "counter")

    def __init__(self, value, counter: OpCounter):
        if isinstance(value, InstrumentedInt):
            value = value.value
        if isinstance(value, float) or isinstance(value, np.floating):
            counter.float_violations += 1
            raise IntegerViolation("constructed InstrumentedInt from a real number")
        value = int(value)
        if not (-(1 << 63) <= value < (1 << 63)):
            raise KernelOverflowError(f"{value} exceeds 64-bit signed range")
        self.value = value
        self.counter = counter

    def _coerce(self, other) -> int:
        if isinstance(other, InstrumentedInt):
            return other.value
        if isinstance(other, (float, np.floating)):
            self.counter.float_violations += 1
            raise IntegerViolation("real operand on the integer kernel path")
        return int(other)

    def _wrap(self, value: int) -> "InstrumentedInt":
        return InstrumentedInt(value, self.counter)

    def __add__(self, other):
        self.counter.adds += 1
        return self._wrap(self.value + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        self.counter.adds += 1
        return self._wrap(self.value - self._coerce(other))

    def __rsub__(self, other):
        self.counter.adds += 1
        return self._wrap(self._coerce(other) - self.value)

    def __mul__(self, other):
        self.counter.muls += 1
        return self._wrap(self.value * self._coerce(other))

    __rmul__ = __mul__

    def __floordiv__(self, other):
        self.counter.divs += 1
        return self._wrap(self.value // self._coerce(other))

    def __rshift__(self, k):
        self.counter.shifts += 1
        return self._wrap(self.value >> self._coerce(k))

    def __lshift__(self, k):
        self.counter.shifts += 1
        return self._wrap(self.value << self._coerce(k))

    def __neg__(self):
        self.counter.adds += 1
        return self._wrap(-self.value)

    def _cmp(self, other, op):
        self.counter.compares += 1
        return op(self.value, self._coerce(other))

    def __lt__(self, other):
        return self._cmp(other, lambda a, b: a < b)

    def __le__(self, other):
        return self._cmp(other, lambda a, b: a <= b)

    def __gt__(self, other):
        return self._cmp(other, lambda a, b: a > b)

    def __ge__(self, other):
        return self._cmp(other, lambda a, b: a >= b)

    def __eq__(self, other):
        try:
            return self.value == self._coerce(other)
        except IntegerViolation:
            raise

    def __int__(self):
        return self.value

    def __float__(self):
        self.counter.float_violations += 1
        raise IntegerViolation("converted InstrumentedInt to a real number")

    def __repr__(self):
        return f"InstrumentedInt({self.value})"


class KernelMath:
    """Instrumented int64 array arithmetic for vectorized kernels.

    Every method checks that array operands carry an integer dtype (a real
    dtype records a float violation and raises) and charges the counter by
    the number of scalar operations performed. Right shifts on negative
    values are arithmetic, i.e. floor-division semantics.
    """

    __slots__ = ("counter",)

    def __init__(self, counter: OpCounter | None = None):
        self.counter = counter if counter is not None else OpCounter()

    def _guard(self, *xs) -> None:
        for x in xs:
            if isinstance(x, np.ndarray):
                if not np.issubdtype(x.dtype, np.integer):
                    self.counter.float_violations += 1
                    raise IntegerViolation(
                        f"array with dtype {x.dtype} on the integer kernel path"
                    )
            elif isinstance(x, (float, np.floating)):
                self.counter.float_violations += 1
                raise IntegerViolation("real scalar on the integer kernel path")

    @staticmethod
    def _size(*xs) -> int:
        n = 1
        for x in xs:
            if isinstance(x, np.ndarray):
                n = max(n, x.size)
        return n

    def asarray(self, x) -> np.ndarray:
        self._guard(x)
        return np.asarray(x, dtype=np.int64)

    def add(self, a, b):
        self._guard(a, b)
        self.counter.adds += self._size(a, b)
        return np.add(a, b, dtype=np.int64)

    def sub(self, a, b):
        self._guard(a, b)
        self.counter.adds += self._size(a, b)
        return np.subtract(a, b, dtype=np.int64)

    def mul(self, a, b):
        self._guard(a, b)
        # cheap magnitude check: products must stay inside 64 signed bits
        ma = int(np.max(np.abs(a))) if np.size(a) else 0
        mb = int(np.max(np.abs(b))) if np.size(b) else 0
        if ma and mb and ma.bit_length() + mb.bit_length() > 63:
            raise KernelOverflowError(
                f"product magnitudes up to {ma} * {mb} may exceed 64-bit signed range"
            )
        self.counter.muls += self._size(a, b)
        return np.multiply(a, b, dtype=np.int64)

    def floordiv(self, a, b):
        self._guard(a, b)
        self.counter.divs += self._size(a, b)
        return np.floor_divide(a, b, dtype=np.int64)

    def rshift(self, a, k):
        self._guard(a, k)
        self.counter.shifts += self._size(a, k)
        return np.right_shift(np.asarray(a, dtype=np.int64), k)

    def lshift(self, a, k):
        self._guard(a, k)
        ma = int(np.max(np.abs(a))) if np.size(a) else 0
        mk = int(np.max(k)) if np.size(k) else 0
        if ma and ma.bit_length() + mk > 63:
            raise KernelOverflowError("left shift may exceed 64-bit signed range")
        self.counter.shifts += self._size(a, k)
        return np.left_shift(np.asarray(a, dtype=np.int64), k)

    def minimum(self, a, b):
        self._guard(a, b)
        self.counter.compares += self._size(a, b)
        return np.minimum(a, b).astype(np.int64, copy=False)

    def maximum(self, a, b):
        self._guard(a, b)
        self.counter.compares += self._size(a, b)
        return np.maximum(a, b).astype(np.int64, copy=False)

    def abs(self, a):
        self._guard(a)
        self.counter.compares += self._size(a)
        self.counter.adds += self._size(a)
        return np.abs(a).astype(np.int64, copy=False)

    def sign(self, a):
        self._guard(a)
        self.counter.compares += 2 * self._size(a)
        return np.sign(a).astype(np.int64, copy=False)

    def clip(self, a, lo, hi):
        self._guard(a, lo, hi)
        self.counter.compares += 2 * self._size(a)
        return np.clip(a, lo, hi).astype(np.int64, copy=False)

    def sum(self, a, axis=-1, keepdims=True):
        self._guard(a)
        n = a.shape[axis] if isinstance(a, np.ndarray) and a.ndim else 1
        self.counter.adds += max(n - 1, 0) * (a.size // max(n, 1))
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.int64)

    def max(self, a, axis=-1, keepdims=True):
        self._guard(a)
        n = a.shape[axis] if isinstance(a, np.ndarray) and a.ndim else 1
        self.counter.compares += max(n - 1, 0) * (a.size // max(n, 1))
        return np.max(a, axis=axis, keepdims=keepdims).astype(np.int64, copy=False)

    def matmul(self, a, b):
        self._guard(a, b)
        ma = int(np.max(np.abs(a))) if a.size else 0
        mb = int(np.max(np.abs(b))) if b.size else 0
        k = a.shape[-1]
        if ma and mb and (ma.bit_length() + mb.bit_length() + k.bit_length()) > 62:
            raise KernelOverflowError("accumulated matmul may exceed 64-bit signed range")
        out = np.matmul(a.astype(np.int64), b.astype(np.int64))
        self.counter.muls += out.size * k
        self.counter.adds += out.size * max(k - 1, 0)
        return out

    def rshift_round(self, a, k: int):
        """Right shift with round-half-up, used to rescale after multiplies."""
        self._guard(a)
        if k <= 0:
            return self.lshift(a, -k)
        self.counter.adds += self._size(a)
        self.counter.shifts += self._size(a)
        return np.right_shift(np.add(a, np.int64(1) << (k - 1), dtype=np.int64), k)
