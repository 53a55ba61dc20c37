"""Uniform affine quantization, dequantization, and min/max calibration.

Codes always live in [0, 2^b - 1]. The symmetric scheme is realized as
unsigned codes with a midpoint zero point z = 2^(b-1), which is equivalent
to signed-range symmetric quantization but keeps a single code domain.
Rounding is half-to-even everywhere, for bias-freeness and reproducibility.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class DegenerateRangeError(ValueError):
    """Calibration range has zero width."""


def _as_float_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class QParams:
    """Affine quantization parameters: x ~ scale * (code - zero_point).

    scale/zero_point are scalars for per_tensor granularity and 1-d vectors
    (one entry per channel along ``channel_axis``) for per_channel.
    """

    scale: float | np.ndarray
    zero_point: int | np.ndarray
    bits: int
    scheme: str  # "symmetric" | "asymmetric"
    granularity: str = "per_tensor"  # "per_tensor" | "per_channel"
    channel_axis: int | None = None

    def __post_init__(self):
        if self.scheme not in ("symmetric", "asymmetric"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "per_channel" and self.channel_axis is None:
            raise ValueError("per_channel granularity requires channel_axis")
        if not (2 <= self.bits <= 16):
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        z = np.asarray(self.zero_point)
        if np.any(z < 0) or np.any(z > self.qmax):
            raise ValueError(f"zero_point outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def broadcast_to(self, ndim: int):
        """Scale/zero arrays shaped for broadcasting along the channel axis."""
        if self.granularity == "per_tensor":
            return np.float64(self.scale), np.int64(self.zero_point)
        shape = [1] * ndim
        shape[self.channel_axis] = -1
        return (
            np.asarray(self.scale, dtype=np.float64).reshape(shape),
            np.asarray(self.zero_point, dtype=np.int64).reshape(shape),
        )


@dataclass(frozen=True)
class QTensor:
    """Integer codes bound to their quantization parameters."""

    codes: np.ndarray
    params: QParams

    def check(self) -> "QTensor":
        if np.any(self.codes < 0) or np.any(self.codes > self.params.qmax):
            raise ValueError(f"codes outside [0, {self.params.qmax}]")
        return self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def qparams_from_range(alpha, beta, bits: int, scheme: str = "asymmetric",
                       granularity: str = "per_tensor",
                       channel_axis: int | None = None) -> QParams:
    """Parameters for the range [beta, alpha] (beta = min, alpha = max).

    Asymmetric: s = (alpha - beta) / (2^b - 1), z = clip(round(-beta/s), 0, 2^b - 1).
    Symmetric: s = 2 * max(|alpha|, |beta|) / (2^b - 1) with midpoint zero point.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    qmax = (1 << bits) - 1
    if scheme == "asymmetric":
        if np.any(alpha <= beta):
            raise DegenerateRangeError(
                f"asymmetric range needs alpha > beta, got ({beta}, {alpha})"
            )
        scale = (alpha - beta) / qmax
        zero = np.clip(_round_half_even(-beta / scale), 0, qmax)
    elif scheme == "symmetric":
        amax = np.maximum(np.abs(alpha), np.abs(beta))
        if np.any(amax <= 0):
            raise DegenerateRangeError("symmetric range needs max(|alpha|,|beta|) > 0")
        scale = 2.0 * amax / qmax
        zero = np.full_like(np.asarray(scale), 1 << (bits - 1))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if granularity == "per_tensor":
        scale = float(scale)
        zero = int(zero)
    else:
        scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
        zero = np.atleast_1d(zero).astype(np.int64)
    return QParams(scale, zero, bits, scheme, granularity, channel_axis)


def _round_half_even(x):
    return np.rint(x).astype(np.int64)


def quantize(x, p: QParams) -> QTensor:
    """codes = clip(round_half_even(x / s) + z, 0, 2^b - 1), elementwise."""
    arr = _as_float_array(x)
    scale, zero = p.broadcast_to(arr.ndim)
    if p.granularity == "per_channel":
        n_ch = np.asarray(p.scale).reshape(-1).shape[0]
        if arr.shape[p.channel_axis] != n_ch:
            raise ValueError(
                f"axis {p.channel_axis} has extent {arr.shape[p.channel_axis]},"
                f" but params carry {n_ch} channels"
            )
    codes = np.clip(_round_half_even(arr / scale) + zero, 0, p.qmax)
    return QTensor(codes.astype(np.int32), p)


def dequantize(q: QTensor) -> Tensor:
    """x_hat = s * (code - z)."""
    scale, zero = q.params.broadcast_to(q.codes.ndim)
    return Tensor((q.codes.astype(np.float64) - zero) * scale, dtype="real32")


def dequantize_np(q: QTensor) -> np.ndarray:
    """Like :func:`dequantize` but returns a float64 ndarray."""
    scale, zero = q.params.broadcast_to(q.codes.ndim)
    return (q.codes.astype(np.float64) - zero) * scale


class MinMaxObserver:
    """Running elementwise min/max envelope over observed tensors.

    Single writer; envelopes from different threads merge associatively via
    elementwise min/max, so the result is order- and duplication-invariant.
    """

    def __init__(self, per_channel_axis: int | None = None):
        self.per_channel_axis = per_channel_axis
        self.running_min = None
        self.running_max = None
        self.samples_seen = 0

    def observe(self, x) -> "MinMaxObserver":
        arr = _as_float_array(x)
        if arr.size == 0:
            return self
        if self.per_channel_axis is None:
            lo, hi = float(arr.min()), float(arr.max())
        else:
            moved = np.moveaxis(arr, self.per_channel_axis, 0)
            flat = moved.reshape(moved.shape[0], -1)
            lo, hi = flat.min(axis=1), flat.max(axis=1)
        if self.samples_seen == 0:
            self.running_min, self.running_max = lo, hi
        else:
            self.running_min = np.minimum(self.running_min, lo)
            self.running_max = np.maximum(self.running_max, hi)
        self.samples_seen += 1
        return self

    def merge(self, other: "MinMaxObserver") -> "MinMaxObserver":
        if other.samples_seen == 0:
            return self
        if self.samples_seen == 0:
            self.running_min = other.running_min
            self.running_max = other.running_max
        else:
            self.running_min = np.minimum(self.running_min, other.running_min)
            self.running_max = np.maximum(self.running_max, other.running_max)
        self.samples_seen += other.samples_seen
        return self

    def qparams(self, bits: int, scheme: str = "asymmetric",
                granularity: str = "per_tensor",
                channel_axis: int | None = None) -> QParams:
        """Derive parameters from the observed envelope.

        A degenerate (constant) range is widened by an epsilon-scaled margin
        with a warning instead of erroring, so pipeline calibration survives
        constant activations.
        """
        if self.samples_seen == 0:
            raise ValueError("observer has seen no data")
        lo = np.asarray(self.running_min, dtype=np.float64)
        hi = np.asarray(self.running_max, dtype=np.float64)
        width = hi - lo
        degenerate = width <= 0
        if np.any(degenerate):
            margin = np.maximum(np.abs(hi), 1.0) * (256 * np.finfo(np.float32).eps)
            lo = np.where(degenerate, lo - margin, lo)
            hi = np.where(degenerate, hi + margin, hi)
            warnings.warn("degenerate activation range widened for calibration",
                          RuntimeWarning, stacklevel=2)
        if granularity == "per_tensor":
            lo, hi = float(lo), float(hi)
        return qparams_from_range(hi, lo, bits, scheme, granularity, channel_axis)


def observe(o: MinMaxObserver, x) -> MinMaxObserver:
    """Functional alias for :meth:`MinMaxObserver.observe`."""
    return o.observe(x)


def snap_scale_to_dyadic(scale: float) -> tuple[float, int]:
    """Nearest power-of-two reciprocal: returns (1/2^f, f), f clamped to [0, 62].

    Dyadic scales make floor(1/s) exact, which keeps the exponent
    decomposition inside the integer softmax kernels exact in code space.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    f = int(np.clip(round(-math.log2(scale)), 0, 62))
    return 1.0 / (1 << f), f


def dyadic_qparams_for_range(lo: float, hi: float, code_bits: int = 16) -> QParams:
    """Asymmetric params whose scale is a power-of-two reciprocal.

    The scale is the finest 1/2^f that still covers [lo, hi] with
    ``code_bits``-wide codes; exponent-decomposition kernels consume these.
    f is capped at 20: finer grids add nothing at 16-bit code widths, and
    the cap keeps every kernel's squared fixed-point terms inside 63 bits
    even for near-constant inputs.
    """
    width = max(hi - lo, 1e-12)
    qmax = (1 << code_bits) - 1
    f = int(np.clip(math.floor(math.log2(qmax / width)), 0, 20))
    scale = 1.0 / (1 << f)
    zero = int(np.clip(np.rint(-lo / scale), 0, qmax))
    return QParams(scale, zero, code_bits, "asymmetric")


def encode_dyadic_multiplier(mult: float, mant_bits: int = 15) -> tuple[int, int]:
    """Encode a positive real multiplier as (mantissa, shift): mult ~ m / 2^e.

    The mantissa is normalized into [2^(mant_bits-1), 2^mant_bits), so it
    fits 16 signed bits at the default width; applying it is one integer
    multiply plus one right shift.
    """
    if mult <= 0:
        raise ValueError("multiplier must be positive")
    e = 0
    m = float(mult)
    while m < (1 << (mant_bits - 1)):
        m *= 2.0
        e += 1
    while m >= (1 << mant_bits):
        m /= 2.0
        e -= 1
    return int(round(m)), e


def requant_weight_per_channel(w: np.ndarray, bits: int) -> QTensor:
    """Symmetric per-channel weight quantization, channel = output axis 0."""
    w = np.asarray(w, dtype=np.float64)
    amax = np.max(np.abs(w.reshape(w.shape[0], -1)), axis=1)
    amax = np.maximum(amax, 1e-12)
    p = qparams_from_range(amax, -amax, bits, "symmetric", "per_channel", 0)
    return quantize(w, p)
