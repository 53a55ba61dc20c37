"""Integer-only softmax candidates built from a shared scaffold:
max-subtraction, a shift-based base-2 exponent, and normalization by
reciprocal integer division.

All kernels reduce over the last axis and require a dyadic input scale
(1/2^f), which makes floor(1/scale) and the integer/fraction exponent
decomposition exact in code space. Right shifts on negative codes are
arithmetic, i.e. floor-division semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quantize import QParams, QTensor
from .tensor import KernelMath, OpCounter

# quadratic used by the range-reduction exponential baseline:
# exp(p) ~ A*(p + B)^2 + C on p in (-ln2, 0]
IEXP_A = 0.3585
IEXP_B = 1.353
IEXP_C = 0.344

LN2_MANTISSA_15 = 22713  # round(ln2 * 2^15), for the exact-ln2 kernel mode


class ConfigurationError(ValueError):
    """Kernel configuration does not match its preconditions."""


class NormalizationError(ValueError):
    """A softmax row had a zero exponential denominator."""


@dataclass(frozen=True)
class BitExpConfig:
    """Configuration of the shift-exponential softmax kernels.

    M is the overflow-guard exponent of the reciprocal division; it must
    satisfy M >= 2*bits + ceil(log2(row length)) + 2, checked per call.
    """

    bits: int = 8
    M: int = 31
    taylor_degree: int = 1
    ln2_mode: str = "shift_1011"

    def __post_init__(self):
        if self.taylor_degree not in (1, 2):
            raise ConfigurationError(f"taylor_degree must be 1 or 2, got {self.taylor_degree}")
        if self.ln2_mode not in ("shift_1011", "exact"):
            raise ConfigurationError(f"unknown ln2_mode {self.ln2_mode!r}")
        if not (2 <= self.bits <= 16):
            raise ConfigurationError(f"bits must be in [2, 16], got {self.bits}")
        if not (8 <= self.M <= 62):
            raise ConfigurationError(f"M must be in [8, 62], got {self.M}")


@dataclass(frozen=True)
class ExpDecomposition:
    """Exponent split s*Q = -q_int + s*(-r) with the fraction in (-1, 0]."""

    q_int: np.ndarray
    r_frac_code: np.ndarray


def _dyadic_exponent(params: QParams) -> int:
    s = float(params.scale)
    f = round(-math.log2(s))
    if not (0 <= f <= 62) or abs(1.0 / (1 << f) - s) > 1e-15:
        raise ConfigurationError(
            f"softmax kernels need a power-of-two reciprocal scale, got {s}"
        )
    return f


def _check_m(cfg: BitExpConfig, rowlen: int) -> None:
    need = 2 * cfg.bits + math.ceil(math.log2(max(rowlen, 2))) + 2
    if cfg.M < need:
        raise ConfigurationError(
            f"M={cfg.M} too small for bits={cfg.bits}, row length {rowlen};"
            f" need at least {need}"
        )


# ---------------------------------------------------------------------------
# code-domain stages
# ---------------------------------------------------------------------------

def _max_subtract_codes(codes: np.ndarray, km: KernelMath) -> np.ndarray:
    return km.sub(codes, km.max(codes, axis=-1, keepdims=True))


def _log2e_codes(qd: np.ndarray, km: KernelMath) -> np.ndarray:
    # multiply by log2(e) ~ 1.4375 = 1 + 1/2 - 1/16 using arithmetic shifts
    return km.sub(km.add(qd, km.rshift(qd, 1)), km.rshift(qd, 4))


def _decompose_codes(qp: np.ndarray, f: int, km: KernelMath):
    """Split nonpositive qp into (q_int >= 0, r in [0, 2^f))."""
    pos = km.sub(0, qp)
    q_int = km.rshift(pos, f)          # floor(P / 2^f), exact for dyadic scales
    r = km.sub(pos, km.lshift(q_int, f))
    return q_int, r


def _phi(x: np.ndarray, km: KernelMath) -> np.ndarray:
    """ln2 multiplier realized as (0.1011)_2: x>>1 + x>>3 + x>>4."""
    return km.add(km.add(km.rshift(x, 1), km.rshift(x, 3)), km.rshift(x, 4))


def _eff_frac_codes(neg_r: np.ndarray, f: int, cfg: BitExpConfig,
                    km: KernelMath) -> np.ndarray:
    """Codes of 2^(s*(-r)) ~ 1 + ln2*s*(-r) [+ (ln2*s*(-r))^2/2] on the 1/2^f grid."""
    if cfg.ln2_mode == "shift_1011":
        lin = _phi(neg_r, km)
    else:
        lin = km.rshift(km.mul(neg_r, LN2_MANTISSA_15), 15)
    frac = km.add(lin, np.int64(1) << f)
    if cfg.taylor_degree == 2:
        frac = km.add(frac, km.rshift(km.mul(lin, lin), f + 1))
    return frac


def _eff_exp_codes(qd: np.ndarray, f: int, cfg: BitExpConfig,
                   km: KernelMath) -> np.ndarray:
    qp = _log2e_codes(qd, km)
    q_int, r = _decompose_codes(qp, f, km)
    frac = _eff_frac_codes(km.sub(0, r), f, cfg, km)
    return km.rshift(frac, km.minimum(q_int, 62))


def _shift_exp_codes(qd: np.ndarray, f: int, km: KernelMath) -> np.ndarray:
    """Baseline shift exponential: fraction approximated by 1 + x/2."""
    qp = _log2e_codes(qd, km)
    q_int, r = _decompose_codes(qp, f, km)
    frac = km.add(km.rshift(km.sub(0, r), 1), np.int64(1) << f)
    return km.rshift(frac, km.minimum(q_int, 62))


def _int_div_codes(q_exp: np.ndarray, cfg: BitExpConfig, km: KernelMath) -> np.ndarray:
    den = km.sum(q_exp, axis=-1, keepdims=True)
    if np.any(den <= 0):
        bad = int(np.argwhere(den.reshape(-1) <= 0)[0][0])
        raise NormalizationError(f"zero exponential sum in row {bad}")
    recip = km.floordiv(np.int64(1) << cfg.M, den)
    return km.rshift(km.mul(recip, q_exp), cfg.M - (cfg.bits - 1))


def _out_params(cfg: BitExpConfig) -> QParams:
    return QParams(1.0 / (1 << (cfg.bits - 1)), 0, cfg.bits, "asymmetric")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def max_subtract(q: QTensor, counter: OpCounter | None = None) -> QTensor:
    """Per-row Q - max(Q). Outputs are <= 0; the scale is unchanged and the
    zero point drops out of the difference."""
    km = KernelMath(counter)
    codes = _max_subtract_codes(km.asarray(q.codes), km)
    return QTensor(codes, QParams(q.params.scale, 0, q.params.bits, "asymmetric"))


def log2e_shift(qd: QTensor, counter: OpCounter | None = None) -> QTensor:
    km = KernelMath(counter)
    codes = _log2e_codes(km.asarray(qd.codes), km)
    return QTensor(codes, qd.params)


def decompose(qp, scale, counter: OpCounter | None = None) -> ExpDecomposition:
    """Exact exponent split in code space; requires a dyadic scale."""
    params = QParams(scale, 0, 16, "asymmetric") if not isinstance(scale, QParams) else scale
    f = _dyadic_exponent(params)
    km = KernelMath(counter)
    codes = km.asarray(qp.codes if isinstance(qp, QTensor) else qp)
    q_int, r = _decompose_codes(codes, f, km)
    return ExpDecomposition(q_int, r)


def efficient_bit_exp(qd: QTensor, cfg: BitExpConfig | None = None,
                      counter: OpCounter | None = None) -> QTensor:
    """Shift-exponential of nonpositive codes; output codes share the input
    scale, so code F = 1/scale encodes e^0 = 1."""
    cfg = cfg or BitExpConfig()
    f = _dyadic_exponent(qd.params)
    km = KernelMath(counter)
    codes = _eff_exp_codes(km.asarray(qd.codes), f, cfg, km)
    return QTensor(codes, QParams(qd.params.scale, 0, qd.params.bits, "asymmetric"))


def int_div_normalize(q_exp: QTensor, cfg: BitExpConfig | None = None,
                      counter: OpCounter | None = None) -> QTensor:
    """Reciprocal-division normalization onto the 1/2^(bits-1) grid.

    Per-row dequantized sums land in [1 - (n+1)/2^(bits-1), 1]: the floor in
    the reciprocal costs at most 1/2^(bits-1) and each output floor costs
    the same, all losses downward.
    """
    cfg = cfg or BitExpConfig()
    _check_m(cfg, q_exp.codes.shape[-1])
    km = KernelMath(counter)
    codes = _int_div_codes(km.asarray(q_exp.codes), cfg, km)
    return QTensor(codes.astype(np.int32), _out_params(cfg))


def efficient_bit_softmax(q: QTensor, cfg: BitExpConfig | None = None,
                          counter: OpCounter | None = None) -> QTensor:
    cfg = cfg or BitExpConfig()
    f = _dyadic_exponent(q.params)
    _check_m(cfg, q.codes.shape[-1])
    km = KernelMath(counter)
    qd = _max_subtract_codes(km.asarray(q.codes), km)
    q_exp = _eff_exp_codes(qd, f, cfg, km)
    codes = _int_div_codes(q_exp, cfg, km)
    return QTensor(codes.astype(np.int32), _out_params(cfg))


def shiftmax(q: QTensor, cfg: BitExpConfig | None = None,
             counter: OpCounter | None = None) -> QTensor:
    """Baseline with the endpoint-matched linear fraction 1 + x/2."""
    cfg = cfg or BitExpConfig()
    f = _dyadic_exponent(q.params)
    _check_m(cfg, q.codes.shape[-1])
    km = KernelMath(counter)
    qd = _max_subtract_codes(km.asarray(q.codes), km)
    q_exp = _shift_exp_codes(qd, f, km)
    codes = _int_div_codes(q_exp, cfg, km)
    return QTensor(codes.astype(np.int32), _out_params(cfg))


_P12 = 12  # fixed-point grid of the quadratic exponential value


def _iexp_value_codes(qd: np.ndarray, f: int, km: KernelMath,
                      precision_bits: int = 0):
    """Range-reduction exponential: e^x = 2^(-z) * quad(p), p in (-ln2, 0].

    Returns codes on the 2^-_P12 grid, shifted down by z (or up by
    precision_bits - z when precision_bits > 0, for high-precision use).
    """
    from .quantize import encode_dyadic_multiplier

    s = 1.0 / (1 << f)
    ln2_c = int(math.floor(math.log(2.0) / s))
    b_c = int(math.floor(IEXP_B / s))
    c_c = int(math.floor(IEXP_C / (IEXP_A * s * s)))
    m, e = encode_dyadic_multiplier(IEXP_A * s * s * (1 << _P12))

    z = km.floordiv(km.sub(0, qd), ln2_c)
    p = km.add(qd, km.mul(z, ln2_c))
    pb = km.add(p, b_c)
    poly = km.add(km.mul(pb, pb), c_c)
    p12 = km.rshift_round(km.mul(poly, m), e)
    if precision_bits:
        return km.lshift(p12, km.sub(precision_bits, km.minimum(z, precision_bits)))
    return km.rshift(p12, km.minimum(z, 62))


def iexp_softmax(q: QTensor, cfg: BitExpConfig | None = None,
                 counter: OpCounter | None = None) -> QTensor:
    """Softmax with the quadratic range-reduction exponential numerator."""
    cfg = cfg or BitExpConfig()
    f = _dyadic_exponent(q.params)
    _check_m(cfg, q.codes.shape[-1])
    km = KernelMath(counter)
    qd = _max_subtract_codes(km.asarray(q.codes), km)
    q_exp = _iexp_value_codes(qd, f, km)
    codes = _int_div_codes(q_exp, cfg, km)
    return QTensor(codes.astype(np.int32), _out_params(cfg))


def iexp_exp_codes(qd: QTensor, counter: OpCounter | None = None,
                   precision_bits: int = 16) -> tuple[np.ndarray, float]:
    """High-precision integer evaluation of the quadratic exponential.

    Returns (codes, scale); codes * scale approximates e^(s*qd) with the
    z-shift applied upward so small values keep relative precision.
    """
    f = _dyadic_exponent(qd.params)
    km = KernelMath(counter)
    codes = _iexp_value_codes(km.asarray(qd.codes), f, km, precision_bits=precision_bits)
    return codes, 1.0 / (1 << (_P12 + precision_bits))


def log2_softmax(q: QTensor, cfg: BitExpConfig | None = None,
                 counter: OpCounter | None = None) -> QTensor:
    """Softmax snapped onto the power-of-two grid: outputs are 2^(-k).

    The log2 code k = round(log2(denominator / numerator)) is found by
    integer shift-compare; the returned affine codes are 2^(bits-1) >> k,
    exactly representable on the 1/2^(bits-1) output grid.
    """
    cfg = cfg or BitExpConfig()
    k = log2_softmax_codes(q, cfg, counter)
    km = KernelMath(counter)
    capped = km.minimum(k, cfg.bits - 1)
    codes = km.rshift(np.int64(1) << (cfg.bits - 1),
                      np.where(k > cfg.bits - 1, np.int64(62), capped))
    return QTensor(codes.astype(np.int32), _out_params(cfg))


def log2_softmax_codes(q: QTensor, cfg: BitExpConfig | None = None,
                       counter: OpCounter | None = None) -> np.ndarray:
    """Raw log2 probability codes k, value 2^(-k); the winner of a dominant
    row gets code 0."""
    cfg = cfg or BitExpConfig()
    f = _dyadic_exponent(q.params)
    km = KernelMath(counter)
    qd = _max_subtract_codes(km.asarray(q.codes), km)
    num = _iexp_value_codes(qd, f, km)
    den = km.sum(num, axis=-1, keepdims=True)
    if np.any(den <= 0):
        bad = int(np.argwhere(den.reshape(-1) <= 0)[0][0])
        raise NormalizationError(f"zero exponential sum in row {bad}")
    den = np.broadcast_to(den, num.shape)

    # k = floor(log2(den/num)) by shift-compare, then round half upward in
    # log space: den/num >= 2^(k+1/2) <=> den^2 >= num^2 * 2^(2k+1)
    k = np.zeros(num.shape, dtype=np.int64)
    live = num > 0
    shifted = np.where(live, num, 1).astype(np.int64)
    while True:
        km.counter.shifts += int(live.sum())
        km.counter.compares += int(live.sum())
        grow = live & ((shifted << 1) <= den)
        if not grow.any():
            break
        k[grow] += 1
        shifted[grow] <<= 1
        live = grow
    # num * 2^k <= den bounds num^2 * 2^(2k+1) <= 2 * den^2, safe in int64
    safe_num = np.where(num > 0, num, 1).astype(np.int64)
    km.counter.muls += num.size * 2
    km.counter.compares += num.size
    round_up = den * den >= (safe_num * safe_num) << (2 * k + 1)
    k = k + np.where(round_up, 1, 0)
    return np.where(num > 0, k, np.int64(63))


def base2_frac_approx_error(mode: str, grid: int = 10001) -> tuple[float, float]:
    """(RMS, max) error of a 2^x approximant against exact 2^x on (-1, 1)."""
    approximants = {
        "ivit_linear": lambda x: 1.0 + x / 2.0,
        "ours_exact_ln2": lambda x: 1.0 + math.log(2.0) * x,
        "ours_shift": lambda x: 1.0 + 0.6875 * x,
    }
    if mode not in approximants:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.linspace(-1.0, 1.0, grid)
    d = np.abs(np.exp2(x) - approximants[mode](x))
    return float(np.sqrt(np.mean(d * d))), float(np.max(d))
