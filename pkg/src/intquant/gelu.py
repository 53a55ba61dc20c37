"""Polynomial GELU candidates: a data-range-aware quartic erf approximation,
the classic quadratic baseline, and a bit-shift sigmoid baseline, each with a
real-valued form and an integer-only form over quantized codes.

The erf approximant family is

    L(x) = sign(x) * (a * (clip(|x|, max=-b) + b)^degree + 1)

which is odd, saturates to +/-1 for |x| >= -b, and needs only (a, b) per
degree. GELU follows as 0.5 * x * (1 + L(x / sqrt(2))).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from .quantize import QParams, QTensor, encode_dyadic_multiplier, quantize
from .tensor import KernelMath, OpCounter

SQRT2 = math.sqrt(2.0)

_GRID_POINTS = 10001  # error norms use a uniform inclusive grid of this size


@dataclass(frozen=True)
class ErfPolyCoeffs:
    a: float
    b: float
    degree: int = 4

    def __post_init__(self):
        if self.b >= 0:
            raise ValueError(f"b must be negative (saturation at -b), got {self.b}")
        if self.degree not in (2, 3, 4):
            raise ValueError(f"degree must be 2, 3 or 4, got {self.degree}")


# Shipped defaults. The quartic pair comes from fitting against vision-model
# activation ranges; the quadratic pair is the published I-BERT one.
QUARTIC_ERF_COEFFS = ErfPolyCoeffs(-0.019913, -2.698088, 4)
IBERT_ERF_COEFFS = ErfPolyCoeffs(-0.2888, -1.769, 2)


@dataclass(frozen=True)
class FitResult:
    coeffs: ErfPolyCoeffs
    l2_err: float  # RMS over the evaluation grid
    linf_err: float
    fit_range: tuple[float, float]

    def __post_init__(self):
        if self.l2_err > self.linf_err + 1e-12:
            raise ValueError("RMS error cannot exceed the max error")


class FitConvergenceError(RuntimeError):
    def __init__(self, message, best: FitResult):
        super().__init__(message)
        self.best = best


def erf_poly_eval(x, c: ErfPolyCoeffs):
    """Evaluate the erf approximant. sign(0) = 0, so f(0) = 0 exactly."""
    arr = np.asarray(x, dtype=np.float64)
    u = np.clip(np.abs(arr), None, -c.b)
    out = np.sign(arr) * (c.a * (u + c.b) ** c.degree + 1.0)
    return out if arr.shape else float(out)


def data_aware_poly_gelu(x, c: ErfPolyCoeffs = QUARTIC_ERF_COEFFS):
    """0.5 * x * (1 + L(x / sqrt(2))) with the quartic defaults."""
    arr = np.asarray(x, dtype=np.float64)
    out = 0.5 * arr * (1.0 + erf_poly_eval(arr / SQRT2, c))
    return out if arr.shape else float(out)


def ibert_gelu(x, c: ErfPolyCoeffs = IBERT_ERF_COEFFS):
    """Quadratic-erf GELU baseline."""
    return data_aware_poly_gelu(x, c)


def shift_gelu(x):
    """Idealized target of the bit-shift GELU: x * sigmoid(1.6875 * x).

    1.6875 = 1 + 1/2 + 1/8 + 1/16 is the shift-realizable stand-in for the
    usual 1.702 sigmoid-GELU constant.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = arr / (1.0 + np.exp(-1.6875 * arr))
    return out if arr.shape else float(out)


def gelu_reference(x):
    """Exact GELU, used as the fitting target."""
    arr = np.asarray(x, dtype=np.float64)
    out = 0.5 * arr * (1.0 + _erf(arr / SQRT2))
    return out if arr.shape else float(out)


def _grid_errors(f, g, lo, hi, n=_GRID_POINTS) -> tuple[float, float]:
    x = np.linspace(lo, hi, n)
    d = np.abs(f(x) - g(x))
    return float(np.sqrt(np.mean(d * d))), float(np.max(d))


def _objective(a: float, b: float, degree: int, x: np.ndarray,
               target: np.ndarray, level: str) -> float:
    if b >= 0:
        return math.inf
    c = ErfPolyCoeffs(a, b, degree)
    if level == "erf":
        r = target - erf_poly_eval(x, c)
    else:
        r = target - data_aware_poly_gelu(x, c)
    return float(np.sum(r * r))


def fit_erf_poly(fit_range: tuple[float, float], degree: int, samples: int = 2001,
                 level: str = "erf", max_sweeps: int = 20000) -> FitResult:
    """Least-squares fit of (a, b) on uniform samples over ``fit_range``.

    The solver is a deterministic coarse grid over (a, b) followed by
    coordinate descent with shrinking steps; it stops once a full sweep
    improves the objective by less than 1e-10 relatively.

    level selects the residual: "erf" fits L against erf directly, "gelu"
    fits 0.5*x*(1 + L(x/sqrt 2)) against exact GELU (the construction the
    quadratic baseline historically used).
    """
    lo, hi = float(fit_range[0]), float(fit_range[1])
    if not lo < hi:
        raise ValueError(f"fit range must satisfy lo < hi, got ({lo}, {hi})")
    if samples < 100:
        raise ValueError(f"need at least 100 samples, got {samples}")
    if level not in ("erf", "gelu"):
        raise ValueError(f"unknown fit level {level!r}")
    x = np.linspace(lo, hi, samples)
    target = _erf(x) if level == "erf" else gelu_reference(x)

    # coarse grid: b spans plausible saturation points, a spans both signs
    # (odd degrees need a > 0 for a monotone approximant)
    b_grid = np.linspace(-4.0, -0.8, 33)
    a_grid = np.concatenate([np.linspace(-1.2, -0.002, 31), np.linspace(0.002, 1.2, 31)])
    best_obj, best_a, best_b = math.inf, -0.1, -2.0
    for b in b_grid:
        for a in a_grid:
            obj = _objective(a, b, degree, x, target, level)
            if obj < best_obj:
                best_obj, best_a, best_b = obj, a, b
    a, b, obj = best_a, best_b, best_obj

    step_a = float(a_grid[1] - a_grid[0])
    step_b = float(b_grid[1] - b_grid[0])
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        improved_any = False
        for coord in ("a", "b"):
            step = step_a if coord == "a" else step_b
            while True:
                if coord == "a":
                    cands = ((a - step, b), (a + step, b))
                else:
                    cands = ((a, b - step), (a, b + step))
                objs = [_objective(ca, cb, degree, x, target, level) for ca, cb in cands]
                k = int(np.argmin(objs))
                if objs[k] < obj:
                    (a, b), obj = cands[k], objs[k]
                    improved_any = True
                else:
                    break
        if not improved_any:
            if step_a < 1e-12 and step_b < 1e-12:
                break
            step_a *= 0.5
            step_b *= 0.5
        elif obj > 0 and (best_obj - obj) / max(obj, 1e-300) < 1e-10 and sweeps > 4:
            break
        best_obj = obj

    coeffs = ErfPolyCoeffs(a, b, degree)
    if level == "erf":
        l2, linf = _grid_errors(_erf, lambda v: erf_poly_eval(v, coeffs), lo, hi)
    else:
        l2, linf = _grid_errors(gelu_reference,
                                lambda v: data_aware_poly_gelu(v, coeffs), lo, hi)
    result = FitResult(coeffs, l2, linf, (lo, hi))
    if sweeps >= max_sweeps:
        raise FitConvergenceError(f"no convergence after {max_sweeps} sweeps", result)
    return result


# ---------------------------------------------------------------------------
# integer paths
# ---------------------------------------------------------------------------

_KV = 12   # fixed-point grid (2^-12) for the clipped erf argument
_KA = 20   # fixed-point grid for the leading coefficient
_KL = 15   # fixed-point grid for the approximant value


def default_gelu_out_params(in_params: QParams, bits: int,
                            fn=data_aware_poly_gelu, **fn_kwargs) -> QParams:
    """Output params covering fn over the input's representable range.

    Precomputed at configuration time, before any integer inference runs.
    """
    grid = np.arange(in_params.qmax + 1, dtype=np.float64)
    xs = (grid - float(in_params.zero_point)) * float(in_params.scale)
    ys = fn(xs, **fn_kwargs) if fn_kwargs else fn(xs)
    lo, hi = float(np.min(ys)), float(np.max(ys))
    if hi <= lo:
        hi = lo + 1e-6
    from .quantize import qparams_from_range

    return qparams_from_range(hi, lo, bits, "asymmetric")


def poly_gelu_int(q: QTensor, c: ErfPolyCoeffs, out_params: QParams | None = None,
                  counter: OpCounter | None = None) -> QTensor:
    """Integer-only evaluation of the polynomial GELU over codes.

    The coefficients and all rescaling multipliers are pre-encoded as
    dyadic (mantissa, shift) constants; the sqrt(2) division is folded into
    the input scale, so the kernel body is adds, multiplies, compares and
    round-half-up right shifts on int64.
    """
    p = q.params
    if p.granularity != "per_tensor":
        raise ValueError("integer GELU expects per-tensor input params")
    if out_params is None:
        out_params = default_gelu_out_params(p, p.bits, data_aware_poly_gelu, c=c)

    # configuration-time constants (real arithmetic allowed here)
    s_u = float(p.scale) / SQRT2
    m1, e1 = encode_dyadic_multiplier(s_u * (1 << _KV))
    clip_code = int(round(-c.b * (1 << _KV)))
    a_mant = int(round(c.a * (1 << _KA)))
    m2, e2 = encode_dyadic_multiplier(float(p.scale) / (1 << (_KL + 1)) / float(out_params.scale))
    z_in = int(p.zero_point)
    z_out = int(out_params.zero_point)

    km = KernelMath(counter)
    t = km.sub(km.asarray(q.codes), z_in)
    mag = km.abs(t)
    w = km.rshift_round(km.mul(mag, m1), e1)          # |x|/sqrt2 on the 2^-KV grid
    v = km.sub(km.minimum(w, clip_code), clip_code)   # clip(|u|, -b) + b, in [b, 0]
    v2 = km.rshift_round(km.mul(v, v), _KV)
    if c.degree == 4:
        vd = km.mul(v2, v2)                           # scale 2^-2KV
        shift = _KA + 2 * _KV - _KL
    elif c.degree == 3:
        vd = km.mul(v2, v)                            # scale 2^-2KV, nonpositive
        shift = _KA + 2 * _KV - _KL
    else:
        vd = km.lshift(v2, _KV)
        shift = _KA + 2 * _KV - _KL
    inner = km.add(km.rshift_round(km.mul(vd, a_mant), shift), 1 << _KL)
    gate = km.add(km.mul(km.sign(t), inner), 1 << _KL)  # (1 + L), grid 2^-KL
    acc = km.mul(t, gate)                                # x*(1+L) at s_in * 2^-KL
    out = km.add(km.rshift_round(km.mul(acc, m2), e2), z_out)
    codes = km.clip(out, 0, out_params.qmax)
    return QTensor(codes.astype(np.int32), out_params)


def data_aware_poly_gelu_int(q: QTensor, c: ErfPolyCoeffs = QUARTIC_ERF_COEFFS,
                             out_params: QParams | None = None,
                             counter: OpCounter | None = None) -> QTensor:
    return poly_gelu_int(q, c, out_params, counter)


def ibert_gelu_int(q: QTensor, c: ErfPolyCoeffs = IBERT_ERF_COEFFS,
                   out_params: QParams | None = None,
                   counter: OpCounter | None = None) -> QTensor:
    return poly_gelu_int(q, c, out_params, counter)


def shift_gelu_int(q: QTensor, out_params: QParams | None = None,
                   counter: OpCounter | None = None,
                   sigmoid_bits: int = 15) -> QTensor:
    """Bit-shift GELU: x * sigmoid(1.6875 x), sigmoid via base-2 shift exp.

    The 1.6875 multiplier is t + t>>1 + t>>3 + t>>4 on the centered codes;
    the sigmoid is exp(z)/(exp(z) + 1) with both exponentials evaluated by
    the shift-exponential at a dyadic scale and normalized by integer
    division.
    """
    from .softmax import _shift_exp_codes  # local import avoids a cycle

    p = q.params
    if out_params is None:
        out_params = default_gelu_out_params(p, p.bits, shift_gelu)

    s = float(p.scale)
    # requantize the sigmoid argument onto a dyadic grid fine enough for
    # the exponent decomposition (codes stay under ~2^15)
    f = int(np.clip(math.floor(math.log2(32767.0 / max(1.6875 * s * p.qmax, 1e-9))), 4, 30))
    ms, es = encode_dyadic_multiplier(s * (1 << f))
    m2, e2 = encode_dyadic_multiplier(s / (1 << (sigmoid_bits - 1)) / float(out_params.scale))
    z_in = int(p.zero_point)
    z_out = int(out_params.zero_point)
    M = 31

    km = KernelMath(counter)
    t = km.asarray(q.codes)
    t = km.sub(t, z_in)
    arg = km.add(km.add(t, km.rshift(t, 1)), km.sub(km.rshift(t, 3), km.rshift(t, 4)))
    zq = km.rshift_round(km.mul(arg, ms), es)           # 1.6875*x on the 2^-f grid
    mpos = km.maximum(zq, 0)
    num = _shift_exp_codes(km.sub(zq, mpos), f, km)     # e^(z - m)
    den = km.add(num, _shift_exp_codes(km.sub(0, mpos), f, km))
    recip = km.floordiv(np.int64(1) << M, den)
    sig = km.rshift(km.mul(recip, num), M - (sigmoid_bits - 1))
    acc = km.mul(t, sig)                                # x*sigmoid at s * 2^-(bits-1)
    out = km.add(km.rshift_round(km.mul(acc, m2), e2), z_out)
    codes = km.clip(out, 0, out_params.qmax)
    return QTensor(codes.astype(np.int32), out_params)


def quantize_gelu_input(x, bits: int) -> QTensor:
    """Asymmetric per-tensor input quantization for the GELU kernels."""
    from .quantize import MinMaxObserver

    obs = MinMaxObserver().observe(x)
    return quantize(x, obs.qparams(bits))
