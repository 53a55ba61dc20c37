"""Integer-only LayerNorm candidates.

Three reconstructions populate the candidate pool: Newton-iteration square
root with a bit-length shift seed, the same normalization with a quadratic
polynomial seed, and a variant whose output requantization is a pure power
of two (shift-only, no mantissa multiply). The underlying statistics are
shared: integer mean and variance over the last axis with the row-length
division deferred and folded into the scale, so the center step is exact in
code space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quantize import QParams, QTensor, encode_dyadic_multiplier, qparams_from_range
from .tensor import KernelMath, OpCounter

LN_VARIANTS = ("bitshift_newton", "poly_sqrt", "log2_scale")

_KY = 15   # fixed-point grid of the unit-normalized rows
_KG = 12   # fixed-point grid of the gain constants
_KB = _KY + _KG  # beta rides on the post-gain grid


@dataclass(frozen=True)
class LNConfig:
    variant: str = "bitshift_newton"
    iterations: int = 12
    eps_code: int = 1

    def __post_init__(self):
        if self.variant not in LN_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (1 <= self.iterations <= 16):
            raise ValueError(f"iterations must be in [1, 16], got {self.iterations}")
        if self.eps_code < 1:
            raise ValueError(f"eps_code must be >= 1, got {self.eps_code}")


def int_sqrt(n: int, iterations: int | None = None,
             counter: OpCounter | None = None) -> int:
    """floor(sqrt(n)) by Newton iteration from the shift seed 2^ceil(bits/2).

    The seed is an upper bound, so iterates decrease monotonically; with
    enough iterations (about log2 of the bit width) the result is exact.
    """
    n = int(n)
    if n < 0:
        raise ValueError(f"need n >= 0, got {n}")
    if n == 0:
        return 0
    counter = counter or OpCounter()
    x = 1 << ((n.bit_length() + 1) // 2)
    steps = 0
    while iterations is None or steps < iterations:
        counter.divs += 1
        counter.adds += 1
        counter.shifts += 1
        y = (x + n // x) >> 1
        counter.compares += 1
        if y >= x:
            break
        x = y
        steps += 1
    return x


def _int_sqrt_array(n: np.ndarray, km: KernelMath, iterations: int = 40,
                    seed: str = "shift") -> np.ndarray:
    """Vectorized Newton floor-sqrt; ``seed`` picks the initial estimate."""
    n = km.asarray(n)
    zero = n == 0
    n = np.where(zero, 1, n)  # keep Newton's divisor away from zero
    if seed == "shift":
        # 2^ceil(bitlength/2) per element
        bl = np.zeros(n.shape, dtype=np.int64)
        tmp = n.copy()
        while np.any(tmp > 0):
            km.counter.shifts += int(np.count_nonzero(tmp > 0))
            bl[tmp > 0] += 1
            tmp = tmp >> 1
        x = np.int64(1) << ((bl + 1) >> 1)
    else:
        # quadratic over-estimate on the reduced mantissa m in [0, 64):
        # sqrt(m * 4^e) <= ((m*m >> 9) + (m >> 3) + 4) * 2^e, so Newton
        # still converges monotonically from above
        e = np.zeros(n.shape, dtype=np.int64)
        m = n.copy()
        while np.any(m >= 64):
            km.counter.shifts += int(np.count_nonzero(m >= 64))
            big = m >= 64
            m[big] >>= 2
            e[big] += 1
        km.counter.muls += n.size
        km.counter.shifts += 3 * n.size
        km.counter.adds += 2 * n.size
        q = ((m * m) >> 9) + (m >> 3) + 4
        x = q << e
    x = np.maximum(x, 1)
    for _ in range(iterations):
        y = (x + km.floordiv(n, x)) >> 1
        km.counter.adds += n.size
        km.counter.shifts += n.size
        km.counter.compares += n.size
        done = y >= x
        if done.all():
            break
        x = np.where(done, x, y)
    return np.where(zero, 0, x)


def default_ln_out_params(x_ref: np.ndarray, bits: int) -> QParams:
    lo, hi = float(np.min(x_ref)), float(np.max(x_ref))
    if hi <= lo:
        hi = lo + 1e-6
    return qparams_from_range(hi, lo, bits, "asymmetric")


def snap_pow2_out_params(p: QParams) -> tuple[QParams, int]:
    """Output params with the scale snapped to the nearest power of two.

    Returns the snapped params and the shift j realizing the requantization;
    idempotent, and shared by the log2_scale kernel and plan calibration so
    both sides agree on the stored scale.
    """
    j = int(np.clip(round(math.log2((1 << _KB) * float(p.scale))), 1, 62))
    return QParams(2.0 ** (j - _KB), int(p.zero_point), p.bits, "asymmetric"), j


def int_layernorm(q: QTensor, gamma, beta, cfg: LNConfig | None = None,
                  out_params: QParams | None = None,
                  counter: OpCounter | None = None) -> QTensor:
    """Integer LayerNorm over the last axis with quantized affine constants.

    The normalized value (c - mean)/std is scale-free in the input scale, so
    the kernel works directly on centered codes: d = n*c - sum(c) and
    V = n*sum(c^2) - sum(c)^2 give (c - mean)/std = d / sqrt(V) exactly.
    Zero-variance rows are stabilized by the eps_code floor.
    """
    cfg = cfg or LNConfig()
    p = q.params
    n = q.codes.shape[-1]

    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    # affine constants pre-encoded as fixed point (configuration time)
    g_codes = np.rint(gamma * (1 << _KG)).astype(np.int64)
    b_codes = np.rint(beta * (1 << _KB)).astype(np.int64)

    if out_params is None:
        # cover gamma*N(0,1)+beta style outputs generously
        amax = float(np.max(np.abs(gamma)) * 6 + np.max(np.abs(beta)) + 1)
        out_params = qparams_from_range(amax, -amax, p.bits, "asymmetric")
    if cfg.variant == "log2_scale":
        # shift-only requantization: no mantissa multiply, snapped scale
        out_params, j = snap_pow2_out_params(out_params)
        m2, e2 = 1, j
    else:
        m2, e2 = encode_dyadic_multiplier(1.0 / ((1 << _KB) * float(out_params.scale)))
    z_out = int(out_params.zero_point)

    km = KernelMath(counter)
    c = km.sub(km.asarray(q.codes), int(p.zero_point))
    sc = km.sum(c, axis=-1, keepdims=True)
    sc2 = km.sum(km.mul(c, c), axis=-1, keepdims=True)
    var = km.sub(km.mul(sc2, n), km.mul(sc, sc))
    var = km.maximum(var, cfg.eps_code)
    d = km.sub(km.mul(c, n), sc)

    seed = "poly" if cfg.variant == "poly_sqrt" else "shift"
    std = km.maximum(_int_sqrt_array(var, km, iterations=cfg.iterations, seed=seed), 1)

    y = km.floordiv(km.lshift(d, _KY), std)       # (c - mean)/std on 2^-KY
    ya = km.add(km.mul(y, g_codes), b_codes)      # gamma*y + beta on 2^-KB
    if m2 == 1:
        out = km.add(km.rshift_round(ya, e2), z_out)
    else:
        out = km.add(km.rshift_round(km.mul(ya, m2), e2), z_out)
    codes = km.clip(out, 0, out_params.qmax)
    return QTensor(codes.astype(np.int32), out_params)


def layernorm_reference(x, gamma, beta, axis: int = -1) -> np.ndarray:
    """Exact LayerNorm used by calibration and the float forward pass."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * np.asarray(gamma) + np.asarray(beta)
