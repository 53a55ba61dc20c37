"""Integer-only non-linear kernels for transformer inference, a post-training
quantizer, and a unified-metric pipeline that assigns one approximation
function per non-linear layer."""

from .gelu import (ErfPolyCoeffs, FitResult, IBERT_ERF_COEFFS,
                   QUARTIC_ERF_COEFFS, data_aware_poly_gelu,
                   data_aware_poly_gelu_int, erf_poly_eval, fit_erf_poly,
                   ibert_gelu, shift_gelu)
from .layernorm import LNConfig, int_layernorm, int_sqrt
from .metric import (approx_error, op_count, perturbation, softplus, sqnr,
                     unified_score)
from .model import CANDIDATE_POOLS, ModelGraph, build_toy_vit, forward_float
from .pipeline import (AssignmentPlan, PipelineConfig, integer_forward,
                       run_pipeline, stage1_analyze, stage2_assign,
                       stage3_calibrate)
from .quantize import (MinMaxObserver, QParams, QTensor, dequantize, observe,
                       qparams_from_range, quantize)
from .softmax import (BitExpConfig, base2_frac_approx_error, decompose,
                      efficient_bit_exp, efficient_bit_softmax, iexp_softmax,
                      int_div_normalize, log2_softmax, log2e_shift,
                      max_subtract, shiftmax)
from .tensor import (InstrumentedInt, IntegerViolation, KernelMath, OpCounter,
                     Tensor, TensorFormatError, rng_tensor, tensor_read,
                     tensor_write)

__version__ = "0.1.0"
