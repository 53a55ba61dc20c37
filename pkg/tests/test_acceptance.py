"""Acceptance suite: one test per criterion, each printing a pass/fail line
and enforcing its stated tolerance and runtime budget.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they execute.
"""

import math
import time

import numpy as np
from scipy.special import erf

from intquant.gelu import (IBERT_ERF_COEFFS, QUARTIC_ERF_COEFFS,
                           data_aware_poly_gelu, data_aware_poly_gelu_int,
                           default_gelu_out_params, erf_poly_eval, fit_erf_poly,
                           gelu_reference, ibert_gelu)
from intquant.metric import approx_error, sqnr
from intquant.pipeline import (PipelineConfig, calibration_batches,
                               integer_forward, run_pipeline, stage1_analyze)
from intquant.model import build_toy_vit
from intquant.quantize import (MinMaxObserver, QTensor, dequantize_np,
                               dyadic_qparams_for_range, qparams_from_range,
                               quantize)
from intquant.softmax import BitExpConfig, efficient_bit_softmax
from intquant.tensor import rng_tensor

RANGE = (-3.0, 3.0)


def _criterion(name, budget_s, fn):
    t0 = time.monotonic()
    try:
        fn()
    except AssertionError as exc:
        print(f"[FAIL] {name}: {exc}")
        raise
    elapsed = time.monotonic() - t0
    print(f"[PASS] {name} ({elapsed:.2f}s)")
    assert elapsed < budget_s, f"runtime {elapsed:.2f}s over the {budget_s}s budget"


def test_criterion_01_erf_error_table():
    def check():
        l2_o, linf_o = approx_error(erf, lambda x: erf_poly_eval(x, QUARTIC_ERF_COEFFS), RANGE)
        l2_i, linf_i = approx_error(erf, lambda x: erf_poly_eval(x, IBERT_ERF_COEFFS), RANGE)
        assert abs(linf_o - 0.0550) <= 0.0005, f"quartic erf Linf {linf_o:.4f}"
        assert abs(l2_o - 0.0098) <= 0.15 * 0.0098, f"quartic erf L2 {l2_o:.4f}"
        assert abs(linf_i - 0.0962) <= 0.001, f"quadratic erf Linf {linf_i:.4f}"
        assert abs(l2_i - 0.0264) <= 0.15 * 0.0264, f"quadratic erf L2 {l2_i:.4f}"
        assert linf_o < linf_i and l2_o < l2_i, "ordering quartic < quadratic"

    _criterion("criterion 1: erf approximation error table", 1.0, check)


def test_criterion_02_gelu_error_table():
    def check():
        l2_o, linf_o = approx_error(gelu_reference, data_aware_poly_gelu, RANGE)
        l2_i, linf_i = approx_error(gelu_reference, ibert_gelu, RANGE)
        assert abs(linf_i - 0.0182) <= 0.001, f"quadratic GELU Linf {linf_i:.4f}"
        assert abs(linf_o - 0.0093) <= 0.0005, f"quartic GELU Linf {linf_o:.4f}"
        assert linf_o < linf_i and l2_o < l2_i, "ordering quartic < quadratic"

    _criterion("criterion 2: GELU approximation error table", 1.0, check)


def test_criterion_03_base2_exp_error_table():
    from intquant.softmax import base2_frac_approx_error

    def check():
        l2_ivit, linf_ivit = base2_frac_approx_error("ivit_linear")
        l2_exact, linf_exact = base2_frac_approx_error("ours_exact_ln2")
        _, linf_shift = base2_frac_approx_error("ours_shift")
        assert linf_ivit == 0.5, f"half-slope Linf {linf_ivit}"
        assert abs(linf_exact - (1 - math.log(2))) <= 0.0001, f"exact-ln2 Linf {linf_exact:.4f}"
        assert linf_shift == 0.3125, f"shift-slope Linf {linf_shift}"
        assert l2_exact < l2_ivit, "L2 ordering exact-ln2 < half-slope"

    _criterion("criterion 3: base-2 exponential error table", 1.0, check)


def test_criterion_04_sqnr_worked_example():
    def check():
        x = np.full(100, 100.0)            # signal power 1e4
        got20 = sqnr(x, x - 10.0)          # noise power 100
        got22 = sqnr(x, x - math.sqrt(60.0))  # noise power 60
        assert abs(got20 - 20.00) <= 0.01, f"got {got20:.4f} dB"
        assert abs(got22 - 22.21) <= 0.01, f"got {got22:.4f} dB"

    _criterion("criterion 4: sensitivity worked example (20 dB / 22.21 dB)", 1.0, check)


def test_criterion_05_search_space_count():
    def check():
        cfg = PipelineConfig(blocks=12, embed_dim=64, heads=4, tokens=16,
                             mlp_ratio=4, calib_batches=4, calib_batch_size=8)
        graph, weights = build_toy_vit(cfg.model_config(), seed=cfg.seed)
        table = stage1_analyze(graph, weights, calibration_batches(cfg), cfg)
        assert len(graph.layers) == 49, f"{len(graph.layers)} non-linear layers"
        assert len(table) == 159, f"{len(table)} metric entries"
        assert len(table) == 25 * 3 + 12 * 4 + 12 * 3

    _criterion("criterion 5: 159 (layer, candidate) evaluations", 120.0, check)


def test_criterion_06_integer_only_invariant():
    def check():
        plan, table, graph, weights = run_pipeline(PipelineConfig(blocks=2))
        total_violations = 0
        for seed in range(100):
            x = rng_tensor(seed, [graph.tokens, graph.embed_dim], "normal",
                           0.0, 1.0).values
            _, counter = integer_forward(graph, weights, plan, x)
            total_violations += counter.float_violations
        assert total_violations == 0, f"{total_violations} float violations"

    _criterion("criterion 6: zero float violations across 100 inputs", 30.0, check)


def test_criterion_07_softmax_kernel_properties():
    def check():
        rng = np.random.default_rng(0)
        cfg = BitExpConfig(bits=8)
        rows_per_length = 159  # 159 * 63 lengths > 1e4 rows
        inversions = 0
        first_example = None
        for n in range(2, 65):
            x = rng.normal(0.0, 3.0, size=(rows_per_length, n))
            p = dyadic_qparams_for_range(float(x.min()), float(x.max()))
            q = quantize(x, p)
            out = efficient_bit_softmax(q, cfg)

            shifted = QTensor(q.codes.astype(np.int64) + 321, p)
            np.testing.assert_array_equal(
                efficient_bit_softmax(shifted, cfg).codes, out.codes,
                err_msg="shift invariance in code space")

            sums = dequantize_np(out).sum(axis=-1)
            assert np.all(sums <= 1.0 + 1e-12), f"row sum above 1 at n={n}"
            assert np.all(sums >= 1.0 - (n + 1) / 128.0 - 1e-12), \
                f"row sum below floor budget at n={n}"

            codes_in = q.codes.astype(np.int64)
            codes_out = out.codes.astype(np.int64)
            order = np.argsort(codes_in, axis=-1, kind="stable")
            s_in = np.take_along_axis(codes_in, order, -1)
            s_out = np.take_along_axis(codes_out, order, -1)
            bad = (np.diff(s_in, axis=-1) > 0) & (np.diff(s_out, axis=-1) < 0)
            inversions += int(bad.sum())
            if first_example is None and bad.any():
                r, c = np.argwhere(bad)[0]
                first_example = (n, int(s_in[r, c]), int(s_in[r, c + 1]),
                                 int(s_out[r, c]), int(s_out[r, c + 1]))
        assert inversions == 0, (
            f"{inversions} strict order inversions over ~1e4 rows; first:"
            f" input codes {first_example[1]} < {first_example[2]} but output"
            f" codes {first_example[3]} > {first_example[4]} (row length"
            f" {first_example[0]}). The shift fraction jumps upward at every"
            f" integer-exponent boundary (0.3125 < 0.5 at the fraction"
            f" endpoint), so inversions are structural."
        )

    _criterion("criterion 7: softmax order/shift/sum properties on 1e4 rows",
               30.0, check)


def test_criterion_08_kernel_vs_oracle_accuracy():
    def check():
        p_in = qparams_from_range(3.0, -3.0, 8, "asymmetric")
        q = QTensor(np.arange(256, dtype=np.int64), p_in)
        x = dequantize_np(q)
        p_out = default_gelu_out_params(p_in, 8)
        got = dequantize_np(data_aware_poly_gelu_int(q, out_params=p_out))
        gelu_err = float(np.abs(got - data_aware_poly_gelu(x)).max())
        assert gelu_err <= 2 * float(p_out.scale), \
            f"GELU sweep error {gelu_err:.5f} > {2 * float(p_out.scale):.5f}"

        rng = np.random.default_rng(1)
        cfg = BitExpConfig(bits=8)
        worst = 0.0
        for _ in range(200):
            xr = rng.normal(0.0, 2.0, size=(8, 16))
            p = dyadic_qparams_for_range(float(xr.min()), float(xr.max()))
            qs = quantize(xr, p)
            xin = dequantize_np(qs)
            e = np.exp(xin - xin.max(axis=-1, keepdims=True))
            ref = e / e.sum(axis=-1, keepdims=True)
            got_s = dequantize_np(efficient_bit_softmax(qs, cfg))
            worst = max(worst, float(np.abs(got_s - ref).max()))
        assert worst <= 0.03, (
            f"softmax elementwise error {worst:.4f} > 0.03; the shift"
            f" fraction's 0.19 endpoint gap survives normalization, so the"
            f" kernel's true envelope sits near 0.10"
        )

    _criterion("criterion 8: integer kernels vs real-valued oracles", 60.0, check)


def test_criterion_09_quantizer_properties():
    def check():
        p = qparams_from_range(1.5, -0.75, 8, "asymmetric")
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.75, 1.5, size=10000)
        err = np.abs(dequantize_np(quantize(x, p)) - x)
        assert err.max() <= float(p.scale) / 2 + 1e-12, f"round trip {err.max():.6f}"

        xs = np.sort(rng.uniform(-2.0, 3.0, size=10000))
        codes = quantize(xs, p).codes.astype(int)
        assert np.all(np.diff(codes) >= 0), "monotonicity"

        batches = [rng.normal(0, 1 + 0.05 * i, size=(16, 8)) for i in range(100)]
        o1 = MinMaxObserver()
        for b in batches:
            o1.observe(b)
        o2 = MinMaxObserver().observe(np.concatenate(batches))
        assert o1.running_min == o2.running_min and o1.running_max == o2.running_max, \
            "observer order independence"

    _criterion("criterion 9: quantizer round-trip/monotonicity/observer", 10.0, check)


def test_criterion_10_fitting_oracle():
    def check():
        fits = {d: fit_erf_poly(RANGE, d, samples=2001) for d in (2, 3, 4)}
        x = np.linspace(*RANGE, 2001)
        shipped_obj = float(np.sum((erf(x) - erf_poly_eval(x, QUARTIC_ERF_COEFFS)) ** 2))
        fitted_obj = float(np.sum((erf(x) - erf_poly_eval(x, fits[4].coeffs)) ** 2))
        assert fitted_obj <= shipped_obj + 1e-9, \
            f"degree-4 objective {fitted_obj:.5f} > shipped {shipped_obj:.5f}"
        l2 = {d: fits[d].l2_err for d in (2, 3, 4)}
        assert l2[4] <= l2[3] <= l2[2], (
            f"fit L2 by degree: deg4={l2[4]:.5f}, deg3={l2[3]:.5f},"
            f" deg2={l2[2]:.5f}; the single-term families are not nested, and"
            f" on the erf-residual objective the cubic beats the quartic over"
            f" (-3, 3), so the monotone-degree direction does not hold here"
        )

    _criterion("criterion 10: fitting oracle and degree direction", 60.0, check)
