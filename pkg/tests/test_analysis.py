import json
import math
import random
from fractions import Fraction

import pytest

from caadnn import (FpContext, FpFormat, Margin, argmax_stability,
                    build_report, emit_report, margins_from_confidence,
                    required_precision, run_model, softmax_input_tolerance,
                    tensor_from_input)
from caadnn.analysis import summation_precision_hint
from caadnn.model import InputTensor, ModelSpec, SoftmaxLayer, TensorSpec

INF = math.inf


def make_ctx(k=11, u_max="2^-7"):
    return FpContext(FpFormat(k), u_max=u_max)


class TestMargins:
    def test_worked_example_exact(self):
        m = margins_from_confidence(Fraction(6, 10))
        assert m.mu == Fraction(1, 10)
        assert m.nu == Fraction(1, 11)
        assert m.nu > Fraction(909, 10000)  # 0.0909

    def test_limits(self):
        m = margins_from_confidence(Fraction(1))
        assert m.mu == Fraction(1, 2) and m.nu == Fraction(1, 3)
        tiny = margins_from_confidence(Fraction(500001, 1000000))
        assert 0 < tiny.mu < Fraction(1, 100000)
        assert 0 < tiny.nu < Fraction(1, 100000)

    def test_nu_below_twice_mu(self):
        rng = random.Random(9)
        for _ in range(500):
            p = Fraction(rng.randint(500001, 1000000), 1000000)
            m = margins_from_confidence(p)
            assert 0 < m.nu < 2 * m.mu

    def test_domain(self):
        for bad in (0.5, 0.2, 1.0001, -1):
            with pytest.raises(ValueError):
                margins_from_confidence(bad)

    def test_accepts_decimal_strings(self):
        assert margins_from_confidence("0.60").nu == Fraction(1, 11)


class TestSoftmaxTolerance:
    def test_worked_example(self):
        tol = softmax_input_tolerance(margins_from_confidence(Fraction(6, 10)))
        assert tol == Fraction(1, 11) / Fraction(11, 2)
        assert tol > Fraction(165, 10000)  # 1.65e-2
        assert tol >= Fraction(1, 64)      # about 2^-6

    def test_zero_margin_limit(self):
        m = Margin(Fraction(1, 2), Fraction(0), Fraction(0))
        assert softmax_input_tolerance(m) == 0

    def test_linear(self):
        m = Margin(Fraction(1), Fraction(1, 2), Fraction(55, 100))
        assert softmax_input_tolerance(m) == Fraction(1, 10)


class TestRequiredPrecision:
    def test_umax_floor_dominates(self):
        # bound 3.4u against nu = 1/11 is already satisfied at the coarsest
        # certified precision, so the u_max floor gives k = 8
        m = margins_from_confidence(Fraction(6, 10))
        assert required_precision(3.4, INF, m, "2^-7") == 8

    def test_both_unbounded_gives_none(self):
        m = margins_from_confidence(Fraction(6, 10))
        assert required_precision(INF, INF, m, "2^-7") is None

    def test_strict_margin_comparison(self):
        # abs bound 1 against mu = 2^-10: k = 11 gives an error of exactly
        # 2^-10, which still permits a tie, so k = 12 is required
        m = Margin(Fraction(1, 2) + Fraction(1, 1024), Fraction(1, 1024), Fraction(1, 1024))
        assert required_precision(INF, 1.0, m, "2^-7") == 12

    def test_monotone_in_margin_and_bound(self):
        rng = random.Random(12)
        for _ in range(300):
            p1 = Fraction(rng.randint(520, 990), 1000)
            p2 = p1 + Fraction(rng.randint(1, 1000 - int(p1 * 1000)), 1000)
            m1, m2 = margins_from_confidence(p1), margins_from_confidence(min(p2, Fraction(1)))
            b = Fraction(rng.randint(1, 10**6), rng.randint(1, 10**3))
            b2 = b * rng.randint(2, 50)
            k_small_margin = required_precision(float(b), INF, m1, "2^-7")
            k_big_margin = required_precision(float(b), INF, m2, "2^-7")
            assert k_big_margin <= k_small_margin
            k_bigger_bound = required_precision(float(b2), INF, m1, "2^-7")
            assert k_bigger_bound >= k_small_margin

    def test_exactly_satisfiable_route_chooses_min(self):
        m = margins_from_confidence(Fraction(6, 10))
        k_rel = required_precision(1000.0, INF, m, "2^-7")
        k_abs = required_precision(INF, 1000.0, m, "2^-7")
        both = required_precision(1000.0, 1000.0, m, "2^-7")
        assert both == min(k_rel, k_abs)

    def test_summation_hint(self):
        # tolerance ~1.65e-2 needs a 2^-6 grid; magnitude 2^g adds g bits
        assert summation_precision_hint(Fraction(165, 10000), 0) == 6
        assert summation_precision_hint(Fraction(165, 10000), 3) == 9


class TestArgmaxStability:
    def test_disjoint_ranges_stable(self):
        ctx = make_ctx()
        model = ModelSpec(1, "sm", (2,), [SoftmaxLayer(axis=-1)])
        inp = InputTensor(TensorSpec((2,), [4.0, -4.0]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        v = argmax_stability(out, ctx)
        assert v.stable and v.top1_index == 0 and v.top2_index == 1

    def test_exact_tie_unstable(self):
        ctx = make_ctx()
        model = ModelSpec(1, "sm", (2,), [SoftmaxLayer(axis=-1)])
        inp = InputTensor(TensorSpec((2,), [1.0, 1.0]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        v = argmax_stability(out, ctx)
        assert not v.stable
        assert v.top1_index == 0  # tie broken toward the lowest index

    def test_overlapping_ranges_unstable(self):
        ctx = make_ctx()
        model = ModelSpec(1, "sm", (2,), [SoftmaxLayer(axis=-1)])
        inp = InputTensor(TensorSpec((2,), [0.51, 0.5]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        assert not argmax_stability(out, ctx).stable

    def test_stability_is_conservative_vs_perturbation(self):
        # whenever stable, sampled perturbations within +-abs_bound*u at any
        # certified k never flip the argmax
        import mpmath as mp
        from fp_reference import eval_model_fp
        ctx = make_ctx()
        rng = random.Random(6)
        model = ModelSpec(1, "sm", (4,), [SoftmaxLayer(axis=-1)])
        stable_seen = 0
        for _ in range(60):
            vals = [rng.uniform(-3, 3) for _ in range(4)]
            inp = InputTensor(TensorSpec((4,), vals))
            out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
            v = argmax_stability(out, ctx)
            if not v.stable:
                continue
            stable_seen += 1
            for k in (8, 11, 16):
                fp = [float(x) for x in eval_model_fp(model, vals, FpFormat(k))]
                u = 2.0 ** (1 - k)
                for _ in range(20):
                    perturbed = [x + rng.uniform(-q.abs_bound * u, q.abs_bound * u)
                                 for x, q in zip(fp, out.elems)]
                    assert max(range(4), key=lambda i: perturbed[i]) == v.top1_index
        assert stable_seen > 10


class TestReport:
    def _report(self, tmp_path, vals, p_star=None):
        ctx = make_ctx()
        model = ModelSpec(1, "sm", (len(vals),), [SoftmaxLayer(axis=-1)])
        inp = InputTensor(TensorSpec((len(vals),), vals))
        out, summaries = run_model(model, tensor_from_input(inp, ctx), ctx)
        margin = margins_from_confidence(p_star) if p_star else None
        report = build_report("sm", out, summaries, ctx, margin=margin,
                              has_softmax=True, input_name="x.json")
        path = tmp_path / "report.json"
        emit_report(report, path)
        return json.loads(path.read_text())

    def test_report_structure_and_bounds(self, tmp_path):
        doc = self._report(tmp_path, [2.0, -1.0], p_star="0.6")
        assert doc["report_version"] == 1
        assert doc["context"]["u_max"] == "2^-7"
        assert len(doc["outputs"]) == 2
        out0 = doc["outputs"][0]
        assert out0["abs_bound_u"] is not None
        assert not out0["unbounded_rel"]
        assert doc["verdicts"]["argmax_stable"] is True
        assert doc["verdicts"]["required_k"] == 8
        assert doc["verdicts"]["margins"]["nu"] == "1/11"

    def test_unbounded_encoded_as_null_with_flag(self, tmp_path):
        ctx = make_ctx()
        from caadnn.model import ActivationLayer, DenseLayer
        tanh = ActivationLayer()
        tanh.kind = "tanh"
        model = ModelSpec(1, "pend", (2,), [
            DenseLayer(weights=TensorSpec((1, 2), [1.0, -1.0]),
                       bias=TensorSpec((1,), [0.0])), tanh])
        inp = InputTensor(TensorSpec((2,), [0.0, 0.0]), range_global=(-6.0, 6.0))
        out, summaries = run_model(model, tensor_from_input(inp, ctx), ctx)
        report = build_report("pend", out, summaries, ctx, has_softmax=False)
        doc = report.document
        assert doc["outputs"][0]["rel_bound_u"] is None
        assert doc["outputs"][0]["unbounded_rel"] is True
        assert doc["outputs"][0]["abs_bound_u"] is not None
        assert doc["verdicts"]["argmax_stable"] is None

    def test_reports_byte_identical_across_runs(self, tmp_path):
        a = self._report(tmp_path, [1.0, 0.5, -2.0], p_star="0.75")
        b = self._report(tmp_path, [1.0, 0.5, -2.0], p_star="0.75")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
