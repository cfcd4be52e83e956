import math
import random
from fractions import Fraction

import gmpy2
import mpmath as mp
import pytest

from caadnn import FpContext, FpFormat, run_model, tensor_from_input
from caadnn.engine import EngineConfig
from caadnn.model import (ActivationLayer, BatchNormLayer, Conv2dLayer,
                          DenseLayer, FlattenLayer, InputTensor, ModelSpec,
                          PoolLayer, SoftmaxLayer, TensorSpec)
from fp_reference import eval_model_fp
from model_gen import random_micro_model
from mp_oracle import eval_model_mp

INF = math.inf


def make_ctx(k=11, u_max="2^-7"):
    return FpContext(FpFormat(k), u_max=u_max)


def act(kind):
    layer = ActivationLayer()
    layer.kind = kind
    return layer


def pool(kind, window, stride=None):
    p = PoolLayer(pool=window, stride=stride or window)
    p.kind = kind
    return p


def check_soundness(model, inp, ctx, ks=(8, 11, 16, 24), slack=mp.mpf("1e-35")):
    """The master property on one model/input: oracle in exact_range, each
    emulated evaluation in rounded_range and inside both bounds."""
    x = tensor_from_input(inp, ctx)
    out, _ = run_model(model, x, ctx)
    with mp.workdps(60):
        oracle = eval_model_mp(model, inp.tensor.data)
        for k in ks:
            if 2.0 ** (1 - k) > ctx.u_max:
                continue
            fmt = FpFormat(k)
            fp = eval_model_fp(model, inp.tensor.data, fmt)
            u = mp.mpf(2) ** (1 - k)
            for i, q in enumerate(out.elems):
                lo = mp.mpf(str(q.exact_range.lo))
                hi = mp.mpf(str(q.exact_range.hi))
                assert lo - slack <= oracle[i] <= hi + slack, \
                    f"oracle escaped exact_range at output {i}"
                assert q.rounded_range.contains(fp[i]), \
                    f"k={k}: emulated value escaped rounded_range at output {i}"
                got = gmpy2.mpq(fp[i])
                got = mp.mpf(got.numerator) / mp.mpf(got.denominator)
                err = abs(got - oracle[i])
                if q.abs_bound != INF:
                    assert err <= mp.mpf(q.abs_bound) * u + slack, \
                        f"k={k}: |emulated - oracle| = {err} > abs bound at output {i}"
                if q.rel_bound != INF and oracle[i] != 0:
                    assert err <= mp.mpf(q.rel_bound) * u * abs(oracle[i]) + slack, \
                        f"k={k}: relative bound violated at output {i}"
                if k == ctx.format.k:
                    assert fp[i] == q.fp_value, \
                        f"engine fp_value disagrees with reference evaluation at {i}"
    return out


class TestDense:
    def test_identity_matrix_copy_semantics(self):
        ctx = make_ctx()
        model = ModelSpec(1, "id", (3,), [DenseLayer(
            weights=TensorSpec((3, 3), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            bias=TensorSpec((3,), [0.0] * 3))])
        inp = InputTensor(TensorSpec((3,), [0.3, 0.7, 1.9]))
        x = tensor_from_input(inp, ctx)
        out, _ = run_model(model, x, ctx)
        for xi, yi in zip(x.elems, out.elems):
            assert yi.id == xi.id
            assert yi.rel_bound == xi.rel_bound

    def test_zero_matrix_gives_exact_bias(self):
        ctx = make_ctx()
        model = ModelSpec(1, "zero", (2,), [DenseLayer(
            weights=TensorSpec((2, 2), [0.0] * 4),
            bias=TensorSpec((2,), [1.5, -0.25]))])
        out, _ = run_model(model, tensor_from_input(
            InputTensor(TensorSpec((2,), [9.0, -3.0])), ctx), ctx)
        assert [float(q.fp_value) for q in out.elems] == [1.5, -0.25]
        assert all(q.abs_bound == 0 for q in out.elems)

    def test_random_dense_soundness(self):
        # one fixed 8x8 dense layer, several hundred sampled inputs at k = 11
        ctx = make_ctx(11)
        rng = random.Random(88)
        w = [rng.uniform(-1, 1) for _ in range(64)]
        b = [rng.uniform(-1, 1) for _ in range(8)]
        model = ModelSpec(1, "d8", (8,), [DenseLayer(
            weights=TensorSpec((8, 8), w), bias=TensorSpec((8,), b))])
        for _ in range(250):
            inp = InputTensor(TensorSpec((8,), [rng.uniform(-2, 2) for _ in range(8)]))
            check_soundness(model, inp, ctx, ks=(11,))


class TestConv:
    def test_one_by_one_identity_kernel(self):
        ctx = make_ctx()
        model = ModelSpec(1, "c1", (3, 3, 1), [Conv2dLayer(
            kernel=TensorSpec((1, 1, 1, 1), [1.0]),
            bias=TensorSpec((1,), [0.0]), stride=(1, 1), padding="valid")])
        inp = InputTensor(TensorSpec((3, 3, 1), [float(i) for i in range(9)]))
        x = tensor_from_input(inp, ctx)
        out, _ = run_model(model, x, ctx)
        assert [float(q.fp_value) for q in out.elems] == [float(i) for i in range(9)]
        # nonzero inputs pass through as copies; the zero one becomes the
        # (equally exact) zero bias constant
        assert all(y.id == xi.id for xi, y in zip(x.elems[1:], out.elems[1:]))
        assert out.elems[0].abs_bound == 0

    def test_zero_kernel_gives_bias(self):
        ctx = make_ctx()
        model = ModelSpec(1, "c0", (3, 3, 1), [Conv2dLayer(
            kernel=TensorSpec((2, 2, 1, 2), [0.0] * 8),
            bias=TensorSpec((2,), [0.5, -1.0]), stride=(1, 1), padding="valid")])
        out, _ = run_model(model, tensor_from_input(
            InputTensor(TensorSpec((3, 3, 1), [1.0] * 9)), ctx), ctx)
        vals = [float(q.fp_value) for q in out.elems]
        assert vals == [0.5, -1.0] * 4

    def test_valid_conv_against_naive_loop_oracle(self):
        # independent brute-force convolution at high precision
        ctx = make_ctx(11)
        rng = random.Random(4)
        kern = [rng.uniform(-1, 1) for _ in range(9)]
        bias = [rng.uniform(-0.5, 0.5)]
        img = [rng.uniform(-1, 1) for _ in range(25)]
        model = ModelSpec(1, "c3", (5, 5, 1), [Conv2dLayer(
            kernel=TensorSpec((3, 3, 1, 1), kern),
            bias=TensorSpec((1,), bias), stride=(1, 1), padding="valid")])
        out, _ = run_model(model, tensor_from_input(
            InputTensor(TensorSpec((5, 5, 1), img)), ctx), ctx)
        assert out.shape == (3, 3, 1)
        with mp.workdps(50):
            for oi in range(3):
                for oj in range(3):
                    acc = mp.mpf(0)
                    for ki in range(3):
                        for kj in range(3):
                            acc += mp.mpf(kern[ki * 3 + kj]) * mp.mpf(img[(oi + ki) * 5 + (oj + kj)])
                    acc += mp.mpf(bias[0])
                    q = out.elems[oi * 3 + oj]
                    assert mp.mpf(str(q.exact_range.lo)) - mp.mpf("1e-30") <= acc
                    assert acc <= mp.mpf(str(q.exact_range.hi)) + mp.mpf("1e-30")

    def test_same_padding_soundness(self):
        ctx = make_ctx(11)
        rng = random.Random(14)
        model = ModelSpec(1, "cs", (4, 4, 2), [Conv2dLayer(
            kernel=TensorSpec((3, 3, 2, 2), [rng.uniform(-0.7, 0.7) for _ in range(36)]),
            bias=TensorSpec((2,), [0.1, -0.2]), stride=(2, 2), padding="same"),
            act("tanh"), FlattenLayer()])
        inp = InputTensor(TensorSpec((4, 4, 2), [rng.uniform(-1, 1) for _ in range(32)]))
        check_soundness(model, inp, ctx, ks=(8, 11))


class TestPoolingAndBn:
    def test_maxpool_disjoint_copies(self):
        ctx = make_ctx()
        model = ModelSpec(1, "mp", (2, 2, 1), [pool("maxpool2d", (2, 2))])
        inp = InputTensor(TensorSpec((2, 2, 1), [1.0, 2.0, 3.0, 9.0]))
        x = tensor_from_input(inp, ctx)
        out, _ = run_model(model, x, ctx)
        assert out.elems[0].id == x.elems[3].id  # provable max is a copy

    def test_avgpool_quarter_is_exact(self):
        ctx = make_ctx()
        model = ModelSpec(1, "ap", (2, 2, 1), [pool("avgpool2d", (2, 2))])
        inp = InputTensor(TensorSpec((2, 2, 1), [1.0, 2.0, 3.0, 4.0]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        q = out.elems[0]
        assert float(q.fp_value) == 2.5
        assert q.abs_bound == 0  # all sums and the 1/4 scale are exact

    def test_batchnorm_identity_configuration(self):
        ctx = make_ctx()
        bn = BatchNormLayer(
            gamma=TensorSpec((3,), [1.0] * 3), beta=TensorSpec((3,), [0.0] * 3),
            moving_mean=TensorSpec((3,), [0.0] * 3),
            moving_var=TensorSpec((3,), [1.0 - 2.0 ** -10] * 3), epsilon=2.0 ** -10)
        model = ModelSpec(1, "bn", (3,), [bn])
        inp = InputTensor(TensorSpec((3,), [1.0, -2.0, 0.5]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        for v, q in zip([1.0, -2.0, 0.5], out.elems):
            assert float(q.fp_value) == v  # var + eps = 1 exactly

    def test_batchnorm_cancellation_case(self):
        ctx = make_ctx()
        bn = BatchNormLayer(
            gamma=TensorSpec((1,), [1.0]), beta=TensorSpec((1,), [0.0]),
            moving_mean=TensorSpec((1,), [1.0]),
            moving_var=TensorSpec((1,), [1.0]), epsilon=0.001)
        model = ModelSpec(1, "bn2", (1,), [bn])
        inp = InputTensor(TensorSpec((1,), [1.3]), range_global=(0.0, 2.0))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        q = out.elems[0]
        assert q.rel_bound == INF  # x - mean crosses zero
        assert q.abs_bound < INF

    def test_avgpool_of_identical_id_inputs(self):
        # four copies of one quantity: ranges behave as plain IA (4x then /4)
        ctx = make_ctx()
        from caadnn import mk_input
        from caadnn.engine import CaaTensor, ModelEvaluator
        q = mk_input(ctx.ia.interval(1, 2), 1.5, ctx)
        x = CaaTensor((2, 2, 1), [q, q, q, q])
        model = ModelSpec(1, "ap4", (2, 2, 1), [pool("avgpool2d", (2, 2))])
        out, _ = ModelEvaluator(model, ctx).run(x)
        r = out.elems[0]
        assert float(r.exact_range.lo) <= 1 and float(r.exact_range.hi) >= 2
        assert r.rel_bound < INF

    def test_pendulum_shaped_model_interval_input(self):
        # dense -> tanh -> dense -> tanh -> dense scalar on the box [-6,6]^2:
        # finite abs bound; rel unbounded exactly when the range spans zero
        ctx = make_ctx()
        rng = random.Random(40)
        def dense(m, n):
            return DenseLayer(
                weights=TensorSpec((m, n), [rng.uniform(-0.8, 0.8) for _ in range(m * n)]),
                bias=TensorSpec((m,), [rng.uniform(-0.3, 0.3) for _ in range(m)]))
        model = ModelSpec(1, "pend3", (2,), [
            dense(6, 2), act("tanh"), dense(6, 6), act("tanh"), dense(1, 6)])
        inp = InputTensor(TensorSpec((2,), [0.0, 0.0]), range_global=(-6.0, 6.0))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        q = out.elems[0]
        assert q.abs_bound < INF
        assert (q.rel_bound == INF) == q.exact_range.contains_zero()

    def test_pooling_soundness_random(self):
        ctx = make_ctx(11)
        rng = random.Random(915)
        for kind in ("maxpool2d", "avgpool2d"):
            model = ModelSpec(1, "p", (4, 4, 2), [pool(kind, (2, 2)), FlattenLayer()])
            for _ in range(10):
                inp = InputTensor(TensorSpec((4, 4, 2),
                                             [rng.uniform(-3, 3) for _ in range(32)]))
                check_soundness(model, inp, ctx, ks=(8, 11))


class TestActivationsAndSoftmax:
    def test_relu_all_negative_exact_zero(self):
        ctx = make_ctx()
        model = ModelSpec(1, "r", (2,), [act("relu")])
        inp = InputTensor(TensorSpec((2,), [-1.0, -2.0]), range_global=(-3.0, -0.5))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        assert all(q.exact_range.is_point() and q.exact_range.lo == 0
                   for q in out.elems)

    def test_sigmoid_codomain(self):
        ctx = make_ctx()
        model = ModelSpec(1, "s", (3,), [act("sigmoid")])
        inp = InputTensor(TensorSpec((3,), [-50.0, 0.0, 50.0]))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        for q in out.elems:
            assert float(q.exact_range.lo) >= 0 and float(q.exact_range.hi) <= 1
            assert q.rel_bound < INF  # 1 + e^-x never cancels

    def test_tanh_abs_preserved(self):
        ctx = make_ctx()
        model = ModelSpec(1, "t", (1,),
                          [DenseLayer(weights=TensorSpec((1, 1), [Fraction(1, 10)]),
                                      bias=TensorSpec((1,), [0.0])), act("tanh")])
        inp = InputTensor(TensorSpec((1,), [10.0]))
        x = tensor_from_input(inp, ctx)
        mid, _ = run_model(ModelSpec(1, "t0", (1,), model.layers[:1]), x, ctx)
        out, _ = run_model(model, x, ctx)
        assert out.elems[0].abs_bound <= mid.elems[0].abs_bound + 0.5 * (1 + 1e-9)

    def test_softmax_outputs_sum_contains_one(self):
        ctx = make_ctx()
        rng = random.Random(2)
        model = ModelSpec(1, "sm", (5,), [SoftmaxLayer(axis=-1)])
        for _ in range(20):
            inp = InputTensor(TensorSpec((5,), [rng.uniform(-4, 4) for _ in range(5)]))
            out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
            total = out.elems[0].exact_range
            for q in out.elems[1:]:
                total = ctx.ia.add(total, q.exact_range)
            assert total.contains(1)
            for q in out.elems:
                assert 0 <= float(q.exact_range.lo) and float(q.exact_range.hi) <= 1

    def test_plain_softmax_config(self):
        ctx = make_ctx()
        model = ModelSpec(1, "sm", (3,), [SoftmaxLayer(axis=-1)])
        inp = InputTensor(TensorSpec((3,), [1.0, 2.0, 3.0]))
        stable, _ = run_model(model, tensor_from_input(inp, ctx), ctx,
                              EngineConfig(stable_softmax=True))
        plain, _ = run_model(model, tensor_from_input(inp, ctx), ctx,
                             EngineConfig(stable_softmax=False))
        with mp.workdps(40):
            oracle = eval_model_mp(model, inp.tensor.data)
            for qs, qp, o in zip(stable.elems, plain.elems, oracle):
                for q in (qs, qp):
                    assert mp.mpf(str(q.exact_range.lo)) - mp.mpf("1e-25") <= o \
                        <= mp.mpf(str(q.exact_range.hi)) + mp.mpf("1e-25")

    def test_softmax_along_axis_of_matrix(self):
        ctx = make_ctx()
        model = ModelSpec(1, "sm2", (2, 3, 1), [SoftmaxLayer(axis=1)])
        vals = [1.0, 2.0, 3.0, -1.0, 0.0, 1.0]
        inp = InputTensor(TensorSpec((2, 3, 1), vals))
        out, _ = run_model(model, tensor_from_input(inp, ctx), ctx)
        for row in range(2):
            lane = [float(out.elems[row * 3 + j].fp_value) for j in range(3)]
            assert abs(sum(lane) - 1) < 0.01


class TestRunModel:
    def test_empty_model_returns_input(self):
        ctx = make_ctx()
        model = ModelSpec(1, "e", (2,), [])
        inp = InputTensor(TensorSpec((2,), [1.0, 2.0]))
        x = tensor_from_input(inp, ctx)
        out, summaries = run_model(model, x, ctx)
        assert out is x and summaries == []

    def test_determinism_across_repeated_runs(self):
        ctx = make_ctx()
        rng = random.Random(111)
        model, inp = random_micro_model(rng)
        outs = []
        for _ in range(2):
            x = tensor_from_input(inp, ctx)
            out, _ = run_model(model, x, ctx)
            outs.append([(str(q.fp_value), q.abs_bound, q.rel_bound,
                          str(q.exact_range.lo), str(q.rounded_range.hi))
                         for q in out.elems])
        assert outs[0] == outs[1]

    def test_wrong_input_shape(self):
        ctx = make_ctx()
        model = ModelSpec(1, "e", (2,), [])
        inp = InputTensor(TensorSpec((3,), [1.0, 2.0, 3.0]))
        with pytest.raises(Exception, match="input shape"):
            run_model(model, tensor_from_input(inp, ctx), ctx)

    def test_dropout_is_identity_with_warning(self):
        import warnings
        from caadnn.model import LayerSpec

        class DropoutLayer(LayerSpec):
            kind = "dropout"

        ctx = make_ctx()
        model = ModelSpec(1, "d", (2,), [DropoutLayer()])
        x = tensor_from_input(InputTensor(TensorSpec((2,), [1.0, 2.0])), ctx)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out, _ = run_model(model, x, ctx)
        assert any("dropout" in str(w.message) for w in caught)
        assert out.elems == x.elems

    def test_layer_summaries(self):
        ctx = make_ctx()
        model = ModelSpec(1, "s", (2,), [DenseLayer(
            weights=TensorSpec((2, 2), [1.0, 0.5, -0.5, 1.0]),
            bias=TensorSpec((2,), [0.0, 0.0])), act("relu")])
        inp = InputTensor(TensorSpec((2,), [1.0, 2.0]))
        out, summaries = run_model(model, tensor_from_input(inp, ctx), ctx)
        assert [s.kind for s in summaries] == ["dense", "relu"]
        assert summaries[0].output_shape == (2,)
        assert summaries[0].magnitude_exponent is not None

    def test_range_certificate_covers_grid_inputs(self):
        # a range-annotated run certifies every representable input inside it
        ctx = make_ctx(11)
        rng = random.Random(321)
        w = [rng.uniform(-0.5, 0.5) for _ in range(8)]
        model = ModelSpec(1, "rc", (2,), [
            DenseLayer(weights=TensorSpec((4, 2), w),
                       bias=TensorSpec((4,), [0.1, -0.1, 0.2, 0.0])),
            act("tanh")])
        inp = InputTensor(TensorSpec((2,), [0.0, 0.0]), range_global=(-6.0, 6.0))
        x = tensor_from_input(inp, ctx)
        out, _ = run_model(model, x, ctx)
        k0 = ctx.coarsest_k
        fmt0 = FpFormat(k0)
        with mp.workdps(50):
            for _ in range(40):
                # sample inputs on the coarsest grid (exact at every tested k)
                vals = [float(fmt0.round(rng.uniform(-6, 6))) for _ in range(2)]
                oracle = eval_model_mp(model, vals)
                for k in (8, 11):
                    fp = eval_model_fp(model, vals, FpFormat(k))
                    u = mp.mpf(2) ** (1 - k)
                    for i, q in enumerate(out.elems):
                        assert q.rounded_range.contains(fp[i])
                        got = gmpy2.mpq(fp[i])
                        got = mp.mpf(got.numerator) / mp.mpf(got.denominator)
                        assert abs(got - oracle[i]) <= mp.mpf(q.abs_bound) * u + mp.mpf("1e-30")
