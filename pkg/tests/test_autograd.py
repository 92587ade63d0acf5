"""Tape engine tests: every primitive against central finite differences,
plus the bookkeeping contracts (scalar loss, accumulation, unsupported ops).
"""

import mpmath
import numpy as np
import pytest

from geomil import autograd as ag

TOL = 1e-6  # finite-difference agreement for unit-scale inputs


def check(build, params, step=1e-5, tol=TOL):
    errs = ag.check_gradients(build, params, step=step)
    worst = max(errs.values())
    assert worst <= tol, errs
    return worst


class TestArithmetic:
    def test_add_sub_mul_div_broadcast(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        w = rng.standard_normal((4, 3))
        check(lambda t, v: ag.sum_(ag.mul(ag.add(v["a"], v["b"]), w)), {"a": a, "b": b})
        check(lambda t, v: ag.sum_(ag.mul(ag.sub(v["a"], v["b"]), w)), {"a": a, "b": b})
        check(lambda t, v: ag.sum_(ag.mul(ag.mul(v["a"], v["b"]), w)), {"a": a, "b": b})
        check(lambda t, v: ag.sum_(ag.mul(ag.div(v["a"], v["b"]), w)),
              {"a": a, "b": b + 3.0})

    def test_matmul(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 5))
        check(lambda t, v: ag.sum_(ag.mul(ag.matmul(v["a"], v["b"]), w)),
              {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 5))})

    def test_matmul_rejects_vectors(self):
        tape = ag.Tape()
        with pytest.raises(ag.UnsupportedOpError):
            ag.matmul(tape.var(np.ones(3)), np.ones((3, 2)))

    def test_linear_gradient_is_input(self):
        # loss = <w, x>: d loss / d w = x
        x = np.array([1.0, -2.0, 3.0])
        tape = ag.Tape()
        w = tape.var(np.zeros(3))
        loss = ag.sum_(ag.mul(w, x))
        ag.backward(tape, loss)
        assert np.allclose(w.grad, x)

    def test_reshape_concat_sum_axis(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((4, 6))
        check(lambda t, v: ag.sum_(ag.mul(ag.concat_cols(v["a"], v["b"]), w)),
              {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal((4, 3))})
        w2 = rng.standard_normal(12)
        check(lambda t, v: ag.sum_(ag.mul(ag.reshape(v["a"], (12,)), w2)),
              {"a": rng.standard_normal((4, 3))})
        w3 = rng.standard_normal(3)
        check(lambda t, v: ag.sum_(ag.mul(ag.sum_(v["a"], axis=0), w3)),
              {"a": rng.standard_normal((4, 3))})


class TestNonlinearities:
    def test_gelu_sigmoid_tanh_softmax(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 3))
        check(lambda t, v: ag.sum_(ag.mul(ag.gelu(v["x"]), w)), {"x": x})
        check(lambda t, v: ag.sum_(ag.mul(ag.sigmoid(v["x"]), w)), {"x": x})
        check(lambda t, v: ag.sum_(ag.mul(ag.tanh(v["x"]), w)), {"x": x})
        check(lambda t, v: ag.sum_(ag.mul(ag.softmax(v["x"]), w)), {"x": x})

    def test_layer_norm(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((4, 3))
        check(
            lambda t, v: ag.sum_(ag.mul(ag.layer_norm(v["x"], v["g"], v["b"]), w)),
            {"x": rng.standard_normal((4, 3)), "g": rng.standard_normal(3),
             "b": rng.standard_normal(3)},
        )
        # parameterless variant
        check(lambda t, v: ag.sum_(ag.mul(ag.layer_norm(v["x"]), w)),
              {"x": rng.standard_normal((4, 3))})


class TestSequenceOps:
    def test_causal_conv_both_arguments(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((9, 2))
        check(lambda t, v: ag.sum_(ag.mul(ag.causal_conv(v["u"], v["k"]), w)),
              {"u": rng.standard_normal((9, 2)), "k": rng.standard_normal((9, 2))})

    def test_gather_scatter(self):
        rng = np.random.default_rng(6)
        w4 = rng.standard_normal((4, 3))
        idx = np.array([0, 2, 2, 1])
        check(lambda t, v: ag.sum_(ag.mul(ag.gather_rows(v["x"], idx), w4)),
              {"x": rng.standard_normal((3, 3))})
        idx2 = np.array([0, 2, 2])
        check(lambda t, v: ag.sum_(ag.mul(ag.scatter_rows(v["x"], idx2, 4), w4)),
              {"x": rng.standard_normal((3, 3))})

    def test_max_pool_subgradient_is_one_hot(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0], [2.0, 4.0]])
        tape = ag.Tape()
        xv = tape.var(x)
        pooled, arg = ag.max_pool_rows(xv)
        ag.backward(tape, ag.sum_(pooled))
        expected = np.zeros_like(x)
        expected[arg, np.arange(2)] = 1.0
        assert np.array_equal(xv.grad, expected)
        assert list(arg) == [1, 0]


class TestHyperbolicOps:
    def test_geometry_primitives(self):
        rng = np.random.default_rng(7)
        c = 0.7
        x = rng.standard_normal((4, 3)) * 0.2
        y = rng.standard_normal((4, 3)) * 0.2
        w = rng.standard_normal((4, 3))
        check(lambda t, v: ag.sum_(ag.mul(ag.mobius_add(v["x"], v["y"], c), w)),
              {"x": x, "y": y})
        check(lambda t, v: ag.sum_(ag.mul(ag.exp_map0(v["v"], c), w)),
              {"v": rng.standard_normal((4, 3)) * 0.8})
        check(lambda t, v: ag.sum_(ag.mul(ag.log_map0(v["y"], c), w)), {"y": y})
        check(lambda t, v: ag.sum_(ag.dist_to_origin(v["y"], c)), {"y": y})
        # projection, both inactive and active
        check(lambda t, v: ag.sum_(ag.mul(ag.project_ball(v["y"], c), w)), {"y": y})
        check(lambda t, v: ag.sum_(ag.mul(ag.project_ball(v["y"], c), w)),
              {"y": rng.standard_normal((4, 3)) * 5.0})


class TestCrossEntropy:
    def test_uniform_two_class(self):
        assert float(ag.cross_entropy(np.zeros(2), 0)) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated(self):
        logits = np.array([50.0, 0.0, 0.0])
        assert float(ag.cross_entropy(logits, 0)) <= 1e-20

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal(5)
        with mpmath.workdps(60):
            vals = [mpmath.mpf(float(v)) for v in logits]
            lse = mpmath.log(mpmath.fsum(mpmath.e**v for v in vals))
            expected = float(lse - vals[2])
        assert float(ag.cross_entropy(logits, 2)) == pytest.approx(expected, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        check(lambda t, v: ag.cross_entropy(v["l"], 2), {"l": rng.standard_normal(5)})

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(np.zeros(3), 5)


class TestTapeContracts:
    def test_backward_requires_scalar(self):
        tape = ag.Tape()
        x = tape.var(np.ones(3))
        with pytest.raises(ValueError):
            ag.backward(tape, ag.mul(x, 2.0))

    def test_backward_requires_tape_output(self):
        tape = ag.Tape()
        other = ag.Tape()
        x = other.var(np.ones(()))
        with pytest.raises(ag.UnsupportedOpError):
            ag.backward(tape, x)

    def test_gradient_accumulates_over_reuse(self):
        tape = ag.Tape()
        x = tape.var(np.array(2.0))
        loss = ag.add(ag.mul(x, x), ag.mul(x, 3.0))  # x^2 + 3x
        ag.backward(tape, loss)
        assert float(x.grad) == pytest.approx(2 * 2.0 + 3.0)

    def test_mixed_tapes_rejected(self):
        a = ag.Tape().var(np.ones(2))
        b = ag.Tape().var(np.ones(2))
        with pytest.raises(ag.UnsupportedOpError):
            ag.add(a, b)

    def test_raw_numpy_consumption_rejected(self):
        x = ag.Tape().var(np.ones(2))
        with pytest.raises(ag.UnsupportedOpError):
            np.asarray(x)

    def test_operator_sugar(self):
        tape = ag.Tape()
        x = tape.var(np.array([1.0, 2.0]))
        out = (-x + 3.0) * 2.0 - 1.0
        assert np.allclose(out.value, [3.0, 1.0])
        loss = ag.sum_(out / 2.0)
        ag.backward(tape, loss)
        assert np.allclose(x.grad, [-1.0, -1.0])

    def test_numeric_gradient_quadratic(self):
        g = ag.numeric_gradient(lambda x: float((x**2).sum()), np.array([1.0, -3.0]))
        assert np.allclose(g, [2.0, -6.0], atol=1e-8)
