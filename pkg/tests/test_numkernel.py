import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfil import numkernel as nk
from dfil.numkernel import DimensionError, GradTape, NumericError, ParameterError, Tensor, grad_check
from dfil.oracles import matmul_loop


class TestTensor:
    def test_shape_and_immutability(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_literal_copy_is_independent(self):
        src = np.ones(3)
        t = Tensor(src)
        src[0] = 9.0
        assert t.data[0] == 1.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_literal_rejected(self, bad):
        with pytest.raises(NumericError):
            Tensor([1.0, bad])

    def test_rank_three_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 2, 2)))

    def test_overflow_errors_instead_of_propagating(self):
        with pytest.raises(NumericError):
            nk.exp(Tensor([1000.0]))

    def test_log_of_zero_errors(self):
        with pytest.raises(NumericError):
            nk.log(Tensor([0.0, 1.0]))


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(nk.matmul(np.eye(2), a).data, a)

    def test_hand_example(self):
        out = nk.matmul([[1, 2], [3, 4]], [[0], [1]])
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_against_triple_loop(self, rng):
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        np.testing.assert_allclose(nk.matmul(a, b).data, matmul_loop(a, b), rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_triple_loop_property(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.uniform(-1, 1, (m, k)), r.uniform(-1, 1, (k, n))
        np.testing.assert_allclose(nk.matmul(a, b).data, matmul_loop(a, b), rtol=0, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 2\]"):
            nk.matmul(np.zeros((2, 3)), np.zeros((2, 2)))


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_array_equal(nk.softmax([0.0, 0.0], 1.0).data, [0.5, 0.5])

    @pytest.mark.parametrize("T", [0.1, 1.0, 20.0])
    def test_constant_vector_is_uniform(self, T):
        np.testing.assert_allclose(nk.softmax([3.3] * 5, T).data, [0.2] * 5, rtol=0, atol=1e-15)

    def test_high_temperature_matches_extended_precision(self):
        mpmath.mp.dps = 40
        e = [mpmath.exp(mpmath.mpf(v) / 20) for v in (1, 2, 3)]
        expected = [float(v / sum(e)) for v in e]
        np.testing.assert_allclose(nk.softmax([1.0, 2.0, 3.0], 20.0).data, expected, rtol=1e-15)

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_bad_temperature(self, T):
        with pytest.raises(ParameterError):
            nk.softmax([1.0, 2.0], T)

    def test_large_logits_stable(self):
        p = nk.softmax([1000.0, 0.0], 1.0).data
        assert p[0] == 1.0 and p[1] >= 0.0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50)),
           st.floats(0.05, 50), st.randoms(use_true_random=False))
    def test_sum_and_permutation_equivariance(self, z, T, rnd):
        p = nk.softmax(z, T).data
        assert abs(p.sum() - 1.0) <= 1e-12
        perm = list(range(len(z)))
        rnd.shuffle(perm)
        np.testing.assert_allclose(nk.softmax(z[perm], T).data, p[perm], rtol=1e-12, atol=1e-300)


class TestTape:
    def test_constant_gets_exact_zero(self):
        tape = GradTape()
        x = tape.watch([1.0, 2.0])
        c = Tensor([3.0, 4.0])
        y = nk.sum_(x * c)
        gx, gc = tape.gradient(y, [x, c])
        np.testing.assert_array_equal(gx, [3.0, 4.0])
        np.testing.assert_array_equal(gc, [0.0, 0.0])

    def test_unused_watched_input_is_zero(self):
        tape = GradTape()
        x, z = tape.watch([1.0]), tape.watch([2.0])
        (gz,) = tape.gradient(nk.sum_(x * x), [z])
        assert gz.tolist() == [0.0]

    def test_each_node_visited_once(self):
        calls = []
        tape = GradTape()
        x = tape.watch([2.0])
        y = x * x
        orig = tape._nodes[-1]
        tape._nodes[-1] = (orig[0], lambda g: (calls.append(1), orig[1](g))[1])
        z = nk.sum_(y + y)
        (gx,) = tape.gradient(z, [x])
        assert calls == [1]
        assert gx.tolist() == [8.0]

    def test_fan_out_accumulates(self):
        tape = GradTape()
        x = tape.watch(3.0)
        y = x * x * x
        (g,) = tape.gradient(y, [x])
        assert g == pytest.approx(27.0)

    def test_broadcast_bias_gradient(self):
        tape = GradTape()
        b = tape.watch([1.0, 2.0])
        out = nk.sum_(Tensor(np.ones((3, 2))) + b)
        (g,) = tape.gradient(out, [b])
        np.testing.assert_array_equal(g, [3.0, 3.0])

    def test_target_must_be_scalar(self):
        tape = GradTape()
        x = tape.watch([1.0, 2.0])
        with pytest.raises(DimensionError):
            tape.gradient(x * 2.0, [x])


class TestGradCheck:
    def test_exact_quadratic(self, rng):
        assert grad_check(lambda v: nk.sum_(v * v), Tensor(rng.standard_normal(7)), 1e-5) < 1e-6

    @pytest.mark.parametrize("op", [
        lambda v: nk.sum_(nk.exp(v) * 0.1),
        lambda v: nk.sum_(nk.log(v * v + 1.0)),
        lambda v: nk.sum_(nk.softmax(v, 0.7) * Tensor([1.0, -2.0, 0.5, 3.0])),
        lambda v: nk.sum_(nk.log_softmax(v, 3.0) * Tensor([1.0, 2.0, 0.5, 3.0])),
        lambda v: nk.sum_(nk.sqrt(v * v + 0.5) / (v * v + 2.0)),
        lambda v: nk.sum_(nk.logsumexp(v)),
    ])
    def test_primitives(self, rng, op):
        assert grad_check(op, Tensor(rng.standard_normal(4)), 1e-5) < 1e-6

    def test_matmul_both_sides(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        assert grad_check(lambda v: nk.sum_(nk.matmul(v, b) * nk.matmul(v, b)), Tensor(a)) < 1e-6
        assert grad_check(lambda v: nk.sum_(nk.matmul(a, v) * nk.matmul(a, v)), Tensor(b)) < 1e-6

    def test_non_finite_probe_raises(self):
        with pytest.raises(NumericError):
            grad_check(lambda v: nk.sum_(nk.log(v)), Tensor([1e-6]), 1e-5)
