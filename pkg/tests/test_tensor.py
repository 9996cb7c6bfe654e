"""Tensor primitives, autodiff mechanics and the finite-difference harness."""

import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from mulcon import tensor as T
from mulcon.gradcheck import OP_CASES, check_function, run_gradcheck
from mulcon.tensor import DomainError, ShapeError, Tensor, no_grad


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_scalar_product(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
            ref = oracles.matmul(a.tolist(), b.tolist())
            np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12, rtol=0)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rank_one_rejected(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_bit_identical_repeats(self):
        rng = np.random.default_rng(2)
        a, b = Tensor(rng.normal(size=(17, 33))), Tensor(rng.normal(size=(33, 9)))
        assert T.matmul(a, b).data.tobytes() == T.matmul(a, b).data.tobytes()


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_logit_no_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 1.0 and out[0, 1] < 1e-300

    def test_matches_extended_precision(self):
        out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, oracles.softmax_row([1, 2, 3]), atol=1e-12, rtol=0)

    def test_rejects_non_matrix(self):
        with pytest.raises(ShapeError):
            T.softmax_rows(Tensor(np.ones(3)))

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-50, 50)))
    def test_rows_normalized(self, x):
        out = T.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
        assert out[0] >= 0 and out[1] == 1.0 and np.all(np.isfinite(out))

    def test_relu(self):
        assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(Tensor([-1.0]))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_broadcast_gradient_reduced(self):
        a, b = leaf(np.ones((3, 4))), leaf(np.ones((1, 4)))
        T.sum(a * b).backward()
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))

    def test_l2_normalize_unit_rows(self):
        x = np.random.default_rng(3).normal(size=(5, 7))
        norms = np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_l2_normalize_zero_vector_finite(self):
        assert np.all(T.l2_normalize(Tensor(np.zeros((1, 3)))).data == 0)


class TestConv:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_counting_case(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_nested_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        ref = oracles.conv2d(x.tolist(), w.tolist(), b.tolist(), stride, pad)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)

    def test_nhwc_agrees_with_nchw(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(5, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        b = T.conv2d_nhwc(Tensor(x.transpose(0, 2, 3, 1)), Tensor(w), stride=2, padding=1).data
        np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), atol=1e-12)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_bit_identical_repeats(self):
        rng = np.random.default_rng(6)
        x, w = Tensor(rng.normal(size=(2, 3, 9, 9))), Tensor(rng.normal(size=(4, 3, 3, 3)))
        assert T.conv2d(x, w, stride=2, padding=1).data.tobytes() == T.conv2d(x, w, stride=2, padding=1).data.tobytes()

    def test_max_pool(self):
        x = np.array([[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 1.0], [0.0, 0.0, 1.0, 1.0], [9.0, 0.0, 1.0, 2.0]])
        out = T.max_pool2d(Tensor(x[None, None]), 2).data[0, 0]
        np.testing.assert_array_equal(out, [[5.0, 7.0], [9.0, 2.0]])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf([1.0, 2.0, 3.0])
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_square(self):
        x = leaf([1.0, 2.0])
        T.sum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates_without_zeroing(self):
        x = leaf([1.0, 2.0])
        T.sum(x * x).backward()
        T.sum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            leaf([1.0, 2.0]).backward()

    def test_unreachable_leaf_stays_zero(self):
        x, y = leaf([1.0]), leaf([2.0])
        T.sum(x * 3.0).backward()
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_grad_present_iff_requires_grad(self):
        assert Tensor([1.0]).grad is None
        assert leaf([1.0, 2.0]).grad.shape == (2,)

    def test_shared_subexpression(self):
        x = leaf([3.0])
        y = x * x
        T.sum(y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [6.0 + 27.0])

    def test_deterministic_after_zeroing(self):
        rng = np.random.default_rng(7)
        w = leaf(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(5, 4)))
        T.sum(T.softmax_rows(x @ w)).backward()
        first = w.grad.copy()
        w.zero_grad()
        T.sum(T.softmax_rows(x @ w)).backward()
        assert first.tobytes() == w.grad.tobytes()

    def test_non_finite_loss(self):
        x = leaf([1.0])
        with pytest.raises(FloatingPointError):
            T.sum(x * np.inf).backward()

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = T.is_grad_enabled()

        with no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True

    def test_deep_chain_no_recursion_limit(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0
        T.sum(y).backward()
        assert x.grad[0] == 1.0


class TestFiniteDifferences:
    @pytest.mark.parametrize("case", OP_CASES, ids=[c.name for c in OP_CASES])
    def test_op_gradient(self, case):
        rng = np.random.default_rng(zlib.crc32(case.name.encode()))
        for _ in range(5):
            fn, inputs = case.make(rng)
            assert check_function(fn, inputs) < 1e-4

    def test_harness_detects_wrong_gradient(self):
        def wrong(a):
            y = T._make(a.data**2, (a,), lambda g: (g * a.data,))  # should be 2 * a
            return T.sum(y)

        assert check_function(wrong, [np.array([1.0, 2.0, -1.5])]) > 0.1

    def test_suite_subset(self):
        report = run_gradcheck(instances=3, ops=("matmul", "sigmoid"), end_to_end=False)
        assert [r.name for r in report.results] == ["matmul", "sigmoid"]
        assert report.passed
