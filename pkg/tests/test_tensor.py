import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgate.tensor import (
    Tensor,
    backward,
    elementwise_mul,
    finite_diff_grad,
    gradient_check,
    matmul,
    note_branch,
    record_branches,
    relative_error,
    tsum,
)

F64 = np.float64


def param(values):
    return Tensor(np.array(values, dtype=F64), requires_grad=True)


class TestTensorStorage:
    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 == t.data.reshape(-1).size

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
    @settings(max_examples=50, deadline=None)
    def test_linear_index_round_trip(self, shape, data):
        t = Tensor(np.zeros(shape))
        coord = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
        idx = t.linear_index(coord)
        # mixed-radix row-major offset
        expect = 0
        for c, n in zip(coord, shape):
            expect = expect * n + c
        assert idx == expect
        assert t.coord(idx) == coord

    def test_default_precision_is_32bit(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.ones(2, dtype=F64)).dtype == F64


class TestElementwiseMul:
    def test_zero_annihilator(self):
        np.testing.assert_array_equal(elementwise_mul(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data, [0, 0])

    def test_identity(self):
        np.testing.assert_array_equal(elementwise_mul(Tensor([1.0, 2, 3]), Tensor([1.0, 1, 1])).data, [1, 2, 3])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            elementwise_mul(Tensor([1.0, 2]), Tensor([1.0, 2, 3]))

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        a = param(rng.uniform(-1, 1, (2, 3)))
        b = param(rng.uniform(-1, 1, (2, 3)))
        assert gradient_check(lambda: tsum(elementwise_mul(a, b) * elementwise_mul(a, a)), [a, b]) < 1e-6

    def test_backward_formula(self):
        a, b = param([1.0, 2.0]), param([3.0, -4.0])
        backward(tsum(elementwise_mul(a, b)))
        np.testing.assert_array_equal(a.grad, [3, -4])
        np.testing.assert_array_equal(b.grad, [1, 2])


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_value(self):
        assert matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_check(self):
        rng = np.random.default_rng(1)
        a = param(rng.uniform(-1, 1, (3, 4)))
        b = param(rng.uniform(-1, 1, (4, 2)))
        w = Tensor(rng.uniform(-1, 1, (3, 2)), dtype=F64)
        assert gradient_check(lambda: tsum(elementwise_mul(matmul(a, b), w)), [a, b]) < 1e-6


class TestBackward:
    def test_sum_linear(self):
        w = param([0.5, -1.0, 2.0])
        backward(tsum(w))
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        w = param([1.0, 2.0])
        backward(tsum(elementwise_mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2, 4])

    def test_fan_out_accumulates(self):
        w = param([1.0, 2.0, 3.0])
        backward(tsum(w + w))
        np.testing.assert_array_equal(w.grad, [2, 2, 2])

    def test_non_scalar_rejected(self):
        w = param([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            backward(w + w)

    def test_without_record_rejected(self):
        with pytest.raises(RuntimeError, match="forward record"):
            backward(Tensor(np.array(1.0)))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (4, 3))
        grads = []
        for _ in range(2):
            a, b = param(a0.copy()), param(b0.copy())
            backward(tsum(elementwise_mul(matmul(a, b), matmul(a, b))))
            grads.append((a.grad.tobytes(), b.grad.tobytes()))
        assert grads[0] == grads[1]

    def test_accumulation_is_additive_across_records(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (2, 3))
        w0 = rng.uniform(-1, 1, (3, 2))
        w = param(w0.copy())
        backward(tsum(elementwise_mul(matmul(Tensor(x, dtype=F64), w), matmul(Tensor(x, dtype=F64), w))))
        batched = w.grad.copy()
        w = param(w0.copy())
        for row in x:
            xi = Tensor(row[None], dtype=F64)
            backward(tsum(elementwise_mul(matmul(xi, w), matmul(xi, w))))
        assert relative_error(batched, w.grad) < 1e-6


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), dtype=F64)
        np.testing.assert_allclose(finite_diff_grad(tsum, x, 1e-4).data, np.ones((3, 2)), atol=1e-9)

    def test_square(self):
        x = Tensor(np.array([3.0]), dtype=F64)
        g = finite_diff_grad(lambda t: tsum(elementwise_mul(t, t)), x, 1e-5)
        assert g.data[0] == pytest.approx(6.0, abs=1e-8)

    def test_restores_input(self):
        x = Tensor(np.array([0.1, 0.2]), dtype=F64)
        before = x.data.copy()
        finite_diff_grad(tsum, x, 1e-3)
        np.testing.assert_array_equal(x.data, before)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(tsum, Tensor(np.ones(1), dtype=F64), 0.0)


class TestKinkAwareCheck:
    @staticmethod
    def abs_sum(x):
        # |x| through its sign pattern, so the branch is visible to the recorder
        mask = x.data > 0
        note_branch(mask)
        return tsum(elementwise_mul(x, Tensor(np.where(mask, 1.0, -1.0), dtype=F64)))

    def test_recorder_only_active_inside_block(self):
        with record_branches() as log:
            note_branch(np.array([True]))
        note_branch(np.array([False]))
        assert len(log) == 1

    def test_straddled_kink_is_skipped(self):
        x = param([1e-8, 0.5, -0.7])
        stats = {}
        err = gradient_check(lambda: self.abs_sum(x), [x], h=1e-6, avoid_kinks=True, stats=stats)
        assert stats == {"probed": 2, "skipped": 1}
        assert err < 1e-9

    def test_plain_check_sees_the_kink(self):
        x = param([1e-8, 0.5, -0.7])
        assert gradient_check(lambda: self.abs_sum(x), [x], h=1e-6) > 0.5
