import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mop import tensor as T
from mop.errors import ContractError, ShapeError
from mop.tensor import Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def grad_check(fn, inputs, step=1e-5):
    """Max relative error between tape gradients and central differences (64-bit)."""
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        num = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + step
            up = fn(*[Tensor(s.data) for s in tensors]).item()
            t.data[idx] = orig - step
            down = fn(*[Tensor(s.data) for s in tensors]).item()
            t.data[idx] = orig
            num[idx] = (up - down) / (2 * step)
        scale = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-8)
        worst = max(worst, np.abs(num - t.grad).max() / scale)
    return worst


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_case(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-10, 10, (4, 5)).astype(np.float32)
        b = rng.uniform(-10, 10, (5, 3)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b)).data
        ref = naive_matmul(a.astype(np.float64), b.astype(np.float64))
        # float32 products of magnitude <= 10 summed over k=5 stay within 1e-6 relative
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert grad_check(lambda x, y: (x @ y).sum(), [a, b]) < 1e-6

    def test_batched_gradients(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
        assert grad_check(lambda x, y: ((x @ y) * (x @ y)).sum(), [a, b]) < 1e-6
        c, d = rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 4, 3))
        assert grad_check(lambda x, y: ((x @ y) * (x @ y)).sum(), [c, d]) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_no_overflow(self):
        out = T.softmax_rows(Tensor([1000.0, 1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_direct_evaluation(self):
        with T.precision(np.float64):
            out = T.softmax_rows(Tensor([1.0, 2.0, 3.0])).data
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(out, e / e.sum(), atol=1e-12)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-6)

    def test_monotone(self):
        y = T.softmax_rows(Tensor(np.array([0.1, 0.5, 0.2, 3.0]))).data
        assert list(np.argsort(y)) == [0, 2, 1, 3]

    def test_gradients(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 5))
        assert grad_check(lambda x: (T.softmax_rows(x) * Tensor(w)).sum(), [rng.normal(size=(2, 5))]) < 1e-6

    def test_masked_gradients(self):
        rng = np.random.default_rng(4)
        mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
        w = rng.normal(size=(4, 4))
        assert grad_check(lambda x: (T.softmax_rows(x, mask) * Tensor(w)).sum(), [rng.normal(size=(4, 4))]) < 1e-6


class TestRMSNorm:
    def test_ones(self):
        out = T.rmsnorm(Tensor(np.ones(6)), Tensor(np.ones(6)), eps=1e-12).data
        np.testing.assert_allclose(out, np.ones(6), atol=1e-6)

    def test_zeros(self):
        assert np.all(T.rmsnorm(Tensor(np.zeros(4)), Tensor(np.ones(4)), eps=1e-5).data == 0)

    def test_direct_formula(self):
        out = T.rmsnorm(Tensor(np.array([3.0, 4.0])), Tensor(np.ones(2)), eps=0.0).data
        np.testing.assert_allclose(out, np.array([3.0, 4.0]) / math.sqrt(12.5), atol=1e-7)
        np.testing.assert_allclose(out, [0.84853, 1.13137], atol=1e-5)

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            T.rmsnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 4))
        err = grad_check(lambda x, g: (T.rmsnorm(x, g, 1e-5) * Tensor(w)).sum(),
                         [rng.normal(size=(3, 4)), rng.normal(size=4)])
        assert err < 1e-6


class TestSilu:
    def test_values(self):
        with T.precision(np.float64):
            out = T.silu(Tensor(np.array([0.0, 1.0, 40.0]))).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
        assert out[1] == pytest.approx(0.731059, abs=1e-6)
        assert out[2] == pytest.approx(40.0, rel=1e-12)

    def test_gradients(self):
        x = np.linspace(-6, 6, 13)
        assert grad_check(lambda t: (T.silu(t) * T.silu(t)).sum(), [x]) < 1e-6


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((4, 8))), np.array([0, 3, 7, 1]))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-6)

    def test_confident_correct(self):
        logits = np.full((2, 5), -1e4)
        logits[[0, 1], [2, 4]] = 1e4
        assert T.cross_entropy(Tensor(logits), np.array([2, 4])).item() == pytest.approx(0.0, abs=1e-6)

    def test_naive_oracle(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(3, 5))
        tgt = np.array([4, 0, 2])
        naive = np.mean([-math.log(math.exp(row[t]) / sum(math.exp(v) for v in row))
                         for row, t in zip(logits, tgt)])
        with T.precision(np.float64):
            assert T.cross_entropy(Tensor(logits), tgt).item() == pytest.approx(naive, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradients(self):
        tgt = np.array([1, 0, 3])
        rng = np.random.default_rng(7)
        assert grad_check(lambda x: T.cross_entropy(x, tgt), [rng.normal(size=(3, 4))]) < 1e-6


class TestBackward:
    def test_sum(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = (x * x).sum()
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_no_recording_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 3.0
        assert not y.requires_grad

    def test_rope_and_reshape_gradients(self):
        rng = np.random.default_rng(8)
        ang = rng.normal(size=(3, 4))
        cos, sin = np.cos(ang), np.sin(ang)
        w = rng.normal(size=(2, 3, 4))
        err = grad_check(lambda x: (T.rope(x.reshape(2, 3, 4), cos, sin) * Tensor(w)).sum(),
                         [rng.normal(size=(6, 4))])
        assert err < 1e-6

    def test_rope_preserves_norm(self):
        rng = np.random.default_rng(9)
        ang = rng.normal(size=(5, 2))
        ang = np.concatenate([ang, ang], axis=-1)
        x = rng.normal(size=(5, 4))
        y = T.rope(Tensor(x), np.cos(ang), np.sin(ang)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)

    def test_embedding_gradient_scatter(self):
        w = Tensor(np.zeros((4, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.embedding(w, np.array([1, 1, 3])).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])
