import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnergy.gradcheck import gradcheck, numeric_grads
from snnergy.tensor import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    backward,
    get_tape,
    hadamard,
    matmul,
    no_grad,
    permute,
    precision,
    reduce,
    reshape,
)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_all_ones_contraction(self):
        out = matmul(Tensor([[1, 1]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[2]])

    def test_grad_of_sum_matches_closed_form_and_finite_differences(self, rng):
        with precision(np.float64):
            a = Parameter(rng.normal(size=(3, 4)))
            b = Tensor(rng.normal(size=(4, 2)))
            matmul(a, b).sum().backward()
            np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
            num = numeric_grads(lambda: matmul(a, b).sum(), [a])[0]
        np.testing.assert_allclose(a.grad, num, rtol=1e-3)

    def test_batched_broadcast(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 5)))
        assert matmul(a, b).shape == (2, 3, 5)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestHadamard:
    def test_identity(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(hadamard(a, Tensor(np.ones((3, 4)))).data, a.data)

    def test_binary_mask(self):
        np.testing.assert_array_equal(hadamard(Tensor([1, 0, 1]), Tensor([1, 1, 0])).data, [1, 0, 0])

    def test_singleton_broadcast_matches_loop(self, rng):
        mask = rng.integers(0, 2, size=(1, 1, 5)).astype(float)
        x = rng.normal(size=(2, 3, 5))
        out = hadamard(Tensor(mask), Tensor(x)).data
        expect = np.zeros_like(x)
        for t in range(2):
            for c in range(3):
                for n in range(5):
                    expect[t, c, n] = mask[0, 0, n] * x[t, c, n]
        np.testing.assert_array_equal(out, expect.astype(np.float32))

    def test_grad_is_other_operand_summed_over_broadcast(self, rng):
        with precision(np.float64):
            m = Parameter(rng.normal(size=(1, 1, 5)))
            x = Parameter(rng.normal(size=(2, 3, 5)))
            hadamard(m, x).sum().backward()
        np.testing.assert_allclose(m.grad, x.data.sum(axis=(0, 1), keepdims=True))
        np.testing.assert_allclose(x.grad, np.broadcast_to(m.data, x.shape))

    def test_non_broadcastable(self):
        with pytest.raises(DimensionError):
            hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


class TestReduce:
    def test_sum_keeps_axis(self):
        out = reduce(Tensor(np.ones((2, 3))), axis=1, mode="sum")
        np.testing.assert_array_equal(out.data, [[3], [3]])

    def test_mean_of_ones(self):
        out = reduce(Tensor(np.ones((2, 3, 4))), axis=2, mode="mean")
        np.testing.assert_array_equal(out.data, np.ones((2, 3, 1)))

    def test_sum_grad_is_broadcast_ones(self, rng):
        with precision(np.float64):
            x = Parameter(rng.normal(size=(3, 4)))
            errs = gradcheck(lambda: reduce(x, 0, "sum").sum(), [x])
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
        assert errs[0] < 1e-3

    def test_mean_grad_divides_by_length(self):
        x = Parameter(np.ones((2, 5)))
        reduce(x, 1, "mean").sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 5), 0.2))

    def test_axis_out_of_range(self):
        with pytest.raises(IndexError):
            reduce(Tensor(np.ones((2, 3))), axis=2)


class TestShapeOps:
    def test_permute_inverse_is_bit_exact(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        back = permute(permute(x, [2, 1, 0]), [2, 1, 0])
        assert back.data.tobytes() == x.data.tobytes()

    def test_reshape_round_trip(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        assert reshape(reshape(x, (3, 2)), (2, 3)).data.tobytes() == x.data.tobytes()

    def test_permute_gradient(self, rng):
        with precision(np.float64):
            x = Parameter(rng.normal(size=(2, 3, 4)))
            w = Tensor(rng.normal(size=(4, 2, 3)))
            assert gradcheck(lambda: (permute(x, [2, 0, 1]) * w).sum(), [x])[0] < 1e-3
            np.testing.assert_allclose(x.grad, w.data.transpose(1, 2, 0))

    def test_invalid_permutation(self):
        with pytest.raises(DimensionError):
            permute(Tensor(np.ones((2, 3))), [0, 0])

    def test_bad_reshape(self):
        with pytest.raises(DimensionError):
            reshape(Tensor(np.ones((2, 3))), (4, 2))

    def test_zero_sized_shape_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((0, 3)))


class TestBackward:
    def test_sum(self):
        x = Parameter(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self, rng):
        x = Parameter(rng.normal(size=5))
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_non_scalar_loss(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_empty_tape(self):
        with pytest.raises(ContractError):
            backward(Tensor(1.0))

    def test_repeated_backward_accumulates(self):
        x = Parameter(np.ones(3))
        loss = (x * 3.0).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 6.0))

    def test_tape_is_kept_until_reset(self):
        x = Parameter(np.ones(3))
        (x * 2.0).sum()
        assert len(get_tape()) == 2
        get_tape().reset()
        assert len(get_tape()) == 0

    def test_intermediates_receive_gradients_of_their_shape(self, rng):
        x = Parameter(rng.normal(size=(2, 3)))
        h = x * 2.0
        y = h.sum(axis=1)
        y.sum().backward()
        assert h.grad.shape == h.shape and y.grad.shape == y.shape

    def test_no_grad_records_nothing(self):
        x = Parameter(np.ones(3))
        with no_grad():
            (x * 2.0).sum()
        assert len(get_tape()) == 0

    def test_default_precision_is_float32(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64


def _composite(x, w, order):
    h = matmul(x, w)
    h = permute(h, order) * 0.5
    return (h * h).sum() + reduce(h, 0, "mean").sum()


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(
        m=st.integers(1, 6),
        k=st.integers(1, 6),
        p=st.integers(1, 6),
        seed=st.integers(0, 2**16),
    )
    def test_composed_graph_matches_finite_differences(self, m, k, p, seed):
        r = np.random.default_rng(seed)
        with precision(np.float64):
            x = Parameter(r.uniform(-1, 1, (m, k)))
            w = Parameter(r.uniform(-1, 1, (k, p)))
            errs = gradcheck(lambda: _composite(x, w, [1, 0]), [x, w])
        assert max(errs) < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 2**16))
    def test_permute_reshape_preserve_multiset(self, shape, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=shape))
        order = r.permutation(len(shape))
        y = reshape(permute(x, order), (-1,))
        np.testing.assert_array_equal(np.sort(y.data), np.sort(x.data.reshape(-1)))

    @settings(max_examples=50, deadline=None)
    @given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=4), seed=st.integers(0, 2**16))
    def test_full_sum_matches_flat_sum(self, shape, seed):
        x = Tensor(np.random.default_rng(seed).uniform(0.1, 1.0, size=shape))
        out = x
        for ax in reversed(range(len(shape))):
            out = reduce(out, ax, "sum")
        flat = float(np.sum(x.data.astype(np.float64)))
        assert abs(out.item() - flat) <= 1e-6 * abs(flat)
