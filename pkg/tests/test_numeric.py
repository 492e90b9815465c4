import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cdsrec.numeric as nm
from cdsrec.numeric import (
    AdamState,
    ConfigError,
    ShapeError,
    SparseMatrix,
    Tensor,
    adam_step,
    backward,
    layer_norm,
    leaky_relu,
    matmul,
    softmax_rows,
    sparse_dense_matmul,
    xavier_init,
)
from conftest import gradcheck


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_orthogonal_rows(self):
        out = matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_batched_broadcast_gradients(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 5))
        proj = rng.normal(size=(2, 3, 5))
        gradcheck(lambda t: nm.tsum(nm.mul(matmul(t, Tensor(w)), proj)), a)
        gradcheck(lambda t: nm.tsum(nm.mul(matmul(Tensor(a), t), proj)), w)


class TestSparse:
    def test_identity(self):
        rng = np.random.default_rng(0)
        d = rng.normal(size=(4, 3))
        out = sparse_dense_matmul(SparseMatrix.identity(4), Tensor(d))
        np.testing.assert_array_equal(out.data, d)

    def test_empty_gives_zero(self):
        s = SparseMatrix.from_entries(3, 4, [])
        out = sparse_dense_matmul(s, Tensor(np.ones((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_against_densify_oracle(self):
        rng = np.random.default_rng(11)
        entries = set()
        while len(entries) < 8:
            entries.add((int(rng.integers(5)), int(rng.integers(5))))
        triples = [(r, c, float(rng.normal())) for r, c in sorted(entries)]
        s = SparseMatrix.from_entries(5, 5, triples)
        d = rng.normal(size=(5, 3))
        out = sparse_dense_matmul(s, Tensor(d))
        np.testing.assert_allclose(out.data, s.to_dense() @ d, atol=1e-12)

    def test_shape_mismatch(self):
        s = SparseMatrix.identity(3)
        with pytest.raises(ShapeError):
            sparse_dense_matmul(s, Tensor(np.zeros((4, 2))))

    def test_duplicate_entry_rejected(self):
        with pytest.raises(ValueError):
            SparseMatrix.from_entries(2, 2, [(0, 0, 1.0), (0, 0, 2.0)])

    def test_gradient_flows_to_dense(self):
        s = SparseMatrix.from_entries(3, 3, [(0, 1, 2.0), (2, 0, -1.0), (2, 2, 0.5)])
        d0 = np.random.default_rng(5).normal(size=(3, 2))
        gradcheck(lambda t: nm.tsum(nm.mul(sparse_dense_matmul(s, t), d0.T[None, :2, :3].reshape(3, 2))), d0)


class TestSoftmax:
    def test_symmetric_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_no_overflow_on_large_inputs(self):
        out = softmax_rows(Tensor([[1000.0, 1000.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_closed_form_ratio(self):
        out = softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, row, shift):
        base = softmax_rows(Tensor([row])).data
        shifted = softmax_rows(Tensor([[v + shift for v in row]])).data
        assert abs(base.sum() - 1.0) < 1e-9
        assert np.all(base >= 0.0)
        np.testing.assert_allclose(base, shifted, atol=1e-9)

    def test_gradient(self):
        x = np.random.default_rng(1).normal(size=(3, 5))
        r = np.random.default_rng(2).normal(size=(3, 5))
        gradcheck(lambda t: nm.tsum(nm.mul(softmax_rows(t), r)), x)

    def test_log_softmax_gradient(self):
        x = np.random.default_rng(4).normal(size=(2, 6))
        r = np.random.default_rng(5).normal(size=(2, 6))
        gradcheck(lambda t: nm.tsum(nm.mul(nm.log_softmax_rows(t), r)), x)


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert leaky_relu(Tensor([5.0]), 0.2).data[0] == 5.0

    def test_negative_scaled(self):
        assert leaky_relu(Tensor([-1.0]), 0.2).data[0] == pytest.approx(-0.2)

    def test_zero_boundary(self):
        assert leaky_relu(Tensor([0.0]), 0.7).data[0] == 0.0

    @pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
    def test_slope_out_of_range(self, slope):
        with pytest.raises(ConfigError):
            leaky_relu(Tensor([1.0]), slope)

    def test_gradient(self):
        x = np.random.default_rng(9).normal(size=(4, 4)) + 0.05
        gradcheck(lambda t: nm.tsum(nm.mul(leaky_relu(t, 0.2), 1.7)), x)


class TestLayerNorm:
    def test_constant_row_collapses_to_zero(self):
        out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-9)

    def test_two_point_closed_form(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_zero_gain_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(2, 4))
        out = layer_norm(Tensor(x), Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
        np.testing.assert_array_equal(out.data, np.full((2, 4), 2.5))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    def test_normalizes_last_axis(self):
        x = np.random.default_rng(3).normal(size=(5, 8))
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gradient(self):
        x = np.random.default_rng(8).normal(size=(3, 6))
        g = np.random.default_rng(9).normal(size=6)
        b = np.random.default_rng(10).normal(size=6)
        r = np.random.default_rng(11).normal(size=(3, 6))
        gradcheck(lambda t: nm.tsum(nm.mul(layer_norm(t, Tensor(g), Tensor(b)), r)), x)
        gradcheck(lambda t: nm.tsum(nm.mul(layer_norm(Tensor(x), t, Tensor(b)), r)), g)


class TestXavier:
    def test_deterministic_per_seed(self):
        a = xavier_init((4, 7), 42)
        b = xavier_init((4, 7), 42)
        np.testing.assert_array_equal(a.data, b.data)
        c = xavier_init((4, 7), 43)
        assert not np.array_equal(a.data, c.data)

    def test_bound(self):
        t = xavier_init((1000, 1000), 0)
        assert np.abs(t.data).max() <= math.sqrt(6.0 / 2000.0)

    def test_empirical_mean(self):
        t = xavier_init((1000, 1000), 123)
        limit = math.sqrt(6.0 / 2000.0)
        sigma = limit / math.sqrt(3.0)
        assert abs(t.data.mean()) < 3.0 * sigma / 1000.0

    def test_rejects_empty_shape(self):
        with pytest.raises(ShapeError):
            xavier_init((), 0)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        params = {"p": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
        state = AdamState.for_params(params, lr=0.01)
        before = params["p"].data.copy()
        adam_step(params, {"p": np.zeros(3)}, state)
        np.testing.assert_array_equal(params["p"].data, before)
        assert state.step_count == 1

    def test_first_step_matches_hand_computation(self):
        # m=0.1, v=0.001; bias-corrected m_hat=1, v_hat=1; step = -lr/(1+eps)
        params = {"p": Tensor(np.array([0.0]), requires_grad=True)}
        state = AdamState.for_params(params, lr=0.001)
        adam_step(params, {"p": np.array([1.0])}, state)
        assert params["p"].data[0] == pytest.approx(-0.001, rel=1e-6)

    def test_converges_on_quadratic(self):
        params = {"p": Tensor(np.array([1.0]), requires_grad=True)}
        state = AdamState.for_params(params, lr=0.001)
        for _ in range(5000):
            adam_step(params, {"p": 2.0 * params["p"].data}, state)
        assert abs(params["p"].data[0]) < 1e-2

    def test_v_buffers_stay_nonnegative(self):
        rng = np.random.default_rng(0)
        params = {"p": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
        state = AdamState.for_params(params)
        for _ in range(10):
            adam_step(params, {"p": rng.normal(size=(3, 2))}, state)
        assert (state.v["p"] >= 0.0).all()

    def test_shape_mismatch(self):
        params = {"p": Tensor(np.zeros(3), requires_grad=True)}
        state = AdamState.for_params(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"p": np.zeros(4)}, state)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        backward(nm.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = Tensor(np.array([[3.0]]), requires_grad=True)
        y = Tensor(np.array([[5.0]]), requires_grad=True)
        backward(nm.tsum(nm.mul(x, y)))
        assert x.grad[0, 0] == 5.0
        assert y.grad[0, 0] == 3.0

    def test_rejects_non_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(nm.add(x, 1.0))

    def test_grad_accumulates_across_calls(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(nm.tsum(x))
        backward(nm.tsum(x))
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_reused_node_fanout(self):
        # loss = sum((x + x) * x) = sum(2 x^2) -> grad 4x
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        backward(nm.tsum(nm.mul(nm.add(x, x), x)))
        np.testing.assert_allclose(x.grad, 4.0 * x.data)

    def test_composed_graph_matches_central_differences(self):
        rng = np.random.default_rng(21)
        w = rng.normal(size=(5, 4))
        r = rng.normal(size=(3, 4))

        def loss(t):
            h = leaky_relu(matmul(t, Tensor(w)), 0.2)
            s = softmax_rows(h)
            return nm.tsum(nm.mul(nm.log(nm.add(s, 1e-3)), r))

        gradcheck(loss, rng.normal(size=(3, 5)))


class TestIndexedOps:
    def test_gather_rows_forward_and_gradient(self):
        x = np.random.default_rng(2).normal(size=(6, 3))
        idx = np.array([[0, 2], [5, 0]])
        out = nm.gather_rows(Tensor(x), idx)
        assert out.shape == (2, 2, 3)
        np.testing.assert_array_equal(out.data, x[idx])
        r = np.random.default_rng(3).normal(size=(2, 2, 3))
        gradcheck(lambda t: nm.tsum(nm.mul(nm.gather_rows(t, idx), r)), x)

    def test_take_per_row(self):
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = nm.take_per_row(Tensor(x), [2, 0])
        np.testing.assert_array_equal(out.data, [3.0, 4.0])
        gradcheck(lambda t: nm.tsum(nm.mul(nm.take_per_row(t, [2, 0]), np.array([1.5, -2.0]))), x)

    def test_segment_sum_matches_loop(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(7, 2))
        ids = np.array([0, 2, 1, 2, 0, 1, 2])
        out = nm.segment_sum(Tensor(x), ids, 3)
        expect = np.zeros((3, 2))
        for row, s in zip(x, ids):
            expect[s] += row
        np.testing.assert_allclose(out.data, expect, atol=1e-12)
        r = rng.normal(size=(3, 2))
        gradcheck(lambda t: nm.tsum(nm.mul(nm.segment_sum(t, ids, 3), r)), x)

    def test_segment_softmax_matches_enumeration(self):
        s = np.array([1.0, 2.0, 0.5, -1.0, 3.0])
        ids = np.array([0, 0, 1, 1, 1])
        out = nm.segment_softmax(Tensor(s), ids, 2).data
        e0 = np.exp([1.0, 2.0])
        e1 = np.exp([0.5, -1.0, 3.0])
        np.testing.assert_allclose(out[:2], e0 / e0.sum(), atol=1e-12)
        np.testing.assert_allclose(out[2:], e1 / e1.sum(), atol=1e-12)
        r = np.random.default_rng(6).normal(size=5)
        gradcheck(lambda t: nm.tsum(nm.mul(nm.segment_softmax(t, ids, 2), r)), s)

    def test_reduce_max_routes_to_first_tie(self):
        x = np.array([[1.0, 3.0, 3.0]])
        t = Tensor(x, requires_grad=True)
        backward(nm.tsum(nm.reduce_max(t, axis=1)))
        np.testing.assert_array_equal(t.grad, [[0.0, 1.0, 0.0]])


class TestMiscOps:
    def test_concat_and_split_gradient(self):
        a = np.random.default_rng(0).normal(size=(2, 3))
        b = np.random.default_rng(1).normal(size=(2, 2))
        out = nm.concat([Tensor(a), Tensor(b)], axis=-1)
        assert out.shape == (2, 5)
        r = np.random.default_rng(2).normal(size=(2, 5))
        gradcheck(lambda t: nm.tsum(nm.mul(nm.concat([t, Tensor(b)], axis=-1), r)), a)

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = nm.dropout(x, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dropout_scales_kept_entries(self):
        rng = np.random.default_rng(12)
        out = nm.dropout(Tensor(np.ones(10000)), 0.4, rng)
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.6)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_clamp_min_blocks_gradient_below_floor(self):
        t = Tensor(np.array([0.5, 2.0]), requires_grad=True)
        backward(nm.tsum(nm.clamp_min(t, 1.0)))
        np.testing.assert_array_equal(t.grad, [0.0, 1.0])

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 4)) * 100.0)
        for op in (softmax_rows, nm.log_softmax_rows, lambda t: leaky_relu(t, 0.2),
                   lambda t: layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4)))):
            assert np.isfinite(op(x).data).all()
