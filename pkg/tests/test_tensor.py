"""Tensor core: op semantics, gradient rules, graph behavior."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import qbn.tensor as T
from qbn.errors import ContractError, DimensionError
from qbn.tensor import Tensor, gradcheck, no_grad, topo_order

from conftest import finite_difference, relative_error

# softmax([1, 2, 3]) evaluated with mpmath at 30 significant digits
SOFTMAX_123 = (0.090030573170380458, 0.24472847105479765, 0.66524095577482189)


class TestConstruction:
    def test_dtype_defaults_to_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_preserved(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64

    def test_rank_cap(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(x))
        assert np.array_equal(out.data, x.astype(np.float32))

    def test_column_selection(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        assert np.array_equal(T.matmul(a, b).data, np.array([[2.0], [4.0]], dtype=np.float32))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_vs_central_differences(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))

        def scalar(av, bv):
            return float((w * (av @ bv)).sum())

        ta = Tensor(a, requires_grad=True, dtype=np.float64)
        tb = Tensor(b, requires_grad=True, dtype=np.float64)
        loss = T.reduce_sum(T.mul(Tensor(w), T.matmul(ta, tb)))
        loss.backward()
        da = finite_difference(scalar, [a, b], 0, eps=1e-4)
        db = finite_difference(scalar, [a, b], 1, eps=1e-4)
        assert relative_error(ta.grad, da) < 1e-3
        assert relative_error(tb.grad, db) < 1e-3

    def test_batched_matmul_broadcast_gradient(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 2))

        def scalar(av, bv):
            return float((av @ bv).sum())

        ta = Tensor(a, requires_grad=True, dtype=np.float64)
        tb = Tensor(b, requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.matmul(ta, tb)).backward()
        assert relative_error(tb.grad, finite_difference(scalar, [a, b], 1)) < 1e-5
        assert relative_error(ta.grad, finite_difference(scalar, [a, b], 0)) < 1e-5


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_shift_invariance(self):
        c = 1.7
        for x in (-20.0, 0.0, 300.0):
            out = T.softmax(Tensor(np.array([x, x + c], dtype=np.float64)), axis=-1)
            expect = np.array([1 / (1 + np.exp(c)), np.exp(c) / (1 + np.exp(c))])
            assert np.allclose(out.data, expect, rtol=1e-12)

    def test_against_high_precision_oracle(self):
        out = T.softmax(Tensor(np.array([1.0, 2.0, 3.0])), axis=-1)
        assert np.allclose(out.data, SOFTMAX_123, rtol=1e-6)
        out64 = T.softmax(Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float64)), axis=-1)
        assert np.allclose(out64.data, SOFTMAX_123, rtol=1e-14)

    def test_extreme_rows_stay_stochastic(self):
        x = Tensor(np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]], dtype=np.float64))
        out = T.softmax(x, axis=-1)
        assert (out.data >= 0).all()
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_masked_softmax_contract(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, False, True], [False, False, False]])
        with pytest.raises(ContractError):
            T.masked_softmax(x, mask, axis=-1)

    def test_masked_softmax_zeroes_masked(self):
        x = Tensor(np.array([[1.0, 5.0, 2.0]]))
        mask = np.array([[True, False, True]])
        out = T.masked_softmax(x, mask, axis=-1)
        assert out.data[0, 1] == 0.0
        assert np.isclose(out.data.sum(), 1.0)


class TestElementwise:
    def test_add_zero_identity(self, rng):
        x = rng.standard_normal((3, 3)).astype(np.float32)
        assert np.array_equal(T.add(Tensor(x), Tensor(np.zeros((3, 3)))).data, x)

    def test_mul_one_identity(self, rng):
        x = rng.standard_normal((3, 3)).astype(np.float32)
        assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones((3, 3)))).data, x)

    def test_tanh_gradient_at_zero(self):
        x = Tensor(np.zeros(()), requires_grad=True, dtype=np.float64)
        T.tanh(x).backward()
        assert x.grad == 1.0

    def test_broadcast_error(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_broadcast_gradient_sums(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        v = Tensor(np.ones(3), requires_grad=True)
        T.reduce_sum(T.mul(x, v)).backward()
        assert v.grad.shape == (3,)
        assert np.allclose(v.grad, [2.0, 2.0, 2.0])


class TestReduce:
    def test_mean_simple(self):
        assert T.reduce_mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0

    def test_mean_of_constant(self):
        c = 3.25
        out = T.reduce_mean(Tensor(np.full((4, 5), c)), axis=1)
        assert np.allclose(out.data, c)

    def test_mean_gradient_scatters(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        T.reduce_sum(T.reduce_mean(x, axis=1)).backward()
        assert np.allclose(x.grad, 1 / 3)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.reduce_mean(Tensor(np.zeros((2, 2))), axis=2)


class TestConcatSlice:
    def test_concat_single_is_identity(self, rng):
        x = rng.standard_normal((2, 3)).astype(np.float32)
        assert np.array_equal(T.concat([Tensor(x)], axis=0).data, x)

    def test_roundtrip_bit_exact(self, rng):
        parts = [rng.standard_normal((2, k)).astype(np.float32) for k in (1, 3, 2)]
        whole = T.concat([Tensor(p) for p in parts], axis=1)
        offsets = np.cumsum([0] + [p.shape[1] for p in parts])
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = T.tensor_slice(whole, 1, int(lo), int(hi))
            assert piece.data.tobytes() == p.tobytes()

    def test_concat_gradient_routes_slabs(self):
        a = Tensor(np.zeros((2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 2)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        T.reduce_sum(T.mul(out, Tensor(np.array([[1.0, 2], [3, 4], [5, 6]])))).backward()
        assert np.array_equal(a.grad, [[1, 2], [3, 4]])
        assert np.array_equal(b.grad, [[5, 6]])

    def test_extent_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))], axis=0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        T.reduce_sum(x).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_square_gives_2x(self, rng):
        data = rng.standard_normal((3, 2))
        x = Tensor(data, requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.mul(x, x)).backward()
        assert np.allclose(x.grad, 2 * data)

    def test_reused_node_accumulates(self):
        x = Tensor(np.ones(4), requires_grad=True)
        loss = T.add(T.reduce_sum(x), T.reduce_sum(x))
        loss.backward()
        assert np.array_equal(x.grad, 2 * np.ones(4))

    def test_backward_twice_accumulates_without_reset(self):
        x = Tensor(np.ones(3), requires_grad=True)
        T.reduce_sum(x).backward()
        T.reduce_sum(x).backward()
        assert np.array_equal(x.grad, 2 * np.ones(3))
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.mul(x, x).backward()

    def test_topological_order_visits_once(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = T.mul(x, x)
        loss = T.add(T.reduce_sum(y), T.reduce_sum(y))
        order = topo_order(loss)
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()


class TestGradcheck:
    def test_identity_zero_error(self):
        x = Tensor(np.array([0.5, 0.25, -0.75]), requires_grad=True, dtype=np.float64)
        result = gradcheck(lambda t: t, x, eps=2.0 ** -13, tol=1e-6)
        assert result.max_rel_err == 0.0
        assert result.passed

    def test_softmax_passes(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 4)))
        result = gradcheck(lambda t: T.reduce_sum(T.mul(w, T.softmax(t, axis=-1))),
                           x, eps=1e-4, tol=1e-3)
        assert result.passed, str(result)

    def test_nondeterministic_function_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        state = {"n": 0}

        def flaky(t):
            state["n"] += 1
            return T.reduce_sum(T.scale(t, float(state["n"])))

        with pytest.raises(ContractError):
            gradcheck(flaky, x)

    def test_bad_eps_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            gradcheck(lambda t: T.reduce_sum(t), x, eps=0.0)


class TestDeterminism:
    def test_forward_backward_bit_identical(self, rng):
        data = rng.standard_normal((4, 4)).astype(np.float32)
        results = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            loss = T.reduce_sum(T.softmax(T.matmul(x, x), axis=-1))
            loss.backward()
            results.append((loss.data.tobytes(), x.grad.tobytes()))
        assert results[0] == results[1]


@st.composite
def small_shapes(draw):
    rank = draw(st.integers(min_value=1, max_value=3))
    dims = [draw(st.integers(min_value=1, max_value=4 if rank == 3 else 8)) for _ in range(rank)]
    return tuple(dims)


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(shape=small_shapes(), seed=st.integers(min_value=0, max_value=2 ** 31))
    def test_softmax_rows_stochastic(self, shape, seed):
        x = np.random.default_rng(seed).standard_normal(shape)
        out = T.softmax(Tensor(x, dtype=np.float64), axis=-1)
        assert (out.data >= 0).all()
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(shape=small_shapes(), seed=st.integers(min_value=0, max_value=2 ** 31))
    def test_elementwise_gradients_match_differences(self, shape, seed):
        gen = np.random.default_rng(seed)
        x = gen.standard_normal(shape)
        w = gen.standard_normal(shape)

        def scalar(xv):
            return float((w * np.tanh(xv) * (1 / (1 + np.exp(-xv)))).sum())

        t = Tensor(x, requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.mul(Tensor(w), T.mul(T.tanh(t), T.sigmoid(t)))).backward()
        assert relative_error(t.grad, finite_difference(scalar, [x], 0)) < 1e-3

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2 ** 31),
           cut=st.integers(min_value=1, max_value=7))
    def test_slice_concat_roundtrip(self, seed, cut):
        x = np.random.default_rng(seed).standard_normal((3, 8)).astype(np.float32)
        t = Tensor(x)
        left = T.tensor_slice(t, 1, 0, cut)
        right = T.tensor_slice(t, 1, cut, 8)
        assert T.concat([left, right], axis=1).data.tobytes() == x.tobytes()


class TestAuxOps:
    def test_embedding_gradient_scatters(self):
        table = Tensor(np.ones((4, 2)), requires_grad=True, dtype=np.float64)
        ids = np.array([[0, 0], [3, 1]])
        T.reduce_sum(T.embedding_lookup(table, ids)).backward()
        assert np.array_equal(table.grad, [[2, 2], [1, 1], [0, 0], [1, 1]])

    def test_take_rows(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(2, 3, 2))
        out = T.take_rows(x, np.array([2, 0]))
        assert np.array_equal(out.data, [[4, 5], [6, 7]])

    def test_permute_rows_roundtrip(self, rng):
        x = rng.standard_normal((2, 4, 3)).astype(np.float32)
        perm = np.array([[2, 0, 3, 1], [1, 3, 0, 2]])
        t = Tensor(x)
        out = T.permute_rows(t, perm)
        back = T.permute_rows(out, np.argsort(perm, axis=1))
        assert back.data.tobytes() == x.tobytes()

    def test_cross_entropy_matches_manual(self, rng):
        logits = rng.standard_normal((3, 5))
        labels = np.array([1, 4, 0])
        t = Tensor(logits, dtype=np.float64)
        loss = T.cross_entropy_logits(t, labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expect = -np.log(p[np.arange(3), labels]).mean()
        assert np.isclose(loss.item(), expect, rtol=1e-12)

    def test_layer_norm_gradients(self, rng):
        x = rng.standard_normal((2, 5))
        gamma = rng.standard_normal(5)
        beta = rng.standard_normal(5)
        w = rng.standard_normal((2, 5))

        def scalar(xv, gv, bv):
            mu = xv.mean(-1, keepdims=True)
            var = ((xv - mu) ** 2).mean(-1, keepdims=True)
            return float((w * ((xv - mu) / np.sqrt(var + 1e-5) * gv + bv)).sum())

        tx = Tensor(x, requires_grad=True, dtype=np.float64)
        tg = Tensor(gamma, requires_grad=True, dtype=np.float64)
        tb = Tensor(beta, requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.mul(Tensor(w), T.layer_norm(tx, tg, tb))).backward()
        assert relative_error(tx.grad, finite_difference(scalar, [x, gamma, beta], 0)) < 1e-4
        assert relative_error(tg.grad, finite_difference(scalar, [x, gamma, beta], 1)) < 1e-4
        assert relative_error(tb.grad, finite_difference(scalar, [x, gamma, beta], 2)) < 1e-4
