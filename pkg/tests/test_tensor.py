import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsegnet import tensor as T
from hsegnet.errors import CorruptionError, DimensionError, TapeError
from hsegnet.gradcheck import gradcheck
from hsegnet.tensor import Tensor

from oracles import conv2d_loops, gap_loops, maxpool_loops, unpool_loops


def rt(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestConv:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 5, 7))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        np.testing.assert_allclose(out, conv2d_loops(x, k, b), rtol=0, atol=1e-12)

    def test_valid_padding(self):
        rng = np.random.default_rng(1)
        x, k = rng.standard_normal((2, 6, 5)), rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), padding=0).data
        assert out.shape == (3, 4, 3)
        np.testing.assert_allclose(out, conv2d_loops(x, k, pad=0), atol=1e-12)

    def test_all_ones_counts_neighbours(self):
        out = T.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data[0]
        assert out[2, 2] == 9
        assert out[0, 0] == 4 and out[0, 4] == 4 and out[4, 0] == 4
        assert out[0, 2] == 6

    def test_identity_kernel(self):
        x = np.random.default_rng(2).standard_normal((2, 4, 4))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((4, 4))), Tensor(np.ones((1, 1, 3, 3))))


class TestPool:
    def test_against_loops(self):
        x = np.random.default_rng(3).standard_normal((3, 6, 8))
        y, idx = T.maxpool2x2_with_indices(Tensor(x))
        vals, pos = maxpool_loops(x)
        np.testing.assert_array_equal(y.data, vals)
        np.testing.assert_array_equal(idx.positions, pos)

    def test_ties_go_to_first_row_major(self):
        _, idx = T.maxpool2x2_with_indices(Tensor(np.ones((1, 2, 2))))
        assert idx.positions[0, 0, 0] == 0
        x = np.array([[[0.0, 2.0], [2.0, 2.0]]])
        assert T.maxpool2x2_with_indices(Tensor(x))[1].positions[0, 0, 0] == 1

    def test_unpool_scatter(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 6))
        y, idx = T.maxpool2x2_with_indices(Tensor(x))
        z = rng.standard_normal(y.shape)
        np.testing.assert_array_equal(T.maxunpool2x2(Tensor(z), idx).data, unpool_loops(z, idx.positions))

    def test_unpool_of_pool_keeps_maxima_only(self):
        x = np.random.default_rng(5).standard_normal((2, 4, 4))
        y, idx = T.maxpool2x2_with_indices(Tensor(x))
        u = T.maxunpool2x2(y, idx).data
        assert np.count_nonzero(u) == y.data.size
        assert set(u[u != 0].tolist()) == set(y.data.reshape(-1).tolist())

    def test_flat_indices(self):
        x = np.random.default_rng(6).standard_normal((2, 4, 6))
        y, idx = T.maxpool2x2_with_indices(Tensor(x))
        flat = idx.flat_indices()
        for c in range(2):
            np.testing.assert_array_equal(x[c].reshape(-1)[flat[c]], y.data[c])

    def test_odd_sizes_rejected(self):
        with pytest.raises(DimensionError):
            T.maxpool2x2_with_indices(Tensor(np.ones((1, 3, 4))))

    def test_corrupt_index_rejected(self):
        _, idx = T.maxpool2x2_with_indices(Tensor(np.ones((1, 2, 2))))
        idx.positions[0, 0, 0] = 7
        with pytest.raises(CorruptionError):
            T.maxunpool2x2(Tensor(np.ones((1, 1, 1))), idx)

    def test_mismatched_index_rejected(self):
        _, idx = T.maxpool2x2_with_indices(Tensor(np.ones((1, 4, 4))))
        with pytest.raises(DimensionError):
            T.maxunpool2x2(Tensor(np.ones((1, 1, 1))), idx)


class TestElementwise:
    def test_gap(self):
        x = np.random.default_rng(7).standard_normal((3, 5, 4))
        np.testing.assert_allclose(T.global_avg_pool(Tensor(x)).data, gap_loops(x), atol=1e-14)

    def test_sigmoid_open_interval(self):
        s = T.sigmoid(Tensor(np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0]))).data
        assert np.all(s > 0) and np.all(s < 1)
        assert s[2] == 0.5

    def test_sigmoid_float32_open_interval(self):
        s = T.sigmoid(Tensor(np.array([-200.0, 200.0]), dtype=np.float32)).data
        assert s.dtype == np.float32
        assert np.all(s > 0) and np.all(s < 1)

    def test_softmax_stable_and_normalised(self):
        x = np.array([[[1000.0, -1000.0]], [[1001.0, 0.0]]])
        p = T.softmax_over_channels(Tensor(x)).data
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-15)
        np.testing.assert_allclose(p[:, 0, 0], [1 / (1 + np.e), np.e / (1 + np.e)], rtol=1e-14)

    def test_broadcast_rules(self):
        a = Tensor(np.ones((3, 2, 2)))
        assert T.mul(a, Tensor(np.arange(3.0))).data[2, 1, 1] == 2
        assert T.mul(a, Tensor(np.full((1, 2, 2), 4.0))).data[0, 0, 1] == 4
        assert T.add(a, 2.0).data.max() == 3
        with pytest.raises(DimensionError):
            T.add(a, Tensor(np.ones((2, 2))))
        with pytest.raises(DimensionError):
            T.mul(a, Tensor(np.ones(2)))

    def test_channel_spatial_outer(self):
        m = np.array([1.0, 2.0])
        s = np.arange(4.0).reshape(1, 2, 2)
        np.testing.assert_array_equal(T.channel_spatial_outer(Tensor(m), Tensor(s)).data, m[:, None, None] * s)

    def test_operators(self):
        a, b = Tensor(np.full((1, 2, 2), 3.0)), Tensor(np.full((1, 2, 2), 2.0))
        assert (a + b).data[0, 0, 0] == 5
        assert (a - b).data[0, 0, 0] == 1
        assert (a * b).data[0, 0, 0] == 6
        assert (a / b).data[0, 0, 0] == 1.5
        assert (-a).data[0, 0, 0] == -3
        assert (1.0 - a).data[0, 0, 0] == -2

    def test_concat_and_slice(self):
        a, b = Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((2, 2, 2)))
        c = T.concat_channels([a, b])
        assert c.shape == (3, 2, 2)
        np.testing.assert_array_equal(T.slice_channels(c, 1, 3).data, b.data)
        with pytest.raises(DimensionError):
            T.concat_channels([a, Tensor(np.ones((1, 3, 2)))])


class TestTape:
    def test_simple_backward(self):
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [4.0, -6.0])

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        y = T.mul(x, 3.0)
        T.backward(T.sum(T.add(y, y)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum(T.mul(x, 2.0))
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_grads_accumulate_across_tapes(self):
        x = Tensor(np.ones(2), requires_grad=True)
        for _ in range(3):
            T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])
        x.zero_grad()
        assert x.grad is None or not np.any(x.grad)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises((DimensionError, TapeError, ValueError)):
            T.backward(T.mul(x, 2.0))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad

    def test_constants_get_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        T.backward(T.sum(T.mul(x, c)))
        assert c.grad is None

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.add(y, 0.0)
        T.backward(T.sum(y))
        assert x.grad[0] == 1.0


class TestSerialization:
    @pytest.mark.parametrize("shape", [(), (3,), (2, 3), (1, 2, 3, 4)])
    def test_round_trip(self, shape):
        a = np.random.default_rng(0).standard_normal(shape)
        buf = io.BytesIO()
        T.write_tensor(buf, a)
        buf.seek(0)
        np.testing.assert_array_equal(T.read_tensor(buf), a)
        assert buf.read() == b""

    def test_truncated(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.ones((2, 2)))
        with pytest.raises(CorruptionError):
            T.read_tensor(io.BytesIO(buf.getvalue()[:-3]))


# per-op gradient properties: every op must agree with central differences on random inputs

OPS = {
    "conv2d": (lambda a, k: T.conv2d(a, k), lambda r: {"a": rt(r, 2, 4, 5), "k": rt(r, 3, 2, 3, 3)}),
    "sigmoid": (lambda a: T.sigmoid(a), lambda r: {"a": rt(r, 2, 3, 3)}),
    "softmax": (lambda a: T.softmax_over_channels(a), lambda r: {"a": rt(r, 3, 3, 3)}),
    "gap": (lambda a: T.global_avg_pool(a), lambda r: {"a": rt(r, 3, 3, 4)}),
    "channel_mean": (lambda a: T.channel_mean(a), lambda r: {"a": rt(r, 3, 3, 4)}),
    "matvec": (lambda w, v: T.matvec(w, v), lambda r: {"w": rt(r, 3, 3), "v": rt(r, 3)}),
    "mul_channel": (lambda a, m: T.mul(a, m), lambda r: {"a": rt(r, 3, 2, 2), "m": rt(r, 3)}),
    "mul_spatial": (lambda a, m: T.mul(a, m), lambda r: {"a": rt(r, 3, 2, 2), "m": rt(r, 1, 2, 2)}),
    "outer": (lambda m, s: T.channel_spatial_outer(m, s), lambda r: {"m": rt(r, 3), "s": rt(r, 1, 2, 3)}),
    "unpool": (None, None),
}


def _unpool_case(r):
    _, idx = T.maxpool2x2_with_indices(Tensor(r.standard_normal((2, 4, 4))))
    return (lambda y: T.maxunpool2x2(y, idx)), {"y": rt(r, 2, 2, 2)}


@pytest.mark.parametrize("op", list(OPS))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients(op, seed):
    rng = np.random.default_rng(seed)
    if op == "unpool":
        fn, inputs = _unpool_case(rng)
    else:
        fn, make = OPS[op]
        inputs = make(rng)
    w = rng.standard_normal(fn(**inputs).shape)
    rep = gradcheck(lambda: T.sum(T.mul(fn(**inputs), w)), inputs, tol=1e-5)
    assert rep.passed, rep.table()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_maxpool_gradient_on_distinct_values(seed):
    rng = np.random.default_rng(seed)
    # distinct, well-separated values keep every window's winner stable under h
    x = Tensor(rng.permutation(32).reshape(2, 4, 4) * 0.1, requires_grad=True)
    w = rng.standard_normal((2, 2, 2))
    assert gradcheck(lambda: T.sum(T.mul(T.maxpool2x2_with_indices(x)[0], w)), {"x": x}, tol=1e-5).passed


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_relu_gradient_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.choice([-1, 1], (2, 3, 3)) * rng.uniform(0.1, 1, (2, 3, 3)), requires_grad=True)
    w = rng.standard_normal((2, 3, 3))
    assert gradcheck(lambda: T.sum(T.mul(T.relu(x), w)), {"x": x}, tol=1e-5).passed


@settings(max_examples=30, deadline=None)
@given(c=st.integers(2, 5), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one(c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((c, h, w)) * 30
    p = T.softmax_over_channels(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
