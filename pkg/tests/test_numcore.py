import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tranet import numcore as nc
from tranet.numcore import _pykernels
from tranet.numcore.serialize import WeightFileError, dumps, loads
from tranet.verify import oracles
from tranet.verify.suites import PRIMITIVE_CASES, bce_gradient_error, primitive_gradient_error


def T(a, grad=False):
    return nc.Tensor(a, requires_grad=grad)


# --- forward values -------------------------------------------------------


class TestConv2d:
    def test_sum_of_ones(self):
        out = nc.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = nc.conv2d(T(x), T(k), T(np.zeros(1)), padding=1)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_nested_loops(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = nc.conv2d(T(x), T(w), T(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, oracles.conv2d(x, w, b, stride, padding), rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(nc.ShapeError, match="Cin"):
            nc.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))

    def test_window_too_large(self):
        with pytest.raises(nc.ShapeError, match="height"):
            nc.conv2d(T(np.ones((1, 1, 2, 5))), T(np.ones((1, 1, 3, 3))))


class TestFullyConnected:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        out = nc.fully_connected(T(x), T(np.eye(4)), T(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias(self, rng):
        b = rng.normal(size=5)
        out = nc.fully_connected(T(rng.normal(size=(3, 4))), T(np.zeros((5, 4))), T(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))

    def test_matches_dot_products(self, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
        out = nc.fully_connected(T(x), T(w), T(b))
        np.testing.assert_allclose(out.data, oracles.fully_connected(x, w, b), rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(nc.ShapeError, match="Din"):
            nc.fully_connected(T(np.ones((2, 3))), T(np.ones((4, 5))))


class TestPointwise:
    def test_sigmoid_zero(self):
        assert nc.sigmoid(T([0.0])).item() == 0.5

    def test_sigmoid_open_interval(self):
        s = nc.sigmoid(T(np.array([-30.0, -1.0, 0.0, 1.0, 30.0]))).data
        assert np.all(s > 0) and np.all(s < 1)

    def test_relu_idempotent(self, rng):
        x = T(rng.normal(size=(2, 3, 4, 4)))
        once = nc.relu(x)
        np.testing.assert_array_equal(nc.relu(once).data, once.data)

    def test_mul_add_chain(self, rng):
        a, b, c = (rng.normal(size=(2, 2, 2, 2)) for _ in range(3))
        out = nc.add(nc.mul(T(a), T(b)), T(c)).data
        for idx in np.ndindex(a.shape):
            assert abs(out[idx] - (a[idx] * b[idx] + c[idx])) <= 1e-15

    def test_size_one_expansion(self, rng):
        u = rng.normal(size=(2, 3, 4, 4))
        s = rng.normal(size=(2, 3, 1, 1))
        np.testing.assert_array_equal(nc.mul(T(u), T(s)).data, u * s)

    @pytest.mark.parametrize("shape", [(2, 3, 4), (2, 2, 4, 4), (3, 3, 4, 4)])
    def test_general_broadcast_rejected(self, shape):
        with pytest.raises(nc.ShapeError):
            nc.add(T(np.ones((2, 3, 4, 4))), T(np.ones(shape)))


class TestPooling:
    def test_global_pools(self):
        x = T(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert nc.global_avg_pool(x).item() == 2.5
        assert nc.global_max_pool(x).item() == 4.0

    def test_constant_channel(self):
        x = T(np.full((1, 2, 3, 5), 1.75))
        np.testing.assert_array_equal(nc.global_avg_pool(x).data, 1.75)
        np.testing.assert_array_equal(nc.global_max_pool(x).data, 1.75)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_global_pools_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 3, 4, 5))
        perm = r.permutation(20)
        xp = x.reshape(2, 3, 20)[:, :, perm].reshape(2, 3, 4, 5)
        np.testing.assert_array_equal(nc.global_max_pool(T(x)).data, nc.global_max_pool(T(xp)).data)
        np.testing.assert_allclose(nc.global_avg_pool(T(x)).data, nc.global_avg_pool(T(xp)).data, rtol=0, atol=1e-15)

    def test_windowed_2x2(self):
        x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert nc.max_pool2d(x, 2, 2).item() == 4.0
        assert nc.avg_pool2d(x, 2, 2).item() == 2.5

    def test_constant_input(self):
        x = T(np.full((1, 2, 6, 6), -0.5))
        np.testing.assert_array_equal(nc.max_pool2d(x, 2).data, -0.5)
        np.testing.assert_array_equal(nc.avg_pool2d(x, 3, 3).data, -0.5)

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
    def test_sliding_window_oracle(self, rng, k, stride):
        x = rng.normal(size=(1, 2, 6, 6))
        np.testing.assert_allclose(nc.max_pool2d(T(x), k, stride).data, oracles.pool2d(x, k, stride, "max"), atol=1e-12)
        np.testing.assert_allclose(nc.avg_pool2d(T(x), k, stride).data, oracles.pool2d(x, k, stride, "avg"), atol=1e-12)

    def test_window_too_large(self):
        with pytest.raises(nc.ShapeError):
            nc.max_pool2d(T(np.ones((1, 1, 2, 2))), 3)

    def test_max_tie_routes_to_first(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        nc.backward(nc.ops.sum(nc.max_pool2d(x, 2)))
        np.testing.assert_array_equal(x.grad.reshape(-1), [1, 0, 0, 0])
        y = T(np.ones((1, 1, 2, 2)), grad=True)
        nc.backward(nc.ops.sum(nc.global_max_pool(y)))
        np.testing.assert_array_equal(y.grad.reshape(-1), [1, 0, 0, 0])
        z = T(np.ones((1, 3, 1, 1)), grad=True)
        nc.backward(nc.ops.sum(nc.channel_max(z)))
        np.testing.assert_array_equal(z.grad.reshape(-1), [1, 0, 0])


# --- backward ---------------------------------------------------------------


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = T(rng.normal(size=(2, 3)), grad=True)
        nc.backward(nc.ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self, rng):
        x = T(rng.normal(size=(2, 3)), grad=True)
        nc.backward(nc.ops.sum(nc.mul(x, x)))
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_non_scalar_rejected(self, rng):
        x = T(rng.normal(size=(2,)), grad=True)
        with pytest.raises(nc.GraphError, match="scalar"):
            nc.backward(nc.relu(x))

    def test_released_activations_diagnosed(self, rng):
        x = T(rng.normal(size=(3,)), grad=True)
        loss = nc.ops.sum(nc.sigmoid(x))
        nc.backward(loss)
        with pytest.raises(nc.GraphError, match="released"):
            nc.backward(loss)

    def test_cycle_diagnosed(self, rng):
        x = T(rng.normal(size=(3,)), grad=True)
        a = nc.relu(x)
        b = nc.relu(a)
        a._parents = (b,)
        with pytest.raises(nc.GraphError, match="cycle"):
            nc.ComputeGraph.trace(nc.ops.sum(b))

    def test_graph_topological(self, rng):
        x = T(rng.normal(size=(1, 2, 4, 4)), grad=True)
        y = nc.add(nc.relu(x), nc.sigmoid(x))
        g = nc.ComputeGraph.trace(nc.ops.sum(y))
        seen = {x.id}
        for node in g.nodes:
            assert all(i in seen for i in node.inputs)
            seen.add(node.output)
        assert [n.op for n in g.nodes][-1] == "sum"

    def test_no_grad_records_nothing(self, rng):
        x = T(rng.normal(size=(3,)), grad=True)
        with nc.no_grad():
            y = nc.relu(x)
        assert not y.requires_grad


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(50))
def test_primitive_gradients(name, seed):
    assert primitive_gradient_error(name, seed) < 1e-6


@pytest.mark.parametrize("seed", range(50))
def test_bce_gradient(seed):
    assert bce_gradient_error(seed) < 1e-6


class TestGroupNorm:
    def test_matches_oracle(self, rng):
        for _ in range(20):
            x, g, b = rng.normal(size=(2, 6, 3, 4)), rng.normal(size=6), rng.normal(size=6)
            out = nc.group_norm(T(x), T(g), T(b), 3).data
            np.testing.assert_allclose(out, oracles.group_norm(x, g, b, 3), rtol=0, atol=1e-12)

    def test_unit_gamma_normalizes_each_group(self, rng):
        x = rng.normal(loc=5, scale=3, size=(2, 4, 5, 5))
        out = nc.group_norm(T(x), T(np.ones(4)), T(np.zeros(4)), 2).data.reshape(2, 2, -1)
        np.testing.assert_allclose(out.mean(axis=2), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=2), 1, atol=1e-5)

    def test_per_sample(self, rng):
        x = rng.normal(size=(3, 4, 2, 2))
        g, b = T(np.ones(4)), T(np.zeros(4))
        full = nc.group_norm(T(x), g, b, 2).data
        np.testing.assert_array_equal(full[1:2], nc.group_norm(T(x[1:2]), g, b, 2).data)

    @pytest.mark.parametrize("groups,c", [(3, 4), (2, 5)])
    def test_indivisible(self, groups, c):
        with pytest.raises(nc.ShapeError):
            nc.group_norm(T(np.ones((1, c, 2, 2))), T(np.ones(c)), T(np.zeros(c)), groups)


def test_gradcheck_sigmoid_sum():
    p = T([0.3], grad=True)
    assert nc.finite_diff_check(lambda: nc.ops.sum(nc.sigmoid(p)), [p]) < 1e-8


def test_gradcheck_rejects_nondeterminism():
    p = T([0.3], grad=True)
    r = np.random.default_rng()
    with pytest.raises(nc.NonDeterministicError):
        nc.finite_diff_check(lambda: nc.ops.sum(nc.mul(p, nc.constant([r.normal()]))), [p])


def test_gradcheck_requires_double():
    p = T([0.3], grad=True)
    with nc.precision("float32"):
        with pytest.raises(RuntimeError, match="float64"):
            nc.finite_diff_check(lambda: nc.ops.sum(p), [p])


def test_bce_stable_and_exact(rng):
    assert abs(nc.bce_with_logits(T([[0.0]]), [[1]]).item() - np.log(2)) < 1e-15
    big = nc.bce_with_logits(T([[20.0, -800.0]]), [[1, 0]]).item()
    assert np.isfinite(big) and big < 1e-8
    for _ in range(20):
        x = rng.normal(scale=5, size=(4, 3))
        y = rng.integers(0, 2, size=(4, 3))
        assert abs(nc.bce_with_logits(T(x), y).item() - oracles.bce(x, y)) < 1e-10
    with pytest.raises(ValueError, match="0 or 1"):
        nc.bce_with_logits(T([[0.0]]), [[2]])


# --- engine properties ----------------------------------------------------


def test_forward_bit_deterministic(rng):
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = nc.max_pool2d(nc.relu(nc.conv2d(T(x), T(w), padding=1)), 2).data
    b = nc.max_pool2d(nc.relu(nc.conv2d(T(x), T(w), padding=1)), 2).data
    assert a.tobytes() == b.tobytes()


def test_float32_mode():
    with nc.precision("float32"):
        t = nc.Tensor(np.ones(3))
        assert t.data.dtype == np.float32
        assert nc.sigmoid(t).data.dtype == np.float32
    assert nc.Tensor(np.ones(3)).data.dtype == np.float64


def test_concurrent_graphs_are_independent(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    expected = None
    results = {}

    def work(i):
        xt, wt = T(x, True), T(w, True)
        nc.backward(nc.ops.sum(nc.sigmoid(nc.conv2d(xt, wt, padding=1))))
        results[i] = wt.grad

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for g in results.values():
        expected = g if expected is None else expected
        np.testing.assert_array_equal(g, expected)


def test_backends_agree(rng):
    from tranet.numcore import kernels

    x = rng.normal(size=(2, 3, 7, 7))
    cols = _pykernels.im2col(x, 3, 3, 2, 3, 3)
    np.testing.assert_array_equal(kernels.im2col(x, 3, 3, 2, 3, 3), cols)
    np.testing.assert_allclose(
        kernels.col2im(cols, 3, 7, 7, 3, 3, 2, 3, 3), _pykernels.col2im(cols, 3, 7, 7, 3, 3, 2, 3, 3), atol=1e-14
    )
    o1, a1 = kernels.maxpool_forward(x, 3, 2, 3, 3)
    o2, a2 = _pykernels.maxpool_forward(x, 3, 2, 3, 3)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)


class TestWeightFile:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        tensors = {
            "enc.stem.weight": rng.normal(size=(4, 3, 7, 7)).astype(np.float32),
            "att.upper.cbam0.w1": rng.normal(size=(2, 8)).astype(np.float32),
            "scalar": np.float32(3.5).reshape(()),
        }
        path = tmp_path / "w.traw"
        nc.save_weights(path, tensors)
        blob = path.read_bytes()
        assert blob[:5] == b"TRAW1"
        back = nc.load_weights(path)
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == tensors[k].shape
            assert back[k].tobytes() == tensors[k].tobytes()
        assert dumps(back) == blob

    def test_record_layout(self):
        blob = dumps({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
        expected = (
            b"TRAW1"
            + (2).to_bytes(4, "little")
            + b"ab"
            + (2).to_bytes(4, "little")
            + (1).to_bytes(8, "little")
            + (2).to_bytes(8, "little")
            + np.array([1.0, 2.0], dtype="<f4").tobytes()
        )
        assert blob == expected

    def test_bad_magic_and_truncation(self):
        with pytest.raises(WeightFileError):
            loads(b"NOPE")
        with pytest.raises(WeightFileError):
            loads(dumps({"x": np.ones(4, np.float32)})[:-3])
