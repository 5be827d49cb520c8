import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskoracle import tensor as T
from riskoracle.errors import DegenerateBatchError, DimensionError, OptimizerAbort
from riskoracle.gradcheck import check_gradients
from riskoracle.nn import BatchNorm, batch_norm, init_param
from riskoracle.optim import Adam, AdamState, adam_step


def rand(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(out, rng):
    w = rng.normal(size=out.shape)
    return (out * w).sum()


class TestMatmul:
    def test_identity(self):
        m = T.Tensor([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal((T.Tensor(np.eye(2)) @ m).data, m.data)

    def test_hand_product(self):
        out = T.Tensor([[1, 2], [3, 4]]) @ T.Tensor([[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_sum_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 5, 4), rand(rng, 4, 3)
        assert check_gradients(lambda a, b: (a @ b).sum(), [a, b]) < 1e-6

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


class TestLeakyRelu:
    def test_values(self):
        assert T.leaky_relu(T.Tensor(3.0), 0.2).item() == 3.0
        assert T.leaky_relu(T.Tensor(-2.0), 0.2).item() == pytest.approx(-0.4)

    def test_gradient_negative_side(self):
        x = T.Tensor(-1.0, requires_grad=True)
        T.leaky_relu(x, 0.2).backward()
        assert x.grad == pytest.approx(0.2)
        assert check_gradients(lambda x: T.leaky_relu(x, 0.2), [x]) < 1e-8


class TestBatchNorm:
    def test_eval_constant_column_with_matching_running_mean(self):
        bn = BatchNorm(2)
        bn.running_mean = np.array([3.0, 3.0])
        bn.gamma.data[:] = 5.0
        x = T.Tensor(np.full((4, 2), 3.0))
        np.testing.assert_array_equal(bn(x, training=False).data, 0.0)

    def test_training_standardises(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(3.0, 4.0, size=(50, 3)))
        out = batch_norm(x, BatchNorm(3, eps=0.0), training=True).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)

    def test_running_stats_only_move_in_training(self):
        bn = BatchNorm(2)
        x = T.Tensor(np.arange(8.0).reshape(4, 2))
        bn(x, training=False)
        np.testing.assert_array_equal(bn.running_mean, 0.0)
        bn(x, training=True)
        assert np.all(bn.running_mean > 0)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        bn = BatchNorm(3)
        bn.gamma.data[:] = rng.normal(size=3)
        bn.beta.data[:] = rng.normal(size=3)
        x = rand(rng, 4, 3)
        w = rng.normal(size=(4, 3))
        err = check_gradients(lambda x, g, b: (batch_norm(x, bn, True) * w).sum(),
                              [x, bn.gamma, bn.beta])
        assert err < 1e-5

    def test_batch_stats_at_inference_leave_running_stats(self):
        bn = BatchNorm(2, eps=0.0)
        x = T.Tensor(np.array([[1.0, 4.0], [3.0, 8.0]]))
        out = batch_norm(x, bn, training=False, batch_stats=True).data
        np.testing.assert_allclose(out, [[-1.0, -1.0], [1.0, 1.0]])
        np.testing.assert_array_equal(bn.running_mean, 0.0)
        with pytest.raises(ValueError):
            batch_norm(x, bn, training=True, batch_stats=False)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            batch_norm(T.Tensor(np.ones((1, 3))), BatchNorm(3), training=True)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = T.Tensor([1.0, -2.0], requires_grad=True)
        adam_step([p], [np.zeros(2)], AdamState(lr=0.1))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = T.Tensor([0.0], requires_grad=True)
        adam_step([p], [np.array([0.5])], AdamState(lr=0.01))
        # bias-corrected m/sqrt(v) = g/|g| at t=1
        assert p.data[0] == pytest.approx(-0.01 * 0.5 / (0.5 + 1e-8), rel=1e-12)

    def test_constant_gradient_bound(self):
        p = T.Tensor([0.0], requires_grad=True)
        state = AdamState(lr=0.01)
        prev = 0.0
        for _ in range(2):
            adam_step([p], [np.array([0.5])], state)
            assert abs(p.data[0] - prev) <= 0.01 * (1 + 1e-9)
            prev = p.data[0]
        assert state.t == 2

    def test_non_finite_aborts(self):
        p = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(OptimizerAbort):
            adam_step([p], [np.array([np.nan])], AdamState())
        assert p.data[0] == 1.0

    def test_minimises_quadratic(self):
        p = T.Tensor([3.0, -1.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            T.tsum(T.square(p - 1.0)).backward()
            opt.step()
        np.testing.assert_allclose(p.data, 1.0, atol=1e-2)


class TestInit:
    def test_deterministic(self):
        np.testing.assert_array_equal(init_param((4, 3), 7).data, init_param((4, 3), 7).data)

    def test_bound(self):
        w = init_param((30, 20), 0).data
        assert np.all(np.abs(w) <= np.sqrt(6 / 50))

    def test_seeds_differ(self):
        assert np.any(init_param((4, 3), 1).data != init_param((4, 3), 2).data)

    def test_zero_extent(self):
        with pytest.raises(DimensionError):
            init_param((0, 3), 0)


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 3)
        y = T.exp(x)
        (y * y + y).sum().backward()
        shared = x.grad.copy()
        # same expression built from two independent copies of x
        x1, x2, x3 = (T.Tensor(x.data.copy(), requires_grad=True) for _ in range(3))
        (T.exp(x1) * T.exp(x2) + T.exp(x3)).sum().backward()
        np.testing.assert_allclose(shared, x1.grad + x2.grad + x3.grad, rtol=1e-12)

    def test_deep_chain_no_recursion_limit(self):
        x = T.Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_backward_needs_scalar(self):
        with pytest.raises(DimensionError):
            T.Tensor(np.ones(3), requires_grad=True).backward()


UNARY = {
    "exp": T.exp,
    "log": lambda x: T.log(T.exp(x) + 1.0),
    "sqrt": lambda x: T.sqrt(T.square(x) + 0.5),
    "square": T.square,
    "power": lambda x: T.power(T.exp(x), 1.7),
    "leaky_relu": lambda x: T.leaky_relu(x, 0.2),
    "relu": T.relu,
    "softmax": lambda x: T.softmax(x, axis=-1),
    "mean0": lambda x: T.mean(x, axis=0, keepdims=True),
    "sum1": lambda x: T.tsum(x, axis=1),
    "transpose": T.transpose,
    "reshape": lambda x: T.reshape(x, (-1,)),
    "getitem": lambda x: x[1:, ::2],
    "take_rows": lambda x: T.take_rows(x, [0, 2, 2]),
}

BINARY = {
    "add_bcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_bcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (T.square(b) + 1.0),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
    "einsum": lambda a, b: T.einsum("ij,kj->ik", a, b),
    "matmul": lambda a, b: a @ T.transpose(b),
    "bmm": lambda a, b: T.bmm(T.reshape(a, (3, 2, 2)), T.reshape(b, (3, 2, 2))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        x = rand(rng, 3, 4)
        x.data[np.abs(x.data) < 1e-3] = 0.1  # keep away from kinks
        w = rng.normal(size=UNARY[name](x).shape)
        assert check_gradients(lambda x: (UNARY[name](x) * w).sum(), [x]) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)
        w = rng.normal(size=BINARY[name](a, b).shape)
        assert check_gradients(lambda a, b: (BINARY[name](a, b) * w).sum(), [a, b]) < 1e-4


def test_pairwise_js_gradient():
    rng = np.random.default_rng(5)
    raw = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = rng.normal(size=(5, 5))
    fn = lambda r: (T.pairwise_js(T.softmax(r, axis=1)) * w).sum()
    assert check_gradients(fn, [raw]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matmul_chain_property(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rand(rng, 3, 2), rand(rng, 2, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    fn = lambda a, b, c: (T.leaky_relu(a @ b, 0.2) @ c * w).sum()
    assert check_gradients(fn, [a, b, c]) < 1e-4


def test_bmm_matches_numpy_and_checks_shapes():
    rng = np.random.default_rng(zlib.crc32(b"bmm"))
    a, b = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(T.bmm(a, b).data, a @ b)
    with pytest.raises(DimensionError):
        T.bmm(a, rng.normal(size=(3, 5, 2)))
