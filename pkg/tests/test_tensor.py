import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sgcn import tensor as T
from sgcn.errors import DimensionError, NumericalError
from sgcn.gradcheck import check_gradients
from sgcn.optim import SGD, OptimizerState, sgd_nesterov_step
from sgcn.tensor import Tape, Tensor


def P(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_permutation():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0, 1], [1, 0]]))
    np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_batched_broadcast():
    a = np.random.default_rng(0).normal(size=(4, 2, 3))
    b = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


# -- conv2d -----------------------------------------------------------------


def test_conv2d_scalar_kernel():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1))
    w = Tensor(np.array([2.0]).reshape(1, 1, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, w).data.ravel(), [2, 4, 6])


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_output_length():
    x = Tensor(np.ones((1, 1, 4, 2)))
    w = Tensor(np.ones((1, 1, 3, 1)))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 1, 2, 2)


def test_conv2d_full_joint_kernel():
    x = np.random.default_rng(2).normal(size=(2, 2, 6, 3))
    w = np.random.default_rng(3).normal(size=(4, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1)
    assert out.shape == (2, 4, 6, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ref = np.einsum("bctv,octv->bo", xp[:, :, 2:5], w)
    np.testing.assert_allclose(out.data[:, :, 2, 0], ref)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 11, 4))
    w = rng.normal(size=(5, 3, 9, 1))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=4).data
    xp = np.pad(x, ((0, 0), (0, 0), (4, 4), (0, 0)))
    ref = np.zeros_like(out)
    for t in range(out.shape[2]):
        ref[:, :, t] = np.einsum("bckv,ock->bov", xp[:, :, 2 * t : 2 * t + 9], w[:, :, :, 0])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 3, 2))), Tensor(np.ones((1, 1, 9, 1))))


# -- softmax / cross entropy ----------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-400


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    axis = x.ndim - 1
    s = T.softmax(Tensor(x), axis).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis).data, s, atol=1e-9)


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor(np.zeros((4, 60))), [0, 1, 2, 59]).item() == pytest.approx(math.log(60), abs=1e-12)
    assert T.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(2.061153622e-9, rel=1e-6)
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


# -- backward ---------------------------------------------------------------


def test_backward_square():
    x = P([1.0, 2.0])
    with Tape() as tape:
        loss = T.sum(x * x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2, 4])


def test_backward_independent_input_gets_zero():
    x, y = P([1.0, 2.0]), P([3.0])
    with Tape() as tape:
        loss = T.sum(y * y) + T.sum(x * 0.0)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0, 0])


def test_backward_accumulates_reuse():
    x = P([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = T.sum(x + x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2, 2, 2])


def test_backward_rejects_non_scalar():
    x = P([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_backward_frees_tape():
    x = P([1.0])
    with Tape() as tape:
        loss = T.sum(x * x)
    tape.backward(loss)
    assert len(tape.nodes) == 0


def test_no_recording_without_tape():
    x = P([1.0])
    y = x * 3.0
    with Tape() as tape:
        pass
    assert len(tape.nodes) == 0 and y.requires_grad


def test_backward_bit_identical():
    rng = np.random.default_rng(0)
    xd, wd = rng.normal(size=(2, 3, 8, 4)), rng.normal(size=(5, 3, 9, 1))

    def grads():
        x, w = P(xd.copy()), P(wd.copy())
        with Tape() as tape:
            loss = T.sum(T.relu(T.conv2d(x, w, padding=4)) * 0.5)
        tape.backward(loss)
        return x.grad, w.grad

    a, b = grads(), grads()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


# -- per-op finite differences ------------------------------------------------


def _bn_loss(x, g, b):
    rm, rv = np.zeros(x.shape[1]), np.ones(x.shape[1])
    y = T.batch_norm(x, g, b, rm, rv, training=True, update_running=False)
    return T.sum(y * y * Tensor(np.linspace(0.1, 1.0, y.size).reshape(y.shape)))


OP_CASES = {
    "add": lambda r: ([P(r.normal(size=(3, 4))), P(r.normal(size=(4,)))], lambda a, b: T.sum((a + b) * (a + b))),
    "sub": lambda r: ([P(r.normal(size=(2, 3))), P(r.normal(size=(2, 1)))], lambda a, b: T.sum((a - b) * a)),
    "mul": lambda r: ([P(r.normal(size=(2, 3))), P(r.normal(size=(3,)))], lambda a, b: T.sum(a * b * a)),
    "relu": lambda r: ([P(r.normal(size=(3, 4)) + 0.05)], lambda a: T.sum(T.relu(a) * a)),
    "exp": lambda r: ([P(r.normal(size=(5,)))], lambda a: T.sum(T.exp(a))),
    "reshape": lambda r: ([P(r.normal(size=(2, 6)))], lambda a: T.sum(T.reshape(a, (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4)))),
    "transpose": lambda r: ([P(r.normal(size=(2, 3, 4)))], lambda a: T.sum(T.transpose(a, (2, 0, 1)) * Tensor(np.arange(24.0).reshape(4, 2, 3)))),
    "mean": lambda r: ([P(r.normal(size=(3, 4)))], lambda a: T.sum(T.mean(a * a, axis=1) * Tensor([1.0, 2.0, 3.0]))),
    "pool": lambda r: ([P(r.normal(size=(2, 3, 4, 5)))], lambda a: T.sum(T.global_avg_pool(a * a) * Tensor(np.arange(6.0).reshape(2, 3)))),
    "matmul": lambda r: ([P(r.normal(size=(2, 3, 4))), P(r.normal(size=(4, 2)))], lambda a, b: T.sum(T.matmul(a, b) * T.matmul(a, b))),
    "softmax": lambda r: ([P(r.normal(size=(3, 5)))], lambda a: T.sum(T.softmax(a, 1) * Tensor(np.arange(15.0).reshape(3, 5)))),
    "log_softmax": lambda r: ([P(r.normal(size=(3, 5)))], lambda a: T.sum(T.log_softmax(a, 1) * Tensor(np.arange(15.0).reshape(3, 5)))),
    "cross_entropy": lambda r: ([P(r.normal(size=(4, 3)))], lambda a: T.cross_entropy(a, [0, 2, 1, 2])),
    "conv_pointwise": lambda r: ([P(r.normal(size=(2, 3, 5, 4))), P(r.normal(size=(2, 3, 1, 1)))],
                                lambda x, w: T.sum(T.conv2d(x, w, stride=2) * T.conv2d(x, w, stride=2))),
    "conv_temporal": lambda r: ([P(r.normal(size=(2, 2, 7, 3))), P(r.normal(size=(3, 2, 5, 1))), P(r.normal(size=(3,)))],
                                lambda x, w, b: T.sum(T.relu(T.conv2d(x, w, b, stride=2, padding=2)) * T.conv2d(x, w, b, stride=2, padding=2))),
    "batch_norm": lambda r: ([P(r.normal(size=(3, 2, 4, 3))), P(r.normal(size=(2,))), P(r.normal(size=(2,)))], _bn_loss),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(7))
def test_op_gradients_match_finite_differences(name, seed):
    params, fn = OP_CASES[name](np.random.default_rng(seed))
    err = check_gradients(lambda: fn(*params), params)
    assert err < 1e-4, f"{name}: relative error {err:.2e}"


# -- aux ops -----------------------------------------------------------------


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_batch_norm_constant_batch_is_zero():
    x = Tensor(np.full((4, 2, 3, 5), 7.0))
    rm, rv = np.zeros(2), np.ones(2)
    y = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_array_equal(y.data, 0.0)
    np.testing.assert_allclose(rm, 0.7)
    np.testing.assert_allclose(rv, 0.9)


def test_batch_norm_inference_uses_running_stats():
    x = Tensor(np.full((1, 1, 2, 2), 3.0))
    y = T.batch_norm(x, Tensor([2.0]), Tensor([1.0]), np.array([1.0]), np.array([4.0]), training=False)
    np.testing.assert_allclose(y.data, 2.0 * 2.0 / math.sqrt(4.0 + 1e-5) + 1.0)


def test_global_avg_pool_of_ones():
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.ones((2, 3, 4, 5)))).data, np.ones((2, 3)))


def test_shape_mismatch_in_add():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_check_finite():
    with pytest.raises(NumericalError):
        T.check_finite(Tensor([1.0, np.nan]))


# -- optimizer ----------------------------------------------------------------


def test_sgd_plain_when_no_momentum():
    w, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    state = OptimizerState(0.1, 0.0, 0.0, [np.zeros(2)])
    (new,) = sgd_nesterov_step([w], [g], state)
    np.testing.assert_array_equal(new, w - 0.1 * g)


def test_sgd_nesterov_hand_value():
    state = OptimizerState(0.1, 0.9, 0.0, [np.zeros(1)])
    (new,) = sgd_nesterov_step([np.array([1.0])], [np.array([1.0])], state)
    assert new[0] == pytest.approx(0.81, abs=1e-15)
    assert state.velocity[0][0] == 1.0


def test_sgd_fixed_point():
    state = OptimizerState(0.1, 0.9, 0.0, [np.zeros(3)])
    w = np.array([1.0, 2.0, 3.0])
    (new,) = sgd_nesterov_step([w], [np.zeros(3)], state)
    np.testing.assert_array_equal(new, w)


def test_sgd_weight_decay():
    state = OptimizerState(0.1, 0.0, 0.5, [np.zeros(1)])
    (new,) = sgd_nesterov_step([np.array([2.0])], [np.array([0.0])], state)
    assert new[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_sgd_shape_mismatch():
    state = OptimizerState(0.1, 0.9, 0.0, [np.zeros(2)])
    with pytest.raises(DimensionError):
        sgd_nesterov_step([np.zeros(3)], [np.zeros(3)], state)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)), hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(1e-4, 1.0))
def test_sgd_exact_plain_step(w, g, lr):
    state = OptimizerState(lr, 0.0, 0.0, [np.zeros(4)])
    (new,) = sgd_nesterov_step([w], [g], state)
    np.testing.assert_array_equal(new, w - lr * g)


def test_sgd_wrapper_velocity_zero_init():
    p = P(np.ones((2, 2)))
    opt = SGD([p], lr=0.1, momentum=0.9)
    assert opt.state.velocity[0].shape == (2, 2) and not opt.state.velocity[0].any()


# -- relu pattern replay ----------------------------------------------------------------


def test_relu_pattern_replays_recorded_masks():
    pattern = T.ReluPattern()
    x = Tensor(np.array([-1.0, 2.0, -3.0]))
    with T.use_relu_pattern(pattern):
        T.relu(x)
    pattern.rewind()
    with T.use_relu_pattern(pattern):
        out = T.relu(Tensor(np.array([5.0, -4.0, 1.0])))
    # masks of the first pass: only the middle entry passes
    np.testing.assert_array_equal(out.data, [0.0, -4.0, 0.0])
    np.testing.assert_array_equal(T.relu(Tensor(np.array([5.0, -4.0]))).data, [5.0, 0.0])


def test_relu_pattern_sequence_mismatch():
    pattern = T.ReluPattern()
    with T.use_relu_pattern(pattern):
        T.relu(Tensor(np.ones(3)))
    pattern.rewind()
    with T.use_relu_pattern(pattern):
        with pytest.raises(DimensionError):
            T.relu(Tensor(np.ones(4)))


def test_frozen_relu_gradcheck_agrees_away_from_kinks():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def loss():
        return T.sum(T.relu(T.matmul(x, w)) * T.relu(T.matmul(x, w)))

    assert check_gradients(loss, [x, w], freeze_relu=True) < 1e-6
    assert check_gradients(loss, [x, w]) < 1e-6
