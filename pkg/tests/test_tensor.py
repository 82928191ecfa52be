import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rocnet import tensor as T
from rocnet.gradcheck import grad_check, op_checks
from rocnet.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def zeros(*shape):
    return Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# convolution

def test_conv3d_zero_kernel():
    x = Tensor(np.ones((1, 4, 4, 4)))
    y = T.conv3d(x, zeros(1, 1, 4, 4, 4), zeros(1))
    assert y.shape == (1, 1, 1, 1)
    assert y.data.item() == 0.0


def test_conv3d_halves_side():
    x = Tensor(np.ones((1, 32, 32, 32)))
    w = Tensor(np.full((2, 1, 4, 4, 4), 0.1))
    assert T.conv3d(x, w, zeros(2), stride=2, padding=1).shape == (2, 16, 16, 16)


def test_conv3d_direct_sum():
    x = Tensor(np.arange(1, 9, dtype=np.float64).reshape(1, 2, 2, 2))
    y = T.conv3d(x, Tensor(np.ones((1, 1, 2, 2, 2))), zeros(1))
    assert y.data.item() == 36.0


def test_conv3d_matches_loop(rng):
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    want = np.zeros((3, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * k:2 * k + 3]
                    want[o, i, j, k] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv3d_shape_errors():
    with pytest.raises(T.DimensionError):
        T.conv3d(zeros(2, 4, 4, 4), zeros(1, 1, 2, 2, 2), zeros(1))
    with pytest.raises(T.DimensionError):
        T.conv3d(zeros(1, 2, 2, 2), zeros(1, 1, 4, 4, 4), zeros(1))
    with pytest.raises(T.DimensionError):
        T.conv3d(zeros(1, 4, 4, 4), zeros(1, 1, 2, 2, 2), zeros(2))


def test_conv_transpose_delta_copies_kernel():
    y = T.conv_transpose3d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 4, 4, 4))), zeros(1))
    np.testing.assert_array_equal(y.data, np.ones((1, 4, 4, 4)))


def test_conv_transpose_doubles_side():
    x = Tensor(np.ones((64, 4, 4, 4)))
    y = T.conv_transpose3d(x, Tensor(np.full((64, 1, 4, 4, 4), 0.01)), zeros(1), stride=2, padding=1)
    assert y.shape == (1, 8, 8, 8)


def test_adjoint_small(rng):
    x = rng.normal(size=(1, 2, 2, 2))
    y = rng.normal(size=(1, 3, 3, 3))
    w = Tensor(rng.normal(size=(1, 1, 2, 2, 2)))
    lhs = np.vdot(T.conv3d(Tensor(y), w, zeros(1)).data, x)
    rhs = np.vdot(y, T.conv_transpose3d(Tensor(x), w, zeros(1)).data)
    assert abs(lhs - rhs) < 1e-10


@settings(max_examples=30, deadline=None)
@given(
    side=st.integers(2, 8),
    k=st.integers(1, 4),
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    seed=st.integers(0, 2 ** 16),
)
def test_adjoint_identity(side, k, stride, padding, c_in, c_out, seed):
    if side + 2 * padding < k:
        return
    r = np.random.default_rng(seed)
    w = Tensor(r.normal(size=(c_out, c_in, k, k, k)))
    x = r.normal(size=(c_in, side, side, side))
    cx = T.conv3d(Tensor(x), w, zeros(c_out), stride, padding).data
    y = r.normal(size=cx.shape)
    # conv_transpose maps back to the side conv3d consumed, unless stride drops a remainder
    ty = T.conv_transpose3d(Tensor(y), w, zeros(c_in), stride, padding).data
    if ty.shape != x.shape:
        return
    assert abs(np.vdot(cx, y) - np.vdot(x, ty)) < 1e-10 * max(1.0, abs(np.vdot(cx, y)))


# ---------------------------------------------------------------------------
# batch norm

def test_batch_norm_normalized_input_passes_through(rng):
    x = rng.normal(size=(64, 2))
    x = (x - x.mean(0)) / x.std(0)
    y = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True)
    # dividing by sqrt(1 + eps) shrinks values by about eps / 2
    np.testing.assert_allclose(y.data, x, rtol=1e-5)


def test_batch_norm_zero_gamma(rng):
    beta = np.array([0.5, -1.5, 2.0])
    y = T.batch_norm(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(beta), training=True)
    np.testing.assert_array_equal(y.data, np.broadcast_to(beta, (4, 3)))


def test_batch_norm_hand_values():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    y = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), training=True, eps=1e-5)
    np.testing.assert_allclose(y.data[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_batch_norm_constant_channel_is_finite():
    y = T.batch_norm(Tensor(np.full((4, 2), 3.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True)
    np.testing.assert_array_equal(y.data, 0.0)


def test_batch_norm_moments(rng):
    x = rng.normal(3.0, 2.5, size=(5, 4, 3, 3, 3))
    y = T.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-5)


def test_batch_norm_running_stats_and_eval(rng):
    x = rng.normal(2.0, 3.0, size=(10, 2))
    running = T.RunningStats(2, np.float64)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running, training=True)
    np.testing.assert_allclose(running.mean, 0.1 * x.mean(0))
    np.testing.assert_allclose(running.var, 0.9 + 0.1 * x.var(0, ddof=1))
    y = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), running, training=False)
    np.testing.assert_allclose(y.data, (x - running.mean) / np.sqrt(running.var + 1e-5))


def test_batch_norm_fixed_stats_and_record(rng):
    x = Tensor(rng.normal(size=(6, 3)))
    rec = []
    a = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True, record=rec)
    b = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True, stats=rec[0])
    np.testing.assert_allclose(a.data, b.data)


def test_batch_norm_channel_mismatch():
    with pytest.raises(T.DimensionError):
        T.batch_norm(zeros(2, 3), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# activations, linear, losses

def test_elu_values():
    y = T.elu(Tensor(np.array([0.0, 2.0, math.log(0.5)]))).data
    np.testing.assert_allclose(y, [0.0, 2.0, -0.5])


def test_sigmoid_values():
    y = T.sigmoid(Tensor(np.array([0.0, 800.0, -800.0]))).data
    assert y[0] == 0.5
    assert np.all(np.isfinite(y))
    assert y[1] == 1.0 and y[2] == 0.0


def test_activation_dispatch():
    x = Tensor(np.array([-1.0, 1.0]))
    np.testing.assert_array_equal(T.activation("elu", x).data, T.elu(x).data)
    with pytest.raises(ValueError):
        T.activation("relu", x)


def test_linear_examples():
    x = Tensor(np.array([1.0, 1.0]))
    np.testing.assert_array_equal(T.linear(x, Tensor(np.eye(2)), zeros(2)).data, x.data)
    b = np.array([4.0, -1.0])
    np.testing.assert_array_equal(T.linear(x, Tensor(np.zeros((2, 2))), Tensor(b)).data, b)
    np.testing.assert_array_equal(
        T.linear(x, Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), zeros(2)).data, [3.0, 7.0])
    with pytest.raises(T.DimensionError):
        T.linear(Tensor(np.ones(3)), Tensor(np.eye(2)), zeros(2))


def test_cross_entropy_examples():
    assert T.softmax_cross_entropy(Tensor(np.zeros(4)), 1).data == pytest.approx(math.log(4))
    assert T.softmax_cross_entropy(Tensor(np.array([30.0, -30, -30, -30])), 0).data == pytest.approx(0, abs=1e-20)
    assert T.softmax_cross_entropy(Tensor(np.array([1.0, 2, 3, 4])), 3).data == pytest.approx(0.4402, abs=1e-4)


def test_cross_entropy_gradient_sums_to_zero(rng):
    z = leaf(rng.normal(size=4) * 5)
    T.softmax_cross_entropy(z, 2).backward()
    assert abs(z.grad.sum()) < 1e-10


def test_weighted_bce_examples():
    half = Tensor(np.array([0.5]))
    assert T.weighted_bce(half, np.array([1]), 5.0).data == pytest.approx(5 * math.log(2))
    assert T.weighted_bce(half, np.array([0]), 5.0).data == pytest.approx(math.log(2))
    eps = 1e-12
    assert T.weighted_bce(Tensor(np.array([eps, 1 - eps])), np.array([0, 1]), 5.0).data < 1e-10


def test_weighted_bce_saturated_stays_finite():
    loss = T.weighted_bce(Tensor(np.array([1.0, 0.0], dtype=np.float32)), np.array([0, 1]), 5.0)
    assert np.isfinite(loss.data)


def test_bce_with_logits_matches_probability_form(rng):
    z = rng.normal(size=(3, 4)) * 3
    t = rng.random((3, 4)) < 0.5
    a = T.weighted_bce_with_logits(Tensor(z), t, 5.0).data
    b = T.weighted_bce(T.sigmoid(Tensor(z)), t, 5.0).data
    assert a == pytest.approx(b, rel=1e-12)


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=10))
    assert T.dropout(x, 0.5, rng, training=False) is x


# ---------------------------------------------------------------------------
# engine

def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square(rng):
    x = leaf(rng.normal(size=5))
    T.scale(T.tsum(T.mul(x, x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates(rng):
    x = leaf(rng.normal(size=3))
    T.tsum(x).backward()
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_shared_subexpression():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_non_scalar_raises(rng):
    with pytest.raises(T.UsageError):
        leaf(rng.normal(size=3)).backward()


def test_non_finite_forward_raises():
    with pytest.raises(T.NumericError), np.errstate(over="ignore"):
        T.scale(Tensor(np.array([1e308])), 1e10)


def test_shape_mismatch_raises():
    with pytest.raises(T.DimensionError):
        T.add(zeros(2), zeros(3))


def test_composed_graph_gradcheck(rng):
    x = leaf(rng.normal(size=(1, 3, 3, 3)))
    w = leaf(rng.normal(size=(2, 1, 2, 2, 2)))
    b = leaf(rng.normal(size=2))

    def fn():
        h = T.elu(T.conv3d(x, w, b))
        return T.tsum(T.mul(T.sigmoid(h), h))

    report = grad_check(fn, {"x": x, "w": w, "b": b})
    assert report.passed, report.line()


def test_all_op_gradchecks_pass():
    reports = op_checks(seed=3)
    failed = [r.line() for r in reports if not r.passed]
    assert not failed


def test_grad_check_reports_instead_of_raising():
    x = leaf([1.0, 2.0])

    def wrong():
        # forward doubles, backward claims the identity
        return T._result(np.asarray((2 * x.data).sum()), (x,), lambda g: (np.full(2, g),), "wrong")

    report = grad_check(wrong, {"x": x})
    assert not report.passed
    assert report.line().startswith("FAIL")


def test_grad_check_step_bounds():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: T.tsum(x), {"x": x}, h=1e-3)


def test_track_memory_counts_live_bytes():
    with T.track_memory() as tracker:
        a = Tensor(np.zeros(1000))
        b = Tensor(np.zeros(500))
        del a
        c = Tensor(np.zeros(100))
    assert tracker.peak == 8 * 1500
    del b, c


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_serialization_round_trip(rng, dtype):
    arr = rng.normal(size=(2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    assert len(buf.getvalue()) == 4 + 3 * 4 + 1 + arr.nbytes
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.dtype == dtype
    np.testing.assert_array_equal(back, arr)
