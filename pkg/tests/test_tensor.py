import io
import math

import numpy as np
import pytest

from painlarks import tensor as T
from painlarks.tensor import ShapeError, TapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_projector():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_grad_closed_form_and_fd():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    T.backward(T.tsum(T.matmul(a, b)))
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    fd = numeric_grad(lambda: float(np.sum(a.data @ b.data)), a.data)
    assert np.max(np.abs(a.grad - fd) / np.maximum(np.abs(fd), 1e-12)) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\[3, 4\].*\[3, 2\]"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------- convolutions


def test_conv2d_full_window_sum():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 4, 4))), stride=4)
    assert out.shape == (1, 1, 1)
    assert out.data.item() == x.sum()


def test_conv2d_patchify_shape():
    out = T.conv2d(Tensor(np.zeros((3, 224, 224))), Tensor(np.zeros((96, 3, 4, 4))), stride=4)
    assert out.shape == (96, 56, 56)


def test_conv2d_depthwise_gradcheck():
    rng = np.random.default_rng(1)
    x, k = leaf(rng.normal(size=(2, 5, 5))), leaf(rng.normal(size=(2, 1, 3, 3)))
    err = T.gradcheck(lambda a, b: T.conv2d(a, b, stride=1, pad=1, groups=2), [x, k], rng=rng)
    assert err < 1e-6


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 4, 4))))


def test_conv2d_groups_must_divide_channels():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)


def test_conv1d_identity_kernel():
    x = np.random.default_rng(2).normal(size=(6, 3))
    k = np.eye(3)[:, :, None]
    assert np.array_equal(T.conv1d_temporal(Tensor(x), Tensor(k)).data, x)


def test_conv1d_same_padding_keeps_length():
    out = T.conv1d_temporal(Tensor(np.ones((20, 2))), Tensor(np.ones((4, 2, 9))), pad=4)
    assert out.shape == (20, 4)


def test_conv1d_valid_length():
    out = T.conv1d_temporal(Tensor(np.ones((7, 2))), Tensor(np.ones((1, 2, 3))), pad=0)
    assert out.shape == (5, 1)


def test_conv1d_gradcheck():
    rng = np.random.default_rng(3)
    x, k = leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=(2, 3, 3)))
    assert T.gradcheck(lambda a, b: T.conv1d_temporal(a, b, pad=1), [x, k], rng=rng) < 1e-6


def test_conv1d_too_short():
    with pytest.raises(ShapeError):
        T.conv1d_temporal(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 1, 5))))


# ---------------------------------------------------------------- elementwise


def test_activations_at_zero():
    z = Tensor(np.zeros(3))
    assert np.all(T.gelu(z).data == 0)
    assert np.all(T.sigmoid(z).data == 0.5)
    assert np.all(T.tanh(z).data == 0)


def test_gelu_asymptote_and_exact_form():
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-9
    x = 0.7
    assert abs(T.gelu(Tensor([x])).data[0] - 0.5 * x * (1 + math.erf(x / math.sqrt(2)))) < 1e-15


def test_saturation_without_overflow():
    x = Tensor([-700.0, 700.0])
    with np.errstate(all="raise"):
        s, t = T.sigmoid(x).data, T.tanh(x).data
    assert np.all(np.isfinite(s)) and s[1] == 1.0 and s[0] >= 0
    assert np.array_equal(t, [-1.0, 1.0])


def test_mul_values_and_product_rule():
    a, b = leaf([1.0, 2.0, 3.0]), leaf([4.0, 5.0, 6.0])
    assert np.array_equal(T.mul(a, b).data, [4, 10, 18])
    assert T.gradcheck(T.mul, [a, b]) < 1e-6


def test_elementwise_dispatch():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(T.elementwise("add", a, b).data, [4, 2])
    assert np.array_equal(T.elementwise("relu", a).data, [1, 0])
    with pytest.raises(ValueError):
        T.elementwise("softplus", a)


def test_binary_ops_reject_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 3))))


def test_scalar_operands_allowed():
    x = leaf([1.0, 2.0])
    y = T.tsum(x * 3.0 + Tensor(1.0) - 2.0)
    T.backward(y)
    assert np.array_equal(x.grad, [3.0, 3.0])


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_input():
    out = T.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0)


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [-1, 1], atol=1e-3)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(4)
    args = [leaf(rng.normal(size=(2, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))]
    assert T.gradcheck(T.layer_norm, args, rng=rng) < 1e-5


def test_layer_norm_parameter_shape():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------- backward and tape


def test_backward_linear_and_quadratic():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, [1, 1, 1])
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(x * x))
    assert np.array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(TapeError):
        T.backward(x * 2.0)
    T.new_tape()


def test_backward_twice_on_consumed_tape():
    x = leaf([1.0, 2.0])
    loss = T.tsum(x * x)
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_stale_activation_cannot_be_reused():
    x = leaf([1.0, 2.0])
    h = x * 2.0
    T.backward(T.tsum(h))
    with pytest.raises(TapeError):
        T.tsum(h * x)


def test_tape_records_in_topological_order():
    tape = T.new_tape()
    x = leaf([1.0])
    y = x * 2.0
    z = T.tanh(y)
    assert [n.output for n in tape.nodes] == [y, z]
    assert tape.nodes[1].inputs == (y,)
    T.new_tape()


def test_no_grad_records_nothing():
    tape = T.new_tape()
    x = leaf([1.0])
    with T.no_grad():
        y = T.exp(x)
    assert len(tape) == 0 and y.tape_node is None and not y.requires_grad


def test_constant_never_receives_gradient():
    c = Tensor([1.0, 2.0])
    x = leaf([3.0, 4.0])
    T.backward(T.tsum(c * x))
    assert np.array_equal(c.grad, [0, 0])
    assert np.array_equal(x.grad, [1, 2])


def test_grad_zero_after_creation_and_zero_grad_idempotent():
    x = leaf(np.ones((2, 3)))
    assert np.array_equal(x.grad, np.zeros((2, 3)))
    T.backward(T.tsum(x * x))
    x.zero_grad()
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_gradients_accumulate_across_passes():
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(x))
    T.backward(T.tsum(x * 3.0))
    assert np.array_equal(x.grad, [4, 4])


def test_shared_subexpression_and_slices():
    x = leaf(np.arange(6.0))
    y = x * x
    loss = T.tsum(y[:3]) + T.tsum(y[2:]) + T.tsum(y)
    T.backward(loss)
    weights = np.array([2, 2, 3, 2, 2, 2.0])
    assert np.array_equal(x.grad, 2 * x.data * weights)


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 4))
    W = Tensor(rng.normal(size=(4, 2)))

    def f(x):
        return T.tsum(T.tanh(T.matmul(x, W)))

    def g(x):
        return T.tsum(T.gelu(x) * x)

    grads = []
    for build in (f, g, lambda x: f(x) * 2.5 + g(x) * -0.75):
        x = leaf(x0)
        T.backward(build(x))
        grads.append(x.grad)
    assert np.allclose(grads[2], 2.5 * grads[0] - 0.75 * grads[1], atol=1e-10, rtol=0)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x, w = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
        out = T.log_softmax(T.matmul(T.gelu(x), w))
        T.backward(T.tsum(out * out))
        return out.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_lstm_cell_composite_gradcheck():
    rng = np.random.default_rng(8)
    x, h, c = leaf(rng.normal(size=3)), leaf(rng.normal(size=2)), leaf(rng.normal(size=2))
    W, U, b = leaf(rng.normal(size=(3, 8))), leaf(rng.normal(size=(2, 8))), leaf(rng.normal(size=8))

    def cell(x, h, c, W, U, b):
        z = T.add_bias(T.linear(x, W) + T.linear(h, U), b)
        return T.lstm_cell(z, c)

    assert T.gradcheck(cell, [x, h, c, W, U, b], rng=rng) < 1e-4


def test_lstm_cell_matches_gate_equations():
    rng = np.random.default_rng(9)
    z, c = rng.normal(size=(2, 12)), rng.normal(size=(2, 3))
    out = T.lstm_cell(Tensor(z), Tensor(c)).data
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o, g = sig(z[:, :3]), sig(z[:, 3:6]), sig(z[:, 6:9]), np.tanh(z[:, 9:])
    c_new = f * c + i * g
    assert np.allclose(out[:, 3:], c_new, atol=1e-14)
    assert np.allclose(out[:, :3], o * np.tanh(c_new), atol=1e-14)


def test_softmax_rows_sum_to_one_and_stable():
    x = Tensor([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])
    s = T.softmax(x).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-15)
    assert np.all(np.isfinite(T.log_softmax(x).data))


def test_dump_round_trip():
    x = Tensor(np.random.default_rng(10).normal(size=(2, 3, 4)))
    buf = io.StringIO()
    T.dump_tensor(x, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "2 3 4"
    buf.seek(0)
    assert np.array_equal(T.load_tensor(buf).data, x.data)


def test_zero_sized_dimension_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
