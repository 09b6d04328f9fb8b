import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from camforge import tensor as T
from camforge.tensor import Tensor, finite_diff_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = T.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_grad_is_ones_times_bT(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 2))
    T.sum_axis(T.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.T, atol=1e-14)
    assert finite_diff_check(lambda t: T.sum_axis(T.matmul(t, b)), a.data) < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_matmul_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(2, 9, size=3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(T.matmul(a, b).data, oracles.matmul(a, b), atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(T.softmax_rows([[0.0, math.log(3)]]).data, [[0.25, 0.75]], atol=1e-15)
    np.testing.assert_array_equal(T.softmax_rows([[1000.0, 1000.0]]).data, [[0.5, 0.5]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_rows(x).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_gap_examples():
    assert T.gap(np.full((1, 3, 3), 2.0)).data[0] == 2.0
    assert T.gap(np.array([[[1.0, 2.0], [3.0, 4.0]]])).data[0] == 2.5
    x = T.parameter(np.zeros((2, 3, 4)))
    T.sum_axis(T.mul(T.gap(x), [1.0, 5.0])).backward()
    np.testing.assert_allclose(x.grad[0], 1 / 12)
    np.testing.assert_allclose(x.grad[1], 5 / 12)


def test_conv_identity_kernel():
    x = np.arange(18.0).reshape(2, 3, 3)
    w = np.eye(2).reshape(2, 2, 1, 1)
    np.testing.assert_array_equal(T.conv2d(x, w).data, x)


def test_conv_ones_kernel_stencil_count():
    out = T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), pad=1).data[0]
    assert out[1, 1] == 9
    assert out[0, 0] == 4
    assert out[0, 1] == 6


def test_conv_stride_output_size():
    out = T.conv2d(np.ones((2, 3, 16, 16)), np.ones((5, 3, 3, 3)), stride=2, pad=1)
    assert out.shape == (2, 5, 8, 8)


def test_relu_examples():
    np.testing.assert_array_equal(T.relu([-2.0, 3.0]).data, [0.0, 3.0])


def test_reshape_preserves_bytes(rng):
    x = Tensor(rng.normal(size=(3, 4, 5)))
    assert T.reshape(x, (12, 5)).data.tobytes() == x.data.tobytes()


def test_finite_diff_sum_of_squares():
    f = lambda t: T.sum_axis(T.mul(t, t))
    x = T.parameter([1.0, 2.0, 3.0])
    f(x).backward()
    np.testing.assert_allclose(x.grad, [2, 4, 6])
    assert finite_diff_check(f, [1.0, 2.0, 3.0], 1e-5) < 1e-8


def test_finite_diff_constant_function():
    assert finite_diff_check(lambda t: Tensor(7.0), [1.0, 2.0]) == 0.0


def test_finite_diff_rejects_vector_output():
    with pytest.raises(T.ShapeError):
        finite_diff_check(lambda t: T.scale(t, 2.0), [1.0, 2.0])


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: T.sum_axis(t), [1.0], eps=0.0)


def _weighted(out_shape, rng):
    w = rng.normal(size=out_shape)
    return lambda y: T.sum_axis(T.mul(y, w))


OPS = {
    "add": (lambda x, c: T.add(x, c["b"]), lambda r: {"b": r.normal(size=(4,))}, (3, 4)),
    "sub": (lambda x, c: T.sub(c["b"], x), lambda r: {"b": r.normal(size=(3, 1))}, (3, 4)),
    "mul": (lambda x, c: T.mul(x, c["b"]), lambda r: {"b": r.normal(size=(3, 4))}, (3, 4)),
    "scale": (lambda x, c: T.scale(x, -1.7), lambda r: {}, (3, 4)),
    "divide": (lambda x, c: T.divide(x, 3.0), lambda r: {}, (3, 4)),
    "relu": (lambda x, c: T.relu(x), lambda r: {}, (3, 4)),
    "softplus": (lambda x, c: T.softplus(x), lambda r: {}, (3, 4)),
    "matmul_left": (lambda x, c: T.matmul(x, c["b"]), lambda r: {"b": r.normal(size=(4, 2))}, (3, 4)),
    "matmul_right": (lambda x, c: T.matmul(c["b"], x), lambda r: {"b": r.normal(size=(2, 3))}, (3, 4)),
    "matmul_batched": (lambda x, c: T.matmul(x, c["b"]), lambda r: {"b": r.normal(size=(4, 2))}, (2, 3, 4)),
    "softmax": (lambda x, c: T.softmax_rows(x), lambda r: {}, (3, 4)),
    "layer_norm": (lambda x, c: T.layer_norm(x), lambda r: {}, (3, 4)),
    "reshape": (lambda x, c: T.reshape(x, (4, 3)), lambda r: {}, (3, 4)),
    "transpose": (lambda x, c: T.transpose(x, (2, 0, 1)), lambda r: {}, (2, 3, 4)),
    "getitem": (lambda x, c: x[..., 1:, :2], lambda r: {}, (2, 3, 4)),
    "concat": (lambda x, c: T.concat([x, c["b"], x], axis=1), lambda r: {"b": r.normal(size=(3, 2))}, (3, 4)),
    "stack": (lambda x, c: T.stack([x, T.scale(x, 2.0)], axis=1), lambda r: {}, (3, 4)),
    "sum": (lambda x, c: T.sum_axis(x, axis=1), lambda r: {}, (3, 4)),
    "mean": (lambda x, c: T.mean_axis(x, axis=(0, 2), keepdims=True), lambda r: {}, (2, 3, 4)),
    "gap": (lambda x, c: T.gap(x), lambda r: {}, (2, 3, 4)),
    "conv2d_input": (lambda x, c: T.conv2d(x, c["w"], c["b"], stride=2, pad=1),
                     lambda r: {"w": r.normal(size=(3, 2, 3, 3)), "b": r.normal(size=(3,))}, (2, 2, 6, 6)),
    "conv2d_kernel": (lambda x, c: T.conv2d(c["x"], x, stride=1, pad=1),
                      lambda r: {"x": r.normal(size=(2, 2, 5, 5))}, (3, 2, 3, 3)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_finite_difference(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    op, make_ctx, shape = OPS[name]
    ctx = make_ctx(rng)
    x = rng.normal(size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    out_shape = op(Tensor(x), ctx).shape
    head = _weighted(out_shape, rng)
    assert finite_diff_check(lambda t: head(op(t, ctx)), x, 1e-5) < 1e-6


def test_backward_twice_rejected_until_reset():
    x = T.parameter([1.0, 2.0])
    y = T.sum_axis(T.mul(x, x))
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()
    y.reset_grad()
    assert x.grad is None
    y.backward()
    np.testing.assert_allclose(x.grad, [2, 4])


def test_leaf_gradients_accumulate_across_graphs():
    x = T.parameter([1.0])
    T.sum_axis(T.scale(x, 2.0)).backward()
    T.sum_axis(T.scale(x, 3.0)).backward()
    assert x.grad[0] == 5.0


def test_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_grad_records_nothing():
    x = T.parameter([1.0])
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad and y.op is None


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple), elements=finite))
def test_snapshot_round_trip_bit_exact(x):
    buf = T.to_bytes(x)
    assert buf[:4] == b"CFTN" and buf[4] == 1
    back = T.from_bytes(buf)
    assert back.shape == x.shape
    assert back.data.tobytes() == np.asarray(x, dtype="<f8").tobytes()


def test_snapshot_layout():
    buf = T.to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:9] == b"CFTN\x01\x02\x00\x00\x00"
    assert buf[9:17] == b"\x01\x00\x00\x00\x03\x00\x00\x00"
    assert np.frombuffer(buf[17:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_truncated_snapshot_names_file(tmp_path):
    p = tmp_path / "t.cftn"
    T.save_tensor(p, np.ones((2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(T.SnapshotError, match="t.cftn"):
        T.load_tensor(p)
