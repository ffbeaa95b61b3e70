import numpy as np
import pytest

from liboost import tensor as ts
from liboost import zoo

# independently computed with 50-digit arithmetic
LN2 = 0.6931471805599453
CE_10_M10 = 2.0611536203143807e-09
CE_123_Y2 = 0.4076059644443803


def test_relu_values():
    assert np.array_equal(ts.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv2d_identity_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    assert np.array_equal(ts.conv2d(x, w, stride=1, pad=1).data, x)


def test_maxpool_block():
    out = ts.maxpool2x2(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert out.data.reshape(-1).tolist() == [4.0]


def test_maxpool_odd_trailing_dropped():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    out = ts.maxpool2x2(x)
    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0, 1, 1] == x[0, 0, 3, 3]


def test_cross_entropy_uniform_logits():
    assert ts.cross_entropy_loss(np.array([[0.0, 0.0]]), [0]).item() == pytest.approx(LN2, rel=1e-12)


def test_cross_entropy_dominant_logit():
    loss = ts.cross_entropy_loss(np.array([[10.0, -10.0]], dtype=np.float64), [0]).item()
    assert loss == pytest.approx(CE_10_M10, abs=1e-15)


def test_cross_entropy_three_way():
    loss = ts.cross_entropy_loss(np.array([[1.0, 2.0, 3.0]], dtype=np.float64), [2]).item()
    assert loss == pytest.approx(CE_123_Y2, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ts.cross_entropy_loss(np.array([[0.0, 0.0]]), [2])


def test_cross_entropy_needs_two_classes():
    with pytest.raises(ts.ShapeMismatchError):
        ts.cross_entropy_loss(np.array([[1.0]]), [0])


def test_backward_sum_gives_ones():
    t = ts.Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    ts.backward(ts.reduce_sum(t))
    assert np.array_equal(t.grad, np.ones((3, 4)))


def test_backward_quadratic():
    t = ts.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    ts.backward(ts.scale(ts.reduce_sum(ts.mul(t, t)), 0.5))
    assert np.allclose(t.grad, [3.0, -2.0])
    assert t.grad.shape == t.data.shape


def test_backward_requires_history():
    with pytest.raises(ValueError, match="no recorded history"):
        ts.backward(ts.Tensor([1.0]))


def test_backward_consumes_tape():
    t = ts.Tensor([1.0, 2.0], requires_grad=True)
    loss = ts.reduce_sum(ts.mul(t, t))
    ts.backward(loss)
    with pytest.raises(ValueError, match="no recorded history"):
        ts.backward(loss)


def test_backward_rejects_non_scalar():
    t = ts.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ts.ShapeMismatchError):
        ts.backward(ts.mul(t, t))


def test_record_topological_and_single_visit():
    t = ts.Tensor(np.random.default_rng(1).random((2, 3)), requires_grad=True)
    a = ts.mul(t, t)
    b = ts.add(a, a)  # diamond: a feeds b twice
    record = ts.backward(ts.reduce_sum(b))
    out_ids = [node[2] for node in record.nodes]
    assert len(out_ids) == len(set(out_ids))  # each node exactly once
    seen = set()
    for op, input_ids, output_id in record.nodes:
        for iid in input_ids:
            assert iid not in out_ids or iid in seen  # producers come first
        seen.add(output_id)


def test_diamond_gradient_accumulates():
    t = ts.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = ts.mul(t, t)
    ts.backward(ts.reduce_sum(ts.add(a, a)))
    assert np.allclose(t.grad, 4.0 * t.data)


def test_relu_subgradient_zero_at_zero():
    t = ts.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ts.backward(ts.reduce_sum(ts.relu(t)))
    assert np.array_equal(t.grad, [0.0, 0.0, 1.0])


def test_shape_error_names_both_shapes():
    with pytest.raises(ts.ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        ts.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(ts.NonFiniteError):
        ts.Tensor(np.array([[np.inf, 0.0]]))
    t = ts.Tensor(np.array([[1.0, 0.0]]))
    t.data[0, 0] = np.nan  # corrupt after construction
    with pytest.raises(ts.NonFiniteError):
        ts.relu(t)


def test_add_bias_shapes():
    x = np.zeros((2, 3), dtype=np.float32)
    assert ts.add_bias(x, np.array([1.0, 2.0, 3.0], dtype=np.float32)).shape == (2, 3)
    x4 = np.zeros((2, 3, 4, 4), dtype=np.float32)
    assert ts.add_bias(x4, np.zeros(3, dtype=np.float32)).shape == (2, 3, 4, 4)
    with pytest.raises(ts.ShapeMismatchError):
        ts.add_bias(x, np.zeros(4, dtype=np.float32))


def test_checkgrad_quadratic_tight():
    err = ts.check_gradient(lambda t: ts.reduce_sum(ts.mul(t, t)), np.array([1.0, 2.0, 3.0]))
    assert err < 1e-8


def test_checkgrad_constant_function():
    err = ts.check_gradient(lambda t: ts.Tensor(np.zeros(())), np.array([1.0, 2.0]))
    assert err == 0.0


def test_checkgrad_rejects_bad_h():
    with pytest.raises(ValueError):
        ts.check_gradient(lambda t: ts.reduce_sum(t), np.array([1.0]), h=0.0)


def test_checkgrad_small_mlp():
    model = zoo.build(zoo.ModelSpec("mlp-2x256", (1, 8, 8), 3), seed=5, dtype=np.float64)
    point = np.random.default_rng(7).random((1, 1, 8, 8))
    err = ts.check_gradient(
        lambda t: ts.cross_entropy_loss(model.forward(t), [1]), point, h=1e-5
    )
    assert err < 1e-5


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv2d_gradcheck(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.random((2, 2, 8, 9))
    w = ts.Tensor(rng.random((3, 2, 3, 3)))

    def f(t):
        out = ts.conv2d(t, w, stride, pad)
        return ts.reduce_sum(ts.mul(out, out))

    assert ts.check_gradient(f, x, h=1e-6) < 1e-6


def test_conv2d_weight_gradcheck():
    rng = np.random.default_rng(3)
    x = ts.Tensor(rng.random((2, 2, 6, 6)))
    w0 = rng.random((4, 2, 3, 3))

    def f(t):
        out = ts.conv2d(x, t, 1, 1)
        return ts.reduce_sum(ts.mul(out, out))

    assert ts.check_gradient(f, w0, h=1e-6) < 1e-6


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_adjoint_identity(stride, pad):
    """<conv(x, w), y> == <x, conv_input_grad(y, w)> up to rounding."""
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.random((1, 2, 8, 8))
        w = rng.random((3, 2, 3, 3))
        out = ts.conv2d(x, w, stride, pad)
        y = rng.random(out.shape)
        lhs = float(np.sum(out.data * y))
        rhs = float(np.sum(x * ts.conv2d_input_grad(y, w, stride, pad, (8, 8))))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_gather_pixels_adjoint():
    rng = np.random.default_rng(13)
    x = rng.random((1, 2, 6, 6))
    rows = rng.integers(0, 6, (6, 6))
    cols = rng.integers(0, 6, (6, 6))
    valid = rng.random((6, 6)) > 0.2
    t = ts.Tensor(x, requires_grad=True)
    out = ts.gather_pixels(t, rows, cols, valid)
    g = rng.random(out.shape)
    ts.backward(ts.reduce_sum(ts.mul(out, ts.Tensor(g))))
    lhs = float(np.sum(out.data * g))
    rhs = float(np.sum(x * t.grad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_primitive_gradients_random_instances():
    """A conv-pool-relu-linear-CE pipeline matches central differences (64-bit)."""
    rng = np.random.default_rng(99)
    for _ in range(20):
        shape = (1, int(rng.integers(1, 3)), int(rng.integers(5, 9)), int(rng.integers(5, 9)))
        w = ts.Tensor(rng.standard_normal((2, shape[1], 3, 3)))
        b = ts.Tensor(rng.standard_normal(2))
        fc = ts.Tensor(rng.standard_normal((2 * (shape[2] // 2) * (shape[3] // 2), 3)))
        label = int(rng.integers(3))

        def f(t, w=w, b=b, fc=fc, label=label):
            h = ts.maxpool2x2(ts.relu(ts.add_bias(ts.conv2d(t, w, 1, 1), b)))
            return ts.cross_entropy_loss(ts.matmul(ts.flatten(h), fc), [label])

        assert ts.check_gradient(f, rng.random(shape), h=1e-5) < 1e-5
