"""Engine tests: bitwise conv reproducibility, gradients against finite
differences, clamping rules, and tape mechanics."""

import numpy as np
import pytest

from conftest import fd_check, naive_conv
from tapgen import _kernels
from tapgen.autodiff import (BCE_EPS, SIGMOID_HI, SIGMOID_LO, ComputeGraph,
                             MomentumSgd, ParamTensor, Tensor, Tensor2D,
                             average, add, backward, binary_cross_entropy,
                             conv1d_dilated, fully_connected, relu, scale,
                             sgd_step, sigmoid, smooth_l1)
from tapgen.errors import GraphReplayError, NumericError, ShapeError


def test_conv_forward_bitwise_matches_naive_loops():
    rng = np.random.default_rng(7)
    cases = [(1, 1, 1, 1, 1), (3, 5, 3, 1, 20), (5, 4, 3, 2, 31),
             (2, 8, 3, 3, 256), (4, 3, 5, 2, 17), (2, 2, 7, 4, 9),
             (3, 3, 3, 40, 16), (1, 6, 1, 1, 5)]
    for c_in, c_out, kk, dilation, tt in cases:
        x = rng.normal(size=(c_in, tt))
        w = rng.normal(size=(c_out, c_in, kk))
        b = rng.normal(size=c_out)
        ref = naive_conv(x, w, b, dilation)
        got = _kernels.conv_forward(x, w, b, dilation)
        fallback = _kernels._conv_forward_numpy(x, w, b, dilation)
        assert got.tobytes() == ref.tobytes()
        assert fallback.tobytes() == ref.tobytes()


def test_conv_zero_weights_give_bias_rows():
    x = Tensor2D(np.random.default_rng(0).normal(size=(3, 12)))
    w = ParamTensor(np.zeros((4, 3, 3)))
    b = ParamTensor(np.array([1.0, -2.0, 0.0, 0.25]))
    out = conv1d_dilated(x, w, b, 2)
    assert np.array_equal(out.data, np.repeat(b.data[:, None], 12, axis=1))


def test_conv_identity_kernel_passes_input_through():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 10))
    w = np.zeros((3, 3, 3))
    for c in range(3):
        w[c, c, 1] = 1.0   # centre tap only
    out = conv1d_dilated(Tensor2D(x), ParamTensor(w),
                         ParamTensor(np.zeros(3)), 4)
    assert np.array_equal(out.data, x)


def test_conv_shape_and_argument_validation():
    x = Tensor2D(np.ones((3, 8)))
    w = ParamTensor(np.ones((2, 3, 3)))
    b = ParamTensor(np.zeros(2))
    with pytest.raises(ShapeError):
        conv1d_dilated(x, ParamTensor(np.ones((2, 4, 3))), b, 1)
    with pytest.raises(ShapeError):
        conv1d_dilated(x, ParamTensor(np.ones((2, 3, 4))), b, 1)  # even k
    with pytest.raises(ShapeError):
        conv1d_dilated(x, w, ParamTensor(np.zeros(3)), 1)
    with pytest.raises(ShapeError):
        conv1d_dilated(x, w, b, 0)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor2D(rng.normal(size=(3, 14)))
    w = ParamTensor(rng.normal(size=(2, 3, 3)) * 0.5)
    b = ParamTensor(rng.normal(size=2) * 0.5)
    targets = rng.uniform(0.2, 0.8, size=(2, 14))

    def make_loss():
        return binary_cross_entropy(
            sigmoid(conv1d_dilated(x, w, b, 2)), targets)

    assert fd_check(make_loss, [w, b]) < 1e-4


def test_conv_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x_param = ParamTensor(rng.normal(size=(2, 9)))
    w = ParamTensor(rng.normal(size=(3, 2, 3)))
    b = ParamTensor(rng.normal(size=3))
    targets = rng.uniform(0.2, 0.8, size=(3, 9))

    def make_loss():
        return binary_cross_entropy(
            sigmoid(conv1d_dilated(x_param, w, b, 3)), targets)

    assert fd_check(make_loss, [x_param]) < 1e-4


def test_relu_subgradient_zero_at_zero():
    x = ParamTensor(np.array([[-1.0, 0.0, 2.0]]))
    graph = ComputeGraph()
    with graph:
        out = relu(x)
        loss = smooth_l1(out, np.zeros((1, 3)))
    graph.backward(loss)
    assert np.array_equal(out.data, [[0.0, 0.0, 2.0]])
    assert x.grad[0, 0] == 0.0
    assert x.grad[0, 1] == 0.0   # exact zero input gets zero gradient
    assert x.grad[0, 2] != 0.0


def test_sigmoid_stable_and_clamped_at_extremes():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    out = sigmoid(x)
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)
    assert out.data[0] == SIGMOID_LO
    assert out.data[-1] == SIGMOID_HI
    assert out.data[2] == 0.5


def test_sigmoid_matches_reference_in_normal_range():
    v = np.linspace(-20, 20, 101)
    out = sigmoid(Tensor(v))
    ref = 1.0 / (1.0 + np.exp(-v))
    assert np.allclose(out.data, ref, rtol=0, atol=1e-15)


def test_bce_matches_hand_computed_value():
    # Two elements: -[y log p + (1-y) log(1-p)] summed.
    p = Tensor(np.array([0.8, 0.3]))
    y = np.array([1.0, 0.0])
    expected = -(np.log(0.8) + np.log(0.7))
    loss = binary_cross_entropy(p, y)
    assert abs(float(loss.data) - expected) < 1e-15


def test_bce_clamps_and_zeroes_gradient_outside():
    p = ParamTensor(np.array([0.0, 1.0, 0.5]))
    y = np.array([1.0, 0.0, 1.0])
    graph = ComputeGraph()
    with graph:
        loss = binary_cross_entropy(p, y)
    graph.backward(loss)
    expected = -(np.log(BCE_EPS) + np.log1p(-(1.0 - BCE_EPS)) + np.log(0.5))
    assert np.isfinite(float(loss.data))
    assert abs(float(loss.data) - expected) < 1e-9
    assert p.grad[0] == 0.0 and p.grad[1] == 0.0
    assert p.grad[2] == pytest.approx(-2.0)   # d/dp of -log(p) at 0.5


def test_smooth_l1_piecewise_values():
    pred = Tensor(np.array([0.5, 2.0, -3.0, 1.0]))
    target = np.zeros(4)
    # 0.5*0.25, 2-0.5, 3-0.5, exactly at the knee: |1| - 0.5 = 0.5
    expected = 0.125 + 1.5 + 2.5 + 0.5
    assert float(smooth_l1(pred, target).data) == pytest.approx(expected,
                                                                abs=1e-15)


def test_smooth_l1_gradient_clips_at_unit_error():
    pred = ParamTensor(np.array([0.5, 2.0, -3.0]))
    graph = ComputeGraph()
    with graph:
        loss = smooth_l1(pred, np.zeros(3))
    graph.backward(loss)
    assert np.array_equal(pred.grad, [0.5, 1.0, -1.0])


def test_elementwise_ops_gradients():
    rng = np.random.default_rng(5)
    a = ParamTensor(rng.normal(size=(2, 6)))
    b = ParamTensor(rng.normal(size=(2, 6)))
    c = ParamTensor(rng.normal(size=(2, 6)))
    targets = rng.uniform(0.2, 0.8, size=(2, 6))

    def make_loss():
        mixed = average([relu(a), sigmoid(b), scale(c, -0.7)])
        return binary_cross_entropy(sigmoid(add(mixed, a)), targets)

    assert fd_check(make_loss, [a, b, c]) < 1e-4


def test_average_uses_list_order_reduction():
    rng = np.random.default_rng(6)
    tensors = [Tensor(rng.normal(size=(3, 4))) for _ in range(4)]
    out = average(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc = acc + t.data
    assert out.data.tobytes() == (acc * 0.25).tobytes()


def test_fully_connected_vector_and_batch_agree():
    rng = np.random.default_rng(8)
    w = ParamTensor(rng.normal(size=(5, 7)))
    b = ParamTensor(rng.normal(size=5))
    xs = rng.normal(size=(4, 7))
    batch = fully_connected(Tensor(xs), w, b)
    for i in range(4):
        single = fully_connected(Tensor(xs[i]), w, b)
        assert np.allclose(batch.data[i], single.data, atol=1e-12, rtol=0)


def test_fully_connected_gradients_vector_and_batch():
    rng = np.random.default_rng(9)
    w = ParamTensor(rng.normal(size=(3, 5)) * 0.5)
    b = ParamTensor(rng.normal(size=3) * 0.5)
    xv = ParamTensor(rng.normal(size=5))
    xb = ParamTensor(rng.normal(size=(4, 5)))

    def vector_loss():
        return smooth_l1(sigmoid(fully_connected(xv, w, b)),
                         np.full(3, 0.4))

    def batch_loss():
        return smooth_l1(sigmoid(fully_connected(xb, w, b)),
                         np.full((4, 3), 0.6))

    assert fd_check(vector_loss, [w, b, xv]) < 1e-4
    assert fd_check(batch_loss, [w, b, xb]) < 1e-4


def test_backward_reverse_order_and_accumulation():
    # One parameter used twice: gradients from both uses must add.
    x = ParamTensor(np.array([[1.0, 2.0]]))
    graph = ComputeGraph()
    with graph:
        doubled = add(x, x)
        loss = smooth_l1(scale(doubled, 10.0), np.zeros((1, 2)))
    graph.backward(loss)
    # d/dx of huber(20x) with |20x| > 1: sign * 10 * 2 = 20 per use... the
    # clip makes each element's outer grad 1.0, scaled by 10, times 2 uses.
    assert np.array_equal(x.grad, [[20.0, 20.0]])


def test_param_gradients_persist_across_graphs():
    x = ParamTensor(np.array([3.0]))
    for _ in range(2):
        graph = ComputeGraph()
        with graph:
            loss = smooth_l1(x, np.zeros(1))
        graph.backward(loss)
    assert np.array_equal(x.grad, [2.0])   # two accumulated unit slopes
    x.zero_gradients()
    assert np.array_equal(x.grad, [0.0])


def test_backward_twice_raises():
    x = ParamTensor(np.array([1.0]))
    graph = ComputeGraph()
    with graph:
        loss = smooth_l1(x, np.zeros(1))
    backward(graph, loss)
    with pytest.raises(GraphReplayError):
        graph.backward(loss)


def test_backward_requires_scalar():
    x = ParamTensor(np.ones((2, 2)))
    graph = ComputeGraph()
    with graph:
        out = relu(x)
    with pytest.raises(ShapeError):
        graph.backward(out)


def test_non_finite_forward_raises_numeric_error():
    x = Tensor2D(np.full((1, 4), 1e308))
    w = ParamTensor(np.full((1, 1, 3), 1e9))
    b = ParamTensor(np.zeros(1))
    with pytest.raises(NumericError):
        conv1d_dilated(x, w, b, 1)
    with pytest.raises(NumericError):
        Tensor2D(np.array([[np.nan, 1.0]]))


def test_tensor2d_validates_rank():
    with pytest.raises(ShapeError):
        Tensor2D(np.zeros(5))
    with pytest.raises(ShapeError):
        Tensor2D(np.zeros((0, 4)))


def test_sgd_step_updates_and_zeroes():
    p = ParamTensor(np.array([1.0, 2.0]))
    p.grad[:] = [0.5, -1.0]
    sgd_step([p], 0.1)
    assert np.allclose(p.data, [0.95, 2.1], atol=1e-15)
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_momentum_sgd_accumulates_velocity():
    p = ParamTensor(np.array([0.0]))
    opt = MomentumSgd([p], momentum=0.5)
    for _ in range(2):
        p.grad[:] = [1.0]
        opt.step(1.0)
    # v1 = 1 -> x = -1; v2 = 0.5 + 1 -> x = -2.5
    assert np.allclose(p.data, [-2.5], atol=1e-15)


def test_forward_backward_bitwise_deterministic():
    rng = np.random.default_rng(11)
    x = Tensor2D(rng.normal(size=(4, 20)))
    targets = rng.uniform(0.1, 0.9, size=(3, 20))

    def run():
        w = ParamTensor(np.linspace(-0.5, 0.5, 36).reshape(3, 4, 3))
        b = ParamTensor(np.linspace(-0.1, 0.1, 3))
        graph = ComputeGraph()
        with graph:
            loss = binary_cross_entropy(
                sigmoid(conv1d_dilated(x, w, b, 2)), targets)
        graph.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_ops_do_not_record_without_graph():
    x = ParamTensor(np.ones((1, 3)))
    out = relu(x)
    assert out._backward is None
