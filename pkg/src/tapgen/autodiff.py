"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: values are numpy arrays wrapped in
graph nodes, operations record a backward closure onto the active
:class:`ComputeGraph`, and ``backward`` replays those closures in exact
reverse execution order.  Everything is float64 and deterministic; the
same inputs produce bitwise identical outputs and gradients on every
run.

Typical use::

    graph = ComputeGraph()
    with graph:
        out = sigmoid(conv1d_dilated(x, weight, bias, dilation=2))
        loss = binary_cross_entropy(out, targets)
    graph.backward(loss)
    sgd_step([weight, bias], learning_rate=1e-3)

Operations executed with no active graph still compute results but
record nothing, which is the cheap path for inference.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import GraphReplayError, NumericError, ShapeError

# Sigmoid outputs are clamped into the open interval (0, 1) so that
# downstream log-likelihoods stay finite in float64.
SIGMOID_LO = 1e-15
SIGMOID_HI = 1.0 - 1e-15

# Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] inside the loss.
BCE_EPS = 1e-12


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in a recorded computation.

    Holds a float64 array, the gradient filled in during backward, and
    the closure that propagates the gradient to the node's parents.
    """

    __slots__ = ("data", "grad", "_backward")

    def __init__(self, data):
        self.data = _as_float_array(data)
        self.grad: Optional[np.ndarray] = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return "%s(shape=%r)" % (type(self).__name__, self.data.shape)


class Tensor2D(Tensor):
    """A (channels, time) activation.  Values must be finite."""

    def __init__(self, data):
        super().__init__(data)
        if self.data.ndim != 2:
            raise ShapeError(
                "Tensor2D requires a (channels, time) array, got shape %r"
                % (self.data.shape,))
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError("Tensor2D dimensions must be at least 1")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("Tensor2D contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def time(self) -> int:
        return self.data.shape[1]


class ParamTensor(Tensor):
    """A trainable leaf.  Its gradient buffer persists across backward
    passes and accumulates until explicitly zeroed."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_gradients(self):
        self.grad[...] = 0.0


class ComputeGraph:
    """Tape of recorded operations for one forward pass.

    A graph is single use: after ``backward`` it refuses to replay, since
    the intermediate activations it references belong to a forward pass
    whose gradients have already been consumed.
    """

    _active: list["ComputeGraph"] = []

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._spent = False

    def __enter__(self):
        ComputeGraph._active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = ComputeGraph._active.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("ComputeGraph contexts exited out of order")
        return False

    @classmethod
    def current(cls) -> Optional["ComputeGraph"]:
        return cls._active[-1] if cls._active else None

    def record(self, node: Tensor):
        self._nodes.append(node)

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(node) to every recorded node and leaf.

        ``loss`` must be a scalar (size-1) node recorded on this graph.
        Parent gradients accumulate additively in a fixed order, so
        repeated runs are bitwise identical.
        """
        if self._spent:
            raise GraphReplayError(
                "backward() already ran on this graph; rebuild the forward "
                "pass before differentiating again")
        if loss.data.size != 1:
            raise ShapeError(
                "backward requires a scalar loss, got shape %r" % (loss.shape,))
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(graph: ComputeGraph, loss: Tensor):
    """Functional alias for :meth:`ComputeGraph.backward`."""
    graph.backward(loss)


def _accumulate(node: Tensor, grad: np.ndarray):
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += grad


def _finish(out: Tensor, backward_fn, opname: str) -> Tensor:
    if not np.all(np.isfinite(out.data)):
        raise NumericError("%s produced non-finite values" % opname)
    graph = ComputeGraph.current()
    if graph is not None:
        out._backward = backward_fn
        graph.record(out)
    return out


def _plain(data) -> Tensor:
    # Internal constructor that skips Tensor2D validation for outputs
    # whose shape is known by construction.
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._backward = None
    return t


def _plain2d(data) -> Tensor2D:
    t = Tensor2D.__new__(Tensor2D)
    t.data = data
    t.grad = None
    t._backward = None
    return t


def conv1d_dilated(x: Tensor, weight: ParamTensor, bias: ParamTensor,
                   dilation: int) -> Tensor2D:
    """Length-preserving dilated 1-D convolution with zero padding.

    ``x`` is (c_in, t), ``weight`` is (c_out, c_in, k) with odd k and
    ``bias`` is (c_out,).  The forward pass follows the fixed summation
    order documented in :mod:`tapgen._kernels` and is bitwise
    reproducible against a nested-loop reference.
    """
    if x.data.ndim != 2:
        raise ShapeError("conv1d_dilated input must be 2-D, got %r"
                         % (x.data.shape,))
    if weight.data.ndim != 3:
        raise ShapeError("conv1d_dilated weight must be 3-D, got %r"
                         % (weight.data.shape,))
    c_out, c_in, kk = weight.data.shape
    if c_in != x.data.shape[0]:
        raise ShapeError(
            "weight expects %d input channels, tensor has %d"
            % (c_in, x.data.shape[0]))
    if kk % 2 != 1:
        raise ShapeError("kernel size must be odd, got %d" % kk)
    if bias.data.shape != (c_out,):
        raise ShapeError("bias shape %r does not match %d output channels"
                         % (bias.data.shape, c_out))
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ShapeError("dilation must be a positive integer, got %r"
                         % (dilation,))

    xd = x.data
    out = _plain2d(_kernels.conv_forward(xd, weight.data, bias.data,
                                         int(dilation)))

    def backward_fn(grad):
        dx, dw, db = _kernels.conv_backward(xd, weight.data, grad,
                                            int(dilation))
        _accumulate(x, dx)
        _accumulate(weight, dw)
        _accumulate(bias, db)

    return _finish(out, backward_fn, "conv1d_dilated")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x).  The subgradient at 0 is taken as 0."""
    data = np.maximum(x.data, 0.0)
    out = _plain2d(data) if isinstance(x, Tensor2D) else _plain(data)

    def backward_fn(grad):
        _accumulate(x, grad * (x.data > 0.0))

    return _finish(out, backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, clamped into (0, 1).

    Large magnitudes are handled piecewise so neither branch
    exponentiates a large positive number, then the output is clamped to
    [SIGMOID_LO, SIGMOID_HI] so log(p) and log(1 - p) stay finite.
    """
    xd = x.data
    pos = xd >= 0.0
    z = np.exp(np.where(pos, -xd, xd))
    data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    np.clip(data, SIGMOID_LO, SIGMOID_HI, out=data)
    out = _plain2d(data) if isinstance(x, Tensor2D) else _plain(data)

    def backward_fn(grad):
        _accumulate(x, grad * (data * (1.0 - data)))

    return _finish(out, backward_fn, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError("add requires matching shapes, got %r and %r"
                         % (a.data.shape, b.data.shape))
    data = a.data + b.data
    out = _plain2d(data) if isinstance(a, Tensor2D) else _plain(data)

    def backward_fn(grad):
        _accumulate(a, grad)
        _accumulate(b, grad)

    return _finish(out, backward_fn, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every element by a python scalar."""
    factor = float(factor)
    data = x.data * factor
    out = _plain2d(data) if isinstance(x, Tensor2D) else _plain(data)

    def backward_fn(grad):
        _accumulate(x, grad * factor)

    return _finish(out, backward_fn, "scale")


def average(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors.

    Summation runs in list order, so the reduction order (and therefore
    the exact floating point result) is fixed by the caller.
    """
    if len(inputs) == 0:
        raise ShapeError("average requires at least one input")
    shape = inputs[0].data.shape
    for t in inputs[1:]:
        if t.data.shape != shape:
            raise ShapeError("average inputs must share one shape; got %r and %r"
                             % (shape, t.data.shape))
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    inv = 1.0 / len(inputs)
    data = acc * inv
    out = _plain2d(data) if isinstance(inputs[0], Tensor2D) else _plain(data)
    held = list(inputs)

    def backward_fn(grad):
        share = grad * inv
        for t in held:
            _accumulate(t, share)

    return _finish(out, backward_fn, "average")


def fully_connected(x: Tensor, weight: ParamTensor,
                    bias: ParamTensor) -> Tensor:
    """Affine map w @ x + b.

    ``x`` may be a single vector of shape (n,) or a batch of rows
    (batch, n); ``weight`` is (m, n) and ``bias`` is (m,).
    """
    if weight.data.ndim != 2:
        raise ShapeError("fully_connected weight must be 2-D, got %r"
                         % (weight.data.shape,))
    m, n = weight.data.shape
    if bias.data.shape != (m,):
        raise ShapeError("bias shape %r does not match %d outputs"
                         % (bias.data.shape, m))
    xd = x.data
    if xd.ndim == 1:
        if xd.shape[0] != n:
            raise ShapeError("input length %d does not match weight width %d"
                             % (xd.shape[0], n))
        data = weight.data @ xd + bias.data
    elif xd.ndim == 2:
        if xd.shape[1] != n:
            raise ShapeError("input width %d does not match weight width %d"
                             % (xd.shape[1], n))
        data = xd @ weight.data.T + bias.data
    else:
        raise ShapeError("fully_connected input must be 1-D or 2-D, got %r"
                         % (xd.shape,))
    out = _plain(data)

    def backward_fn(grad):
        if xd.ndim == 1:
            _accumulate(weight, np.outer(grad, xd))
            _accumulate(bias, grad)
            _accumulate(x, weight.data.T @ grad)
        else:
            _accumulate(weight, grad.T @ xd)
            _accumulate(bias, grad.sum(axis=0))
            _accumulate(x, grad @ weight.data)

    return _finish(out, backward_fn, "fully_connected")


def binary_cross_entropy(p: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of Bernoulli targets.

    ``targets`` is a plain array of 0/1 values shaped like ``p``.  The
    probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs;
    elements sitting outside the clamp receive zero gradient.  Returns a
    scalar node holding the sum over all elements (the minimised form of
    the log-likelihood, hence the leading minus sign).
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ShapeError("targets shape %r does not match predictions %r"
                         % (y.shape, p.data.shape))
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    value = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    out = _plain(np.asarray(value))
    inside = (p.data > BCE_EPS) & (p.data < 1.0 - BCE_EPS)

    def backward_fn(grad):
        g = float(grad)
        dp = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)
        _accumulate(p, dp * g)

    return _finish(out, backward_fn, "binary_cross_entropy")


def smooth_l1(pred: Tensor, targets) -> Tensor:
    """Summed Huber penalty with unit transition point.

    Per element: 0.5 * d**2 for |d| < 1, |d| - 0.5 otherwise, where
    d = pred - target.  Returns the scalar sum over all elements.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != pred.data.shape:
        raise ShapeError("targets shape %r does not match predictions %r"
                         % (y.shape, pred.data.shape))
    d = pred.data - y
    absd = np.abs(d)
    per = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    out = _plain(np.asarray(np.sum(per)))

    def backward_fn(grad):
        _accumulate(pred, np.clip(d, -1.0, 1.0) * float(grad))

    return _finish(out, backward_fn, "smooth_l1")


def sgd_step(params: Sequence[ParamTensor], learning_rate: float):
    """In-place gradient descent update, then zero the gradients.

    Parameters update in list order, so the call is deterministic for a
    fixed parameter ordering.
    """
    lr = float(learning_rate)
    for p in params:
        p.data -= lr * p.grad
        p.zero_gradients()


class MomentumSgd:
    """SGD with classical momentum.  Velocities are owned here so the
    parameter objects stay plain."""

    def __init__(self, params: Sequence[ParamTensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = float(momentum)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, learning_rate: float):
        lr = float(learning_rate)
        for p, v in zip(self.params, self.velocities):
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.zero_gradients()
