"""Shared test helpers: independent reference implementations and the
finite-difference gradient checker.

The references here are deliberately written as plain loops, separate
from the package code, so the two can only agree by computing the same
thing.
"""

import numpy as np
import pytest

from tapgen.autodiff import ComputeGraph


def naive_conv(x, w, b, dilation):
    """Quadruple-loop dilated convolution with the documented summation
    order: bias first, then per input channel a left-to-right tap sum."""
    c_in, tt = x.shape
    c_out, _, kk = w.shape
    half = kk // 2
    out = np.empty((c_out, tt))
    for c in range(c_out):
        for t in range(tt):
            acc = b[c]
            for i in range(c_in):
                term = 0.0
                for k in range(kk):
                    src = t + (k - half) * dilation
                    if 0 <= src < tt:
                        term += w[c, i, k] * x[i, src]
                acc += term
            out[c, t] = acc
    return out


def fd_check(make_loss, params, h=1e-5, rel_floor=1e-6):
    """Central finite differences against recorded gradients.

    ``make_loss`` rebuilds the scalar loss from scratch; it is called
    once under a fresh graph for the analytic gradients and twice per
    parameter element for the numeric ones.  Returns the worst relative
    error over every element of every parameter.

    Piecewise-linear ops (relu, the Huber transition) make plain central
    differences unreliable when a probe straddles a kink: the numeric
    slope blends the two sides.  Such an element is re-probed at h/4 and
    h/16; a kink artefact shrinks towards zero with the step while a
    genuine gradient bug stays put, so the element's error is the best
    of the three probes.
    """
    graph = ComputeGraph()
    with graph:
        loss = make_loss()
    graph.backward(loss)

    def probe(flat, j, step):
        orig = flat[j]
        flat[j] = orig + step
        up = float(make_loss().data)
        flat[j] = orig - step
        down = float(make_loss().data)
        flat[j] = orig
        return (up - down) / (2.0 * step)

    def rel_err(numeric, analytic):
        return abs(numeric - analytic) / max(abs(numeric), abs(analytic),
                                             rel_floor)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for j in range(flat.size):
            err = rel_err(probe(flat, j, h), grad[j])
            if err > 1e-4:
                for smaller in (h / 4.0, h / 16.0):
                    err = min(err, rel_err(probe(flat, j, smaller), grad[j]))
                    if err <= 1e-4:
                        break
            worst = max(worst, err)
        p.zero_gradients()
    return worst


def iou_reference(a, b):
    """Straight textbook IoU for two (start, end) intervals."""
    lo = max(a[0], b[0])
    hi = min(a[1], b[1])
    inter = max(0.0, hi - lo)
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


@pytest.fixture(scope="session")
def warm_kernels():
    """Force numba compilation before any timed assertions."""
    from tapgen import _kernels
    x = np.zeros((2, 8))
    w3 = np.zeros((2, 2, 3))
    w5 = np.zeros((2, 2, 5))
    b = np.zeros(2)
    _kernels.conv_forward(x, w3, b, 1)
    _kernels.conv_forward(x, w5, b, 1)
    return True
