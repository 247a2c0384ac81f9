"""Low-level convolution kernels.

The forward pass of the dilated convolution is required to be bitwise
reproducible against a straightforward nested-loop reference, so every
implementation here commits to one summation order:

    out[c, t] = bias[c]
    for i in range(c_in):                   # input channels, ascending
        term = 0.0
        for k in range(kernel_size):        # taps, left to right
            src = t + (k - kernel_size // 2) * dilation
            if 0 <= src < length:
                term += weight[c, i, k] * x[i, src]
        out[c, t] += term

Out-of-range taps contribute nothing (zero padding by omission).  The
compiled kernels below and the numpy fallback both execute exactly this
sequence of floating point operations per output element; none of them
may be compiled or rewritten with reassociation (no fastmath).

The backward pass has no such constraint and uses BLAS matrix products.
"""

import os

import numpy as np

_DISABLED = os.environ.get("TAPGEN_NO_NUMBA", "") not in ("", "0")

if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _DISABLED = True

HAVE_NUMBA = not _DISABLED

_SIG = "void(float64[:,::1], float64[:,:,::1], float64[::1], int64, float64[:,::1])"

if HAVE_NUMBA:

    @njit(_SIG, cache=True)
    def _conv_k3(x, w, b, dilation, out):
        # Specialised kernel for the common kernel_size == 3 case.  The
        # time axis is split into edge regions (where a tap falls off the
        # sequence) and the interior, but the per-element operation order
        # is identical to the module-level definition.
        c_in, tt = x.shape
        c_out = w.shape[0]
        d = dilation
        for c in range(c_out):
            row = out[c]
            bc = b[c]
            for t in range(tt):
                row[t] = bc
            for i in range(c_in):
                xi = x[i]
                w0 = w[c, i, 0]
                w1 = w[c, i, 1]
                w2 = w[c, i, 2]
                if 2 * d <= tt:
                    for t in range(d):
                        term = 0.0
                        term += w1 * xi[t]
                        term += w2 * xi[t + d]
                        row[t] += term
                    for t in range(d, tt - d):
                        term = 0.0
                        term += w0 * xi[t - d]
                        term += w1 * xi[t]
                        term += w2 * xi[t + d]
                        row[t] += term
                    for t in range(tt - d, tt):
                        term = 0.0
                        term += w0 * xi[t - d]
                        term += w1 * xi[t]
                        row[t] += term
                else:
                    for t in range(tt):
                        term = 0.0
                        if t - d >= 0:
                            term += w0 * xi[t - d]
                        term += w1 * xi[t]
                        if t + d < tt:
                            term += w2 * xi[t + d]
                        row[t] += term

    @njit(_SIG, cache=True)
    def _conv_any(x, w, b, dilation, out):
        # Generic odd kernel size.
        c_in, tt = x.shape
        c_out = w.shape[0]
        kk = w.shape[2]
        half = kk // 2
        for c in range(c_out):
            row = out[c]
            bc = b[c]
            for t in range(tt):
                row[t] = bc
            for i in range(c_in):
                xi = x[i]
                for t in range(tt):
                    term = 0.0
                    base = t - half * dilation
                    for k in range(kk):
                        src = base + k * dilation
                        if 0 <= src < tt:
                            term += w[c, i, k] * xi[src]
                    row[t] += term


def _conv_forward_numpy(x, w, b, dilation):
    """Vectorised fallback with the same per-element operation order."""
    c_in, tt = x.shape
    c_out, _, kk = w.shape
    half = kk // 2
    out = np.broadcast_to(b[:, None], (c_out, tt)).copy()
    for i in range(c_in):
        term = np.zeros((c_out, tt))
        for k in range(kk):
            off = (k - half) * dilation
            lo = max(0, -off)
            hi = min(tt, tt - off)
            if lo < hi:
                term[:, lo:hi] += w[:, i, k, None] * x[i, lo + off:hi + off]
        out += term
    return out


def conv_forward(x, w, b, dilation):
    """Dilated 1-D convolution, zero padded to preserve length.

    x: (c_in, t) float64, w: (c_out, c_in, k) float64 with odd k,
    b: (c_out,) float64.  Returns (c_out, t) float64.
    """
    if not HAVE_NUMBA:
        return _conv_forward_numpy(x, w, b, dilation)
    out = np.empty((w.shape[0], x.shape[1]))
    if w.shape[2] == 3:
        _conv_k3(x, w, b, dilation, out)
    else:
        _conv_any(x, w, b, dilation, out)
    return out


def conv_backward(x, w, gout, dilation):
    """Gradients of conv_forward w.r.t. input, weight and bias.

    Uses matrix products (im2col); the bitwise ordering contract applies
    only to the forward pass.
    """
    c_in, tt = x.shape
    c_out, _, kk = w.shape
    half = kk // 2
    cols = np.zeros((c_in, kk, tt))
    for k in range(kk):
        off = (k - half) * dilation
        lo = max(0, -off)
        hi = min(tt, tt - off)
        if lo < hi:
            cols[:, k, lo:hi] = x[:, lo + off:hi + off]
    flat = cols.reshape(c_in * kk, tt)
    dw = (gout @ flat.T).reshape(c_out, c_in, kk)
    db = gout.sum(axis=1)
    dcols = (w.reshape(c_out, c_in * kk).T @ gout).reshape(c_in, kk, tt)
    dx = np.zeros_like(x)
    for k in range(kk):
        off = (k - half) * dilation
        lo = max(0, -off)
        hi = min(tt, tt - off)
        if lo < hi:
            dx[:, lo + off:hi + off] += dcols[:, k, lo:hi]
    return dx, dw, db
