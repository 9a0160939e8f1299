"""3x3x3 convolution kernels with backend selection.

The compiled Cython backend is used when available; the pure-numpy
reference backend is the fallback. ``PLSEG_KERNEL_BACKEND=python``
forces the fallback (useful for benchmarking and debugging). Both
backends implement identical zero-padded, stride-1 convolution
semantics; results agree to floating-point accumulation order.

Public functions take unpadded arrays in channel-first layout:
    x  : (C_in, X, Y, Z)
    w  : (C_out, C_in, 3, 3, 3)
    b  : (C_out,)
    gy : (C_out, X, Y, Z)
"""

import os

import numpy as np

from . import _reference

try:
    from . import _conv3d as _compiled
except ImportError:
    _compiled = None

if os.environ.get("PLSEG_KERNEL_BACKEND", "").lower() == "python":
    _impl = _reference
    BACKEND = "python"
elif _compiled is not None:
    _impl = _compiled
    BACKEND = "compiled"
else:
    _impl = _reference
    BACKEND = "python"

_PAD = ((0, 0), (1, 1), (1, 1), (1, 1))


def _as4d(a, name):
    a = np.ascontiguousarray(a)
    if a.ndim != 4:
        raise ValueError(f"{name} must be 4D (C, X, Y, Z), got shape {a.shape}")
    return a


def conv3x3_forward(x, w, b):
    """Convolve x with w (zero 'same' padding) and add per-channel bias."""
    x = _as4d(x, "x")
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    xp = np.pad(x, _PAD)
    y = np.empty((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    _impl.forward_padded(xp, w, b, y)
    return y


def conv3x3_input_grad(gy, w):
    """Gradient of the convolution output contraction w.r.t. its input."""
    gy = _as4d(gy, "gy")
    w = np.ascontiguousarray(w)
    gyp = np.pad(gy, _PAD)
    gx = np.empty((w.shape[1],) + gy.shape[1:], dtype=gy.dtype)
    _impl.input_grad_padded(gyp, w, gx)
    return gx


def conv3x3_param_grad(x, gy):
    """Gradients w.r.t. kernel weights and bias for upstream grad gy."""
    x = _as4d(x, "x")
    gy = _as4d(gy, "gy")
    xp = np.pad(x, _PAD)
    gw = np.empty((gy.shape[0], x.shape[0], 3, 3, 3), dtype=x.dtype)
    gb = np.empty(gy.shape[0], dtype=gy.dtype)
    _impl.param_grad_padded(xp, gy, gw, gb)
    return gw, gb
