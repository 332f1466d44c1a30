"""Kernel backend selection and batch chunking.

The compiled extension ``unle._core`` is used when it imported cleanly and
``UNLE_FORCE_NUMPY`` is unset; otherwise the pure-numpy fallback serves the
same API.  Large batches are processed in row chunks sized so the working
set of one chunk stays cache-resident, which is several times faster than
a monolithic pass on the batch sizes the samplers use; chunk results are
combined in a fixed order, so outputs stay deterministic.

The mixed second-order kernel (``grad_params_input_jvp``) is numpy-only and
shared by both backends.
"""

import os

import numpy as np

from unle import _numpy_core

try:
    from unle import _core
except ImportError:
    _core = None

if _core is not None and not os.environ.get("UNLE_FORCE_NUMPY"):
    _impl = _core
else:
    _impl = _numpy_core

KIND = _impl.KIND

split_params = _numpy_core.split_params
n_params = _numpy_core.n_params

IDENTITY = _numpy_core.IDENTITY
SWISH = _numpy_core.SWISH
TANH = _numpy_core.TANH

CHUNK = 128


def forward(flat, sizes, act, X):
    b = X.shape[0]
    if b <= CHUNK:
        return _impl.forward(flat, sizes, act, X)
    out = np.empty((b, int(sizes[-1])))
    for s in range(0, b, CHUNK):
        out[s:s + CHUNK] = _impl.forward(flat, sizes, act, X[s:s + CHUNK])
    return out


def value_and_grad_input(flat, sizes, act, X):
    b = X.shape[0]
    if b <= CHUNK:
        return _impl.value_and_grad_input(flat, sizes, act, X)
    vals = np.empty(b)
    grads = np.empty((b, X.shape[1]))
    for s in range(0, b, CHUNK):
        v, g = _impl.value_and_grad_input(flat, sizes, act, X[s:s + CHUNK])
        vals[s:s + CHUNK] = v
        grads[s:s + CHUNK] = g
    return vals, grads


def grad_params_weighted(flat, sizes, act, X, coeffs):
    b = X.shape[0]
    if b <= CHUNK:
        return _impl.grad_params_weighted(flat, sizes, act, X, coeffs)
    total = np.zeros_like(flat)
    for s in range(0, b, CHUNK):
        total += _impl.grad_params_weighted(flat, sizes, act, X[s:s + CHUNK],
                                            coeffs[s:s + CHUNK])
    return total


def grad_params_input_jvp(flat, sizes, act, X, R, coeffs):
    b = X.shape[0]
    if b <= CHUNK:
        return _numpy_core.grad_params_input_jvp(flat, sizes, act, X, R, coeffs)
    total = np.zeros_like(flat)
    for s in range(0, b, CHUNK):
        total += _numpy_core.grad_params_input_jvp(
            flat, sizes, act, X[s:s + CHUNK], R[s:s + CHUNK], coeffs[s:s + CHUNK])
    return total
