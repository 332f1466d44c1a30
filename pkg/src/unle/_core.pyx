# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled batched dense-network kernels.

Same contract as ``unle._numpy_core``: flat packed parameters, activation
codes 0 identity / 1 swish / 2 tanh, hidden layers activated, linear output.
Matrix products go through BLAS, transcendentals through the vectorized
numpy ufuncs (computed once per layer and reused by the backward
pass), and the remaining elementwise work is fused into C loops.
"""

import numpy as np
from unle._numpy_core import sigmoid

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

KIND = "cython"

DEF IDENTITY = 0
DEF SWISH = 1
DEF TANH = 2


cdef void _linear(double* W, double* A, double* Z, int n_out, int n_in, int B) nogil:
    # Z (B x n_out, row-major) = A (B x n_in, row-major) @ W.T (W row-major n_out x n_in)
    cdef double one = 1.0, zero = 0.0
    cdef char tT = b'T', tN = b'N'
    dgemm(&tT, &tN, &n_out, &B, &n_in, &one, W, &n_in, A, &n_in, &zero, Z, &n_out)


cdef void _backprop_delta(double* W, double* delta, double* out, int n_out, int n_in, int B) nogil:
    # out (B x n_in) = delta (B x n_out) @ W (n_out x n_in row-major)
    cdef double one = 1.0, zero = 0.0
    cdef char tN = b'N'
    dgemm(&tN, &tN, &n_in, &B, &n_out, &one, W, &n_in, delta, &n_out, &zero, out, &n_in)


cdef void _outer_accum(double* delta, double* A, double* gW, int n_out, int n_in, int B) nogil:
    # gW (n_out x n_in row-major) = delta.T (n_out x B) @ A (B x n_in)
    cdef double one = 1.0, zero = 0.0
    cdef char tN = b'N', tT = b'T'
    dgemm(&tN, &tT, &n_in, &n_out, &B, &one, A, &n_in, delta, &n_out, &zero, gW, &n_in)


cdef void _add_bias(double[:, ::1] Z, double[::1] flat, Py_ssize_t boff,
                    int n_out, int B) nogil:
    cdef int i, j
    for i in range(B):
        for j in range(n_out):
            Z[i, j] += flat[boff + j]


cdef _activate(cnp.ndarray Z, int act):
    # returns (post-activation A, auxiliary array for the backward pass)
    if act == SWISH:
        S = sigmoid(Z)
        return Z * S, S
    if act == TANH:
        T = np.tanh(Z)
        return T, T
    return Z, None


cdef void _mul_act_prime(double[:, ::1] D, double[:, ::1] Z, double[:, ::1] S,
                         int act, int B, int n) nogil:
    # D *= act'(Z), with S the cached sigmoid (swish) or tanh value
    cdef int i, j
    cdef double s
    if act == SWISH:
        for i in range(B):
            for j in range(n):
                s = S[i, j]
                D[i, j] *= s * (1.0 + Z[i, j] * (1.0 - s))
    elif act == TANH:
        for i in range(B):
            for j in range(n):
                s = S[i, j]
                D[i, j] *= 1.0 - s * s


cdef list _offsets(long[::1] sizes):
    cdef list offs = []
    cdef Py_ssize_t off = 0
    cdef int k
    for k in range(sizes.shape[0] - 1):
        offs.append(off)
        off += sizes[k + 1] * sizes[k] + sizes[k + 1]
    return offs


cdef cnp.ndarray _layer_z(double[::1] flat, Py_ssize_t o, cnp.ndarray cur,
                          int n_in, int n_out, int B):
    cdef cnp.ndarray z = np.empty((B, n_out), dtype=np.float64)
    cdef double[:, ::1] a_v = cur
    cdef double[:, ::1] z_v = z
    with nogil:
        _linear(&flat[o], &a_v[0, 0], &z_v[0, 0], n_out, n_in, B)
        _add_bias(z_v, flat, o + n_out * n_in, n_out, B)
    return z


def forward(double[::1] flat, long[::1] sizes, int act, double[:, ::1] X):
    cdef int L = sizes.shape[0] - 1
    cdef int B = X.shape[0]
    cdef list offs = _offsets(sizes)
    cdef cnp.ndarray cur = np.ascontiguousarray(X)
    cdef int k
    for k in range(L):
        cur = _layer_z(flat, offs[k], cur, <int>sizes[k], <int>sizes[k + 1], B)
        if k < L - 1:
            cur, _ = _activate(cur, act)
            cur = np.ascontiguousarray(cur)
    return cur


def value_and_grad_input(double[::1] flat, long[::1] sizes, int act, double[:, ::1] X):
    cdef int L = sizes.shape[0] - 1
    cdef int B = X.shape[0]
    cdef list offs = _offsets(sizes)
    cdef list zs = [], ss = []
    cdef cnp.ndarray cur = np.ascontiguousarray(X)
    cdef cnp.ndarray z
    cdef int k
    for k in range(L):
        z = _layer_z(flat, offs[k], cur, <int>sizes[k], <int>sizes[k + 1], B)
        zs.append(z)
        if k < L - 1:
            cur, aux = _activate(z, act)
            cur = np.ascontiguousarray(cur)
            ss.append(aux)
    vals = np.ascontiguousarray(zs[L - 1][:, 0])

    cdef cnp.ndarray delta = np.ones((B, 1), dtype=np.float64)
    cdef cnp.ndarray nxt
    cdef double[:, ::1] d_in, d_out, z_v, s_v
    cdef Py_ssize_t o
    cdef int n_in, n_out
    for k in range(L - 1, -1, -1):
        n_in = <int>sizes[k]
        n_out = <int>sizes[k + 1]
        o = offs[k]
        nxt = np.empty((B, n_in), dtype=np.float64)
        d_in = delta
        d_out = nxt
        with nogil:
            _backprop_delta(&flat[o], &d_in[0, 0], &d_out[0, 0], n_out, n_in, B)
        if k > 0 and act != IDENTITY:
            z_v = zs[k - 1]
            s_v = ss[k - 1]
            with nogil:
                _mul_act_prime(d_out, z_v, s_v, act, B, n_in)
        delta = nxt
    return vals, delta


def grad_params_weighted(double[::1] flat, long[::1] sizes, int act, double[:, ::1] X,
                         double[::1] coeffs):
    cdef int L = sizes.shape[0] - 1
    cdef int B = X.shape[0]
    cdef list offs = _offsets(sizes)
    cdef list zs = [], ss = [], acts = []
    cdef cnp.ndarray cur = np.ascontiguousarray(X)
    cdef cnp.ndarray z
    cdef int k
    for k in range(L):
        acts.append(cur)
        z = _layer_z(flat, offs[k], cur, <int>sizes[k], <int>sizes[k + 1], B)
        zs.append(z)
        if k < L - 1:
            cur, aux = _activate(z, act)
            cur = np.ascontiguousarray(cur)
            ss.append(aux)

    cdef cnp.ndarray grad = np.zeros(flat.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef cnp.ndarray delta = np.ascontiguousarray(
        np.asarray(coeffs, dtype=np.float64).reshape(B, 1))
    cdef cnp.ndarray nxt
    cdef double[:, ::1] d_in, d_out, a_v, z_v, s_v
    cdef Py_ssize_t o
    cdef int n_in, n_out, i, j
    cdef double acc
    for k in range(L - 1, -1, -1):
        n_in = <int>sizes[k]
        n_out = <int>sizes[k + 1]
        o = offs[k]
        d_in = delta
        a_v = acts[k]
        with nogil:
            _outer_accum(&d_in[0, 0], &a_v[0, 0], &g[o], n_out, n_in, B)
            for j in range(n_out):
                acc = 0.0
                for i in range(B):
                    acc += d_in[i, j]
                g[o + n_out * n_in + j] = acc
        if k > 0:
            nxt = np.empty((B, n_in), dtype=np.float64)
            d_out = nxt
            with nogil:
                _backprop_delta(&flat[o], &d_in[0, 0], &d_out[0, 0], n_out, n_in, B)
            if act != IDENTITY:
                z_v = zs[k - 1]
                s_v = ss[k - 1]
                with nogil:
                    _mul_act_prime(d_out, z_v, s_v, act, B, n_in)
            delta = nxt
    return grad
