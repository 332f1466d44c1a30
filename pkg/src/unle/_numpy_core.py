"""Pure-numpy implementations of the batched dense-network kernels.

All kernels operate on a flat parameter vector packed layer by layer
(row-major weight matrix followed by bias) as produced by
``unle.nets.NetParams.flat``.  Activation codes: 0 identity, 1 swish,
2 tanh.  Hidden layers are activated, the output layer is linear.

This module is the fallback backend; ``unle._core`` provides the same
callables compiled with Cython + BLAS.
"""

import numpy as np

KIND = "numpy"

IDENTITY, SWISH, TANH = 0, 1, 2


def sigmoid(z):
    # 1/(1+exp(-z)); exp overflow only to +inf, which IEEE maps to 0 here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def split_params(flat, sizes):
    """Unpack a flat parameter vector into per-layer (weight, bias) views."""
    weights, biases = [], []
    off = 0
    for k in range(len(sizes) - 1):
        n_in, n_out = int(sizes[k]), int(sizes[k + 1])
        weights.append(flat[off:off + n_out * n_in].reshape(n_out, n_in))
        off += n_out * n_in
        biases.append(flat[off:off + n_out])
        off += n_out
    return weights, biases


def n_params(sizes):
    return int(sum(sizes[k + 1] * sizes[k] + sizes[k + 1] for k in range(len(sizes) - 1)))


def _act(z, act):
    if act == SWISH:
        return z * sigmoid(z)
    if act == TANH:
        return np.tanh(z)
    return z


def _act_prime(z, act):
    if act == SWISH:
        s = sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if act == TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _act_second(z, act):
    if act == SWISH:
        s = sigmoid(z)
        return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
    if act == TANH:
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(z)


def forward(flat, sizes, act, X):
    """Evaluate the network on a batch. X: (B, d_in) -> (B, d_out)."""
    W, b = split_params(flat, sizes)
    L = len(W)
    A = X
    for k in range(L):
        Z = A @ W[k].T + b[k]
        A = _act(Z, act) if k < L - 1 else Z
    return A


def _forward_trace(flat, sizes, act, X):
    W, b = split_params(flat, sizes)
    L = len(W)
    As = [X]
    Zs = []
    A = X
    for k in range(L):
        Z = A @ W[k].T + b[k]
        Zs.append(Z)
        A = _act(Z, act) if k < L - 1 else Z
        if k < L - 1:
            As.append(A)
    return W, b, As, Zs


def value_and_grad_input(flat, sizes, act, X):
    """Scalar-output value and gradient w.r.t. the input, batched.

    Returns (values (B,), grads (B, d_in)).
    """
    W, _, _, Zs = _forward_trace(flat, sizes, act, X)
    L = len(W)
    vals = Zs[-1][:, 0].copy()
    delta = np.ones((X.shape[0], 1))
    for k in range(L - 1, 0, -1):
        delta = (delta @ W[k]) * _act_prime(Zs[k - 1], act)
    return vals, delta @ W[0]


def grad_params_weighted(flat, sizes, act, X, coeffs):
    """Gradient of sum_b coeffs[b] * f(X[b]) w.r.t. the flat parameters."""
    W, _, As, Zs = _forward_trace(flat, sizes, act, X)
    L = len(W)
    grad = np.zeros_like(flat)
    gW, gb = split_params(grad, sizes)
    delta = np.asarray(coeffs, dtype=np.float64).reshape(-1, 1)
    for k in range(L - 1, -1, -1):
        gW[k][...] = delta.T @ As[k]
        gb[k][...] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ W[k]) * _act_prime(Zs[k - 1], act)
    return grad


def grad_params_input_jvp(flat, sizes, act, X, R, coeffs):
    """Parameter gradient of sum_b coeffs[b] * (grad_x f(X[b]) . R[b]).

    Mixed second-order kernel used to train the log-normalizer network:
    the objective contains the network's input gradient, so its parameter
    gradient needs forward-over-reverse differentiation.
    """
    W, _, As, Zs = _forward_trace(flat, sizes, act, X)
    L = len(W)
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1, 1)

    # tangent (forward-mode in x with direction R)
    Adots = [np.asarray(R, dtype=np.float64)]
    Zdots = []
    for k in range(L):
        Zdot = Adots[k] @ W[k].T
        Zdots.append(Zdot)
        if k < L - 1:
            Adots.append(_act_prime(Zs[k], act) * Zdot)

    grad = np.zeros_like(flat)
    gW, gb = split_params(grad, sizes)

    # reverse pass through the two-track (primal, tangent) computation
    Q = c  # dT/d zdot_{L-1}
    gW[L - 1][...] = Q.T @ Adots[L - 1]
    U = np.zeros_like(As[L - 1])  # dT/d a_k
    V = Q @ W[L - 1]              # dT/d adot_k
    for k in range(L - 2, -1, -1):
        phi1 = _act_prime(Zs[k], act)
        phi2 = _act_second(Zs[k], act)
        P = U * phi1 + V * phi2 * Zdots[k]
        Q = V * phi1
        gW[k][...] = P.T @ As[k] + Q.T @ Adots[k]
        gb[k][...] = P.sum(axis=0)
        U = P @ W[k]
        V = Q @ W[k]
    return grad
