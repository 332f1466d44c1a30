"""Minimal dense-network engine: forward evaluation, exact reverse-mode
gradients with respect to parameters and inputs, and an Adam optimizer.

Networks are fully-connected with a fixed hidden activation (swish, tanh or
identity) and a linear output layer.  Parameters live in a single flat
float64 vector packed layer by layer (row-major weight, then bias), which is
what the batched kernels and the optimizer operate on.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from unle import backend

_ACT_CODES = {"identity": backend.IDENTITY, "swish": backend.SWISH, "tanh": backend.TANH}


@dataclass(frozen=True)
class NetParams:
    """Immutable parameter container for a dense network."""

    layer_sizes: tuple
    activation: str
    flat: np.ndarray
    sizes_arr: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        sizes = np.asarray(self.layer_sizes, dtype=np.int64)
        if sizes.size < 2 or np.any(sizes < 1):
            raise ValueError("layer_sizes needs at least two entries, all >= 1")
        if self.flat.shape != (backend.n_params(sizes),):
            raise ValueError("flat parameter vector does not match layer_sizes")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite network parameters")
        object.__setattr__(self, "sizes_arr", sizes)

    @property
    def act_code(self):
        return _ACT_CODES[self.activation]

    @property
    def in_dim(self):
        return int(self.layer_sizes[0])

    @property
    def out_dim(self):
        return int(self.layer_sizes[-1])

    def layers(self):
        """Per-layer (weight, bias) views into the flat vector."""
        return list(zip(*backend.split_params(self.flat, self.sizes_arr)))

    def with_flat(self, flat):
        return NetParams(self.layer_sizes, self.activation, np.asarray(flat, dtype=np.float64))

    def to_dict(self):
        ws, bs = backend.split_params(self.flat, self.sizes_arr)
        return {
            "layer_sizes": [int(s) for s in self.layer_sizes],
            "activation": self.activation,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(ws, bs)],
        }

    @staticmethod
    def from_dict(doc):
        sizes = tuple(int(s) for s in doc["layer_sizes"])
        flat = np.concatenate(
            [
                np.concatenate(
                    [np.asarray(layer["weight"], dtype=np.float64).ravel(),
                     np.asarray(layer["bias"], dtype=np.float64)]
                )
                for layer in doc["layers"]
            ]
        )
        return NetParams(sizes, doc["activation"], flat)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as fh:
            return NetParams.from_dict(json.load(fh))


def net_init(layer_sizes, activation, rng):
    """He-style Gaussian init (std sqrt(2 / fan_in)), zero biases."""
    sizes = np.asarray(layer_sizes, dtype=np.int64)
    if sizes.size < 2 or np.any(sizes < 1):
        raise ValueError("layer_sizes needs at least two entries, all >= 1")
    chunks = []
    for k in range(sizes.size - 1):
        n_in, n_out = int(sizes[k]), int(sizes[k + 1])
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        chunks.append(w.ravel())
        chunks.append(np.zeros(n_out))
    return NetParams(tuple(int(s) for s in sizes), activation, np.concatenate(chunks))


def _as_batch(p, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if batch.shape[1] != p.in_dim:
        raise ValueError(f"input dim {batch.shape[1]} != network input dim {p.in_dim}")
    return batch, single


def net_forward(p, x):
    """Evaluate the network; accepts a single vector or a (B, d) batch."""
    batch, single = _as_batch(p, x)
    out = backend.forward(p.flat, p.sizes_arr, p.act_code, batch)
    return out[0] if single else out


def _require_scalar(p):
    if p.out_dim != 1:
        raise ValueError("operation requires a scalar-output network")


def net_value_and_grad_input(p, x):
    """Batched scalar outputs and gradients w.r.t. the input rows."""
    _require_scalar(p)
    batch, single = _as_batch(p, x)
    vals, grads = backend.value_and_grad_input(p.flat, p.sizes_arr, p.act_code, batch)
    if single:
        return float(vals[0]), grads[0]
    return vals, grads


def net_grad_input(p, x):
    """Gradient of the scalar output with respect to the input vector."""
    return net_value_and_grad_input(p, x)[1]


def net_grad_params(p, x):
    """Gradient of the scalar output w.r.t. every weight and bias (flat)."""
    _require_scalar(p)
    batch, single = _as_batch(p, x)
    if not single:
        raise ValueError("net_grad_params takes a single input vector")
    return backend.grad_params_weighted(p.flat, p.sizes_arr, p.act_code, batch, np.ones(1))


def net_grad_params_weighted(p, x, coeffs):
    """Gradient of sum_b coeffs[b] * f(x_b) w.r.t. the flat parameters."""
    _require_scalar(p)
    batch = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    coeffs = np.ascontiguousarray(np.asarray(coeffs, dtype=np.float64))
    if batch.shape[0] != coeffs.shape[0]:
        raise ValueError("coeffs length must match batch size")
    return backend.grad_params_weighted(p.flat, p.sizes_arr, p.act_code, batch, coeffs)


def net_grad_params_input_jvp(p, x, directions, coeffs):
    """Parameter gradient of sum_b coeffs[b] * (grad_x f(x_b) . directions[b])."""
    _require_scalar(p)
    batch = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    dirs = np.ascontiguousarray(np.asarray(directions, dtype=np.float64))
    coeffs = np.ascontiguousarray(np.asarray(coeffs, dtype=np.float64))
    return backend.grad_params_input_jvp(p.flat, p.sizes_arr, p.act_code, batch, dirs, coeffs)


@dataclass
class AdamState:
    """Adam accumulators shaped like the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(n, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_flat_step(state, flat, grad):
    """One Adam step (with bias correction) on a flat parameter vector."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != flat.shape or state.m.shape != flat.shape:
        raise ValueError("gradient / state shape does not match parameters")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_flat = flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), new_flat


def adam_step(state, p, grad):
    """One Adam step on NetParams; grad is flat, packed like ``p.flat``."""
    state, flat = adam_flat_step(state, p.flat, grad)
    return state, p.with_flat(flat)
