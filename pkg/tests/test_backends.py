"""Backend parity: the compiled kernels, the numpy fallback and the chunked
dispatch must agree with each other and with a per-sample reference."""

import numpy as np
import pytest

from unle import _numpy_core, backend, nets

try:
    from unle import _core
except ImportError:
    _core = None

ACTS = {"identity": 0, "swish": 1, "tanh": 2}


def _reference_forward(p, x):
    # straightforward per-layer re-evaluation, independent of the kernels
    a = np.asarray(x, dtype=np.float64)
    layers = p.layers()
    for k, (w, b) in enumerate(layers):
        z = w @ a + b
        if k < len(layers) - 1:
            if p.activation == "swish":
                a = z / (1.0 + np.exp(-z))
            elif p.activation == "tanh":
                a = np.tanh(z)
            else:
                a = z
        else:
            a = z
    return a


def _random_net(rng):
    depth = int(rng.integers(1, 6))
    sizes = [int(rng.integers(1, 9))] + [int(rng.integers(1, 65)) for _ in range(depth)] + [1]
    act = rng.choice(["identity", "swish", "tanh"])
    return nets.net_init(sizes, act, rng)


def test_numpy_forward_matches_reference_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = _random_net(rng)
        x = rng.standard_normal(p.in_dim)
        got = _numpy_core.forward(p.flat, p.sizes_arr, ACTS[p.activation],
                                  np.ascontiguousarray(x[None, :]))[0]
        np.testing.assert_allclose(got, _reference_forward(p, x), rtol=1e-12, atol=1e-12)


@pytest.mark.skipif(_core is None, reason="compiled extension unavailable")
def test_compiled_matches_numpy():
    rng = np.random.default_rng(7)
    for _ in range(30):
        p = _random_net(rng)
        act = ACTS[p.activation]
        b = int(rng.integers(1, 40))
        X = np.ascontiguousarray(rng.standard_normal((b, p.in_dim)))
        c = np.ascontiguousarray(rng.standard_normal(b))
        np.testing.assert_allclose(
            _core.forward(p.flat, p.sizes_arr, act, X),
            _numpy_core.forward(p.flat, p.sizes_arr, act, X), rtol=1e-12, atol=1e-14)
        v1, g1 = _core.value_and_grad_input(p.flat, p.sizes_arr, act, X)
        v2, g2 = _numpy_core.value_and_grad_input(p.flat, p.sizes_arr, act, X)
        np.testing.assert_allclose(v1, v2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(
            _core.grad_params_weighted(p.flat, p.sizes_arr, act, X, c),
            _numpy_core.grad_params_weighted(p.flat, p.sizes_arr, act, X, c),
            rtol=1e-10, atol=1e-13)


def test_chunked_dispatch_matches_monolithic():
    rng = np.random.default_rng(11)
    p = nets.net_init([3, 30, 30, 1], "swish", rng)
    X = np.ascontiguousarray(rng.standard_normal((backend.CHUNK * 3 + 17, 3)))
    c = np.ascontiguousarray(rng.standard_normal(X.shape[0]))
    v1, g1 = backend.value_and_grad_input(p.flat, p.sizes_arr, 1, X)
    v2, g2 = _numpy_core.value_and_grad_input(p.flat, p.sizes_arr, 1, X)
    np.testing.assert_allclose(v1, v2, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(
        backend.grad_params_weighted(p.flat, p.sizes_arr, 1, X, c),
        _numpy_core.grad_params_weighted(p.flat, p.sizes_arr, 1, X, c),
        rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(
        backend.forward(p.flat, p.sizes_arr, 1, X),
        _numpy_core.forward(p.flat, p.sizes_arr, 1, X), rtol=1e-11, atol=1e-13)
