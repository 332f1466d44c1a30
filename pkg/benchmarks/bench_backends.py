#!/usr/bin/env python3
"""Compare the compiled kernel core against the pure-numpy fallback.

Runs the three batched kernels on representative shapes (the default
4x50-swish energy net over MALA-sized batches) plus a short end-to-end
chain sweep, and prints a table with the speedup.  Use UNLE_FORCE_NUMPY=1
to check what the package falls back to without the extension.
"""

import time

import numpy as np

from unle import _numpy_core
from unle import backend, nets
from unle.samplers import ParticleCloud, UnnormalizedTarget, run_chains

try:
    from unle import _core
except ImportError:
    _core = None


def timeit(f, min_time=0.5):
    f()
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < min_time:
        f()
        n += 1
    return (time.perf_counter() - t0) / n


def chunked(fn):
    # route an impl's kernel through the shared cache-sized chunking
    def forward(flat, sizes, act, X):
        out = np.empty((X.shape[0], int(sizes[-1])))
        for s in range(0, X.shape[0], backend.CHUNK):
            out[s:s + backend.CHUNK] = fn.forward(flat, sizes, act, X[s:s + backend.CHUNK])
        return out

    def value_and_grad(flat, sizes, act, X):
        vals = np.empty(X.shape[0])
        grads = np.empty_like(X)
        for s in range(0, X.shape[0], backend.CHUNK):
            v, g = fn.value_and_grad_input(flat, sizes, act, X[s:s + backend.CHUNK])
            vals[s:s + backend.CHUNK] = v
            grads[s:s + backend.CHUNK] = g
        return vals, grads

    def grad_params(flat, sizes, act, X, c):
        total = np.zeros_like(flat)
        for s in range(0, X.shape[0], backend.CHUNK):
            total += fn.grad_params_weighted(flat, sizes, act, X[s:s + backend.CHUNK],
                                             c[s:s + backend.CHUNK])
        return total

    return forward, value_and_grad, grad_params


def main():
    rng = np.random.default_rng(0)
    impls = [("numpy", _numpy_core)]
    if _core is not None:
        impls.append(("cython", _core))
    else:
        print("compiled extension not available; showing numpy only")

    print(f"active backend: {backend.KIND} (chunk={backend.CHUNK})\n")
    header = f"{'kernel':28s} {'batch':>6s} " + "".join(f"{name:>12s}" for name, _ in impls)
    print(header + ("    speedup" if len(impls) == 2 else ""))
    p = nets.net_init([4, 50, 50, 50, 50, 1], "swish", rng)
    for B in (128, 1000, 5000):
        X = np.ascontiguousarray(rng.standard_normal((B, 4)))
        c = np.full(B, 1.0 / B)
        rows = [
            ("forward", lambda f: f[0](p.flat, p.sizes_arr, 1, X)),
            ("value_and_grad_input", lambda f: f[1](p.flat, p.sizes_arr, 1, X)),
            ("grad_params_weighted", lambda f: f[2](p.flat, p.sizes_arr, 1, X, c)),
        ]
        for label, call in rows:
            times = []
            for _, impl in impls:
                fns = chunked(impl)
                times.append(timeit(lambda: call(fns)) * 1e3)
            line = f"{label:28s} {B:6d} " + "".join(f"{t:10.3f}ms" for t in times)
            if len(times) == 2:
                line += f"    {times[0] / times[1]:6.2f}x"
            print(line)

    # end-to-end: 200 MALA steps of 1000 chains on a net-backed target
    print("\nend-to-end: 1000 MALA chains x 200 steps on the energy net")
    X0 = rng.standard_normal((1000, 4))
    for name, impl in impls:
        fns = chunked(impl)

        def logpdf_and_grad(x):
            v, g = fns[1](p.flat, p.sizes_arr, 1, np.ascontiguousarray(x))
            return -v, -g

        target = UnnormalizedTarget(4, logpdf_and_grad)
        cloud = ParticleCloud.from_points(X0)
        t0 = time.perf_counter()
        run_chains(target, cloud, 150, 50, np.random.default_rng(1))
        print(f"  {name:7s} {time.perf_counter() - t0:6.2f} s")


if __name__ == "__main__":
    main()
