"""Compare the compiled kernels against the pure-numpy fallbacks.

Run from a shell:  python benchmarks/bench_kernels.py
The fallback is timed in-process by calling the private numpy paths, so a
single run covers both backends regardless of how the package was built.
"""

import time

import numpy as np

from comet import kernels
from comet.numerics import seeded_rng


def _time(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_pal_pool(rng, n=4000, p=64, d=128):
    flat = rng.normal(size=(n * p, d))
    offsets = np.arange(0, n * p + 1, p, dtype=np.int64)
    theta = rng.normal(size=d)
    rows = []
    py_t, py_out = _time(kernels._pal_pool_flat_py, flat, offsets, theta)
    rows.append(("python", py_t))
    if kernels.BACKEND == "compiled":
        c_t, c_out = _time(kernels._core.pal_pool_flat, flat, offsets, theta)
        assert np.allclose(py_out, c_out, atol=1e-10)
        rows.append(("compiled", c_t))
    return rows


def bench_kernel_posterior(rng, m=20000, n=2000, d=64, c=10):
    qry = rng.normal(size=(m, d))
    sup = rng.normal(size=(n, d))
    labels = rng.integers(c, size=n)
    rows = []
    py_t, py_out = _time(kernels._kernel_posterior_py, qry, sup, labels, c, 1.0, 1.0)
    rows.append(("python", py_t))
    if kernels.BACKEND == "compiled":
        c_t, c_out = _time(kernels._core.kernel_posterior, qry, sup, labels, c, 1.0, 1.0)
        assert np.allclose(py_out, c_out, atol=1e-8)
        rows.append(("compiled", c_t))
    return rows


def main():
    rng = seeded_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    for name, rows in (
        ("pal_pool_flat (4000 samples x 64 tokens x 128 dims)", bench_pal_pool(rng)),
        ("kernel_posterior (20000 queries, 2000 support, 64 dims)", bench_kernel_posterior(rng)),
    ):
        print(f"\n{name}")
        base = dict(rows).get("python")
        for backend, t in rows:
            speedup = f"  ({base / t:.2f}x vs python)" if backend != "python" else ""
            print(f"  {backend:9s} {t * 1e3:8.2f} ms{speedup}")


if __name__ == "__main__":
    main()
