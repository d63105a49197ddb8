"""Backend selection and compiled-vs-python kernel parity."""

import os
import subprocess
import sys

import numpy as np

from comet import kernels
from comet.numerics import seeded_rng, softmax


def _ragged(rng, n=30, d=8):
    counts = rng.integers(1, 12, size=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    flat = rng.normal(size=(int(counts.sum()), d))
    return flat, offsets


class TestBackendSelection:
    def test_backend_constant(self):
        assert kernels.BACKEND in ("compiled", "python")

    def test_force_py_env(self):
        out = subprocess.run(
            [sys.executable, "-c", "import comet; print(comet.BACKEND)"],
            env={**os.environ, "COMET_FORCE_PY": "1"},
            capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "python"


class TestPalPoolParity:
    def test_python_matches_dispatcher(self):
        rng = seeded_rng(0)
        flat, offsets = _ragged(rng)
        theta = rng.normal(size=8)
        a = kernels.pal_pool_flat(flat, offsets, theta)
        b = kernels._pal_pool_flat_py(flat, offsets, theta)
        assert np.abs(a - b).max() < 1e-10

    def test_uniform_counts_batched_path(self):
        rng = seeded_rng(1)
        flat = rng.normal(size=(40, 5))
        offsets = np.arange(0, 41, 4, dtype=np.int64)
        theta = rng.normal(size=5)
        a = kernels._pal_pool_flat_py(flat, offsets, theta)
        # reference: per-sample softmax-weighted average
        for i in range(10):
            block = flat[4 * i : 4 * i + 4]
            w = softmax(block @ theta)
            assert np.abs(a[i] - w @ block).max() < 1e-12

    def test_zero_theta_is_mean(self):
        rng = seeded_rng(2)
        flat, offsets = _ragged(rng)
        out = kernels.pal_pool_flat(flat, offsets, np.zeros(8))
        for i in range(len(offsets) - 1):
            seg = flat[offsets[i] : offsets[i + 1]]
            assert np.abs(out[i] - seg.mean(axis=0)).max() < 1e-12

    def test_output_in_convex_hull_bounds(self):
        rng = seeded_rng(3)
        flat, offsets = _ragged(rng)
        theta = rng.normal(size=8)
        out = kernels.pal_pool_flat(flat, offsets, theta)
        for i in range(len(offsets) - 1):
            seg = flat[offsets[i] : offsets[i + 1]]
            assert (out[i] <= seg.max(axis=0) + 1e-12).all()
            assert (out[i] >= seg.min(axis=0) - 1e-12).all()


class TestKernelPosteriorParity:
    def test_python_matches_dispatcher(self):
        rng = seeded_rng(4)
        qry = rng.normal(size=(50, 6))
        sup = rng.normal(size=(30, 6))
        labels = rng.integers(3, size=30)
        a = kernels.kernel_posterior(qry, sup, labels, 3, 1.3, 1.0)
        b = kernels._kernel_posterior_py(qry, sup, labels, 3, 1.3, 1.0)
        assert np.abs(a - b).max() < 1e-10

    def test_rows_stochastic(self):
        rng = seeded_rng(5)
        out = kernels.kernel_posterior(
            rng.normal(size=(20, 4)), rng.normal(size=(15, 4)),
            rng.integers(2, size=15), 2, 0.8, 1.0,
        )
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_chunk_boundary(self):
        # more queries than one internal chunk
        rng = seeded_rng(6)
        qry = rng.normal(size=(2100, 3))
        sup = rng.normal(size=(10, 3))
        labels = rng.integers(2, size=10)
        a = kernels.kernel_posterior(qry, sup, labels, 2, 1.0, 1.0)
        b = kernels._kernel_posterior_py(qry, sup, labels, 2, 1.0, 1.0)
        assert np.abs(a - b).max() < 1e-10

    def test_alpha_dominates_far_queries(self):
        sup = np.zeros((4, 2))
        labels = np.array([0, 0, 0, 1])
        far = np.full((1, 2), 1e6)
        out = kernels.kernel_posterior(far, sup, labels, 2, 1.0, 1.0)
        assert np.abs(out[0] - 0.5).max() < 1e-9
