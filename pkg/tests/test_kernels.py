"""The numba kernels against their numpy twins, whatever the backend flag says."""
import os
import subprocess
import sys

import numpy as np
import pytest

from poems import kernels
from poems import model as M
from poems._accel import NUMBA_AVAILABLE
from poems.numerics import init_mlp

needs_numba = pytest.mark.skipif(not NUMBA_AVAILABLE, reason="numba not installed")


@needs_numba
def test_sq_distances_agree(rng):
    X, C = rng.normal(size=(50, 7)), rng.normal(size=(6, 7))
    assert np.abs(kernels.sq_distances_nb(X, C) - kernels.sq_distances_np(X, C)).max() < 1e-12


@needs_numba
@pytest.mark.parametrize("k", [1, 3, 8])
def test_lloyd_agree(rng, k):
    X = rng.normal(size=(120, 3))
    C0 = X[rng.choice(120, k, replace=False)]
    a = kernels.lloyd_nb(X, C0, 300)
    b = kernels.lloyd_np(X, C0, 300)
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]
    assert np.abs(a[1] - b[1]).max() < 1e-12


@needs_numba
def test_lloyd_empty_cluster_agree():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    C0 = np.array([[1.0], [100.0], [200.0]])
    a = kernels.lloyd_nb(X, C0, 300)
    b = kernels.lloyd_np(X, C0, 300)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_numba
@pytest.mark.parametrize("shape", [(3, 5, 2, 4), (17, 33, 8, 16), (64, 100, 32, 64)])
def test_decoder_kernel_agrees_with_batched_numpy(shape):
    n, d, k, h = shape
    rng = np.random.default_rng(n)
    z, W = rng.normal(size=(n, k)), rng.uniform(-0.5, 0.5, (d, k))
    trunk = init_mlp([k, h, 1], rng)
    trunk.layers[0].bias[:] = rng.normal(size=h) * 0.1
    dec = M.DecoderParams(trunk, rng.normal(size=d))
    a, ca = M.sparse_decode_forward(z, W, dec, use_kernel=True)
    b, cb = M.sparse_decode_forward(z, W, dec, use_kernel=False)
    assert np.abs(a - b).max() <= 1e-10
    g = rng.normal(size=(n, d))
    ga = M.sparse_decode_backward(dec, ca, g)
    gb = M.sparse_decode_backward(dec, cb, g)
    for x, y in zip(ga[0], gb[0]):
        assert np.abs(x[0] - y[0]).max() < 1e-9 and np.abs(x[1] - y[1]).max() < 1e-9
    for x, y in zip(ga[1:], gb[1:]):
        assert np.abs(x - y).max() < 1e-9


def test_flag_selects_numpy_backend():
    code = "from poems._accel import backend_name; print(backend_name())"
    env = dict(os.environ, POEMS_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
