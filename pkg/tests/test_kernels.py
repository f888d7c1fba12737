import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg import kernels

BACKENDS = kernels.available_backends()
needs_c = pytest.mark.skipif("c" not in BACKENDS, reason="compiled kernels not built")


def test_python_backend_always_available():
    assert "python" in BACKENDS


def test_env_forces_python_backend():
    code = "from tumorseg import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, TUMORSEG_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_c
def test_compiled_backend_is_default():
    code = "from tumorseg import kernels; print(kernels.BACKEND)"
    env = {k: v for k, v in os.environ.items() if k != "TUMORSEG_KERNELS"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "c"


def test_unknown_backend_name():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_im2col_direct_loop_oracle():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((1, 2, 5, 4, 5))
    k, s = (3, 2, 3), (2, 1, 2)
    cols = kernels.get_backend("python").im2col3d(xp, k, s)
    ox, oy, oz = 2, 3, 2
    ref = np.zeros((1, 2 * 18, ox * oy * oz))
    for c in range(2):
        for i in range(3):
            for j in range(2):
                for kk in range(3):
                    row = ((c * 3 + i) * 2 + j) * 3 + kk
                    for a in range(ox):
                        for b in range(oy):
                            for d in range(oz):
                                ref[0, row, (a * oy + b) * oz + d] = xp[0, c, a * 2 + i, b + j, d * 2 + kk]
    np.testing.assert_array_equal(cols, ref)


@pytest.mark.parametrize("name", BACKENDS)
def test_col2im_is_adjoint_of_im2col(name):
    be = kernels.get_backend(name)
    rng = np.random.default_rng(1)
    xp = rng.standard_normal((2, 3, 6, 5, 6))
    k, s = (2, 3, 2), (2, 1, 2)
    cols = be.im2col3d(xp, k, s)
    c = rng.standard_normal(cols.shape)
    lhs = np.vdot(cols, c)
    rhs = np.vdot(xp, be.col2im3d(c, xp.shape, k, s))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


@needs_c
@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.tuples(*[st.integers(1, 3)] * 3),
       st.tuples(*[st.integers(1, 2)] * 3), st.integers(0, 10_000),
       st.sampled_from([np.float32, np.float64]))
def test_conv_kernels_agree_bit_for_bit(nb, nc, k, s, seed, dtype):
    rng = np.random.default_rng(seed)
    shape = (nb, nc) + tuple(kk + 3 for kk in k)
    xp = rng.standard_normal(shape).astype(dtype)
    c, p = kernels.get_backend("c"), kernels.get_backend("python")
    a, b = c.im2col3d(xp, k, s), p.im2col3d(xp, k, s)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_array_equal(c.col2im3d(cols, shape, k, s), p.col2im3d(cols, shape, k, s))


@needs_c
def test_min_distances_agree():
    rng = np.random.default_rng(2)
    a, b = rng.random((300, 3)) * 10, rng.random((200, 3)) * 10
    c, p = kernels.get_backend("c"), kernels.get_backend("python")
    np.testing.assert_allclose(c.min_distances(a, b), p.min_distances(a, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_min_distances_brute_force(name):
    rng = np.random.default_rng(3)
    a, b = rng.integers(0, 6, (40, 3)).astype(float), rng.integers(0, 6, (25, 3)).astype(float)
    ref = [min(np.sqrt(((x - y) ** 2).sum()) for y in b) for x in a]
    np.testing.assert_allclose(kernels.get_backend(name).min_distances(a, b), ref, rtol=0, atol=1e-12)
    assert np.all(np.isinf(kernels.get_backend(name).min_distances(a, np.zeros((0, 3)))))


@needs_c
@pytest.mark.parametrize("order", [0, 1])
def test_resample_agree(order):
    rng = np.random.default_rng(4)
    vol = rng.standard_normal((2, 6, 7, 5))
    coords = rng.uniform(-1.5, 7.5, (3, 4, 5, 6))
    c, p = kernels.get_backend("c"), kernels.get_backend("python")
    np.testing.assert_allclose(c.resample3d(vol, coords, order, 0.5), p.resample3d(vol, coords, order, 0.5),
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_resample_identity_grid(name):
    vol = np.random.default_rng(5).standard_normal((1, 4, 3, 5))
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in vol.shape[1:]], indexing="ij"))
    for order in (0, 1):
        np.testing.assert_allclose(kernels.get_backend(name).resample3d(vol, grid, order, 0.0), vol, atol=1e-12)
