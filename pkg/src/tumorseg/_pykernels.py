"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Each function loops in the same order as its compiled twin, so both backends
agree bit for bit on the convolution kernels.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, kernel, stride):
    kx, ky, kz = kernel
    sx, sy, sz = stride
    nb, nc = xp.shape[:2]
    win = sliding_window_view(xp, (kx, ky, kz), axis=(2, 3, 4))
    win = win[:, :, ::sx, ::sy, ::sz]
    ox, oy, oz = win.shape[2:5]
    # [b, c, ox, oy, oz, kx, ky, kz] -> [b, c, kx, ky, kz, ox, oy, oz]
    win = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(win).reshape(nb, nc * kx * ky * kz, ox * oy * oz)


def col2im3d(cols, padded_shape, kernel, stride):
    kx, ky, kz = kernel
    sx, sy, sz = stride
    nb, nc, px, py, pz = padded_shape
    ox = (px - kx) // sx + 1
    oy = (py - ky) // sy + 1
    oz = (pz - kz) // sz + 1
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    c6 = cols.reshape(nb, nc, kx, ky, kz, ox, oy, oz)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                xp[:, :, i:i + sx * ox:sx, j:j + sy * oy:sy, k:k + sz * oz:sz] += c6[:, :, i, j, k]
    return xp


def min_distances(a, b, chunk=2048):
    """For each row of ``a`` the Euclidean distance to the closest row of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(b) == 0:
        return np.full(len(a), np.inf)
    out = np.empty(len(a))
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        d = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + chunk] = np.sqrt(d.min(axis=1))
    return out


def _gather(v, i, j, k, cval):
    nx, ny, nz = v.shape[1:]
    ok = (i >= 0) & (j >= 0) & (k >= 0) & (i < nx) & (j < ny) & (k < nz)
    vals = v[:, np.clip(i, 0, nx - 1), np.clip(j, 0, ny - 1), np.clip(k, 0, nz - 1)]
    return np.where(ok[None], vals, cval)


def resample3d(vol, coords, order, cval=0.0):
    """Sample ``vol`` [c, X, Y, Z] at ``coords`` [3, x, y, z]; order 0 nearest, 1 trilinear."""
    v = np.asarray(vol, dtype=np.float64)
    q = np.asarray(coords, dtype=np.float64)
    if order == 0:
        i, j, k = (np.floor(q[d] + 0.5).astype(np.intp) for d in range(3))
        return _gather(v, i, j, k, cval).astype(vol.dtype, copy=False)
    i0, j0, k0 = (np.floor(q[d]).astype(np.intp) for d in range(3))
    tx, ty, tz = q[0] - i0, q[1] - j0, q[2] - k0
    out = (
        _gather(v, i0, j0, k0, cval) * (1 - tx) * (1 - ty) * (1 - tz)
        + _gather(v, i0 + 1, j0, k0, cval) * tx * (1 - ty) * (1 - tz)
        + _gather(v, i0, j0 + 1, k0, cval) * (1 - tx) * ty * (1 - tz)
        + _gather(v, i0, j0, k0 + 1, cval) * (1 - tx) * (1 - ty) * tz
        + _gather(v, i0 + 1, j0 + 1, k0, cval) * tx * ty * (1 - tz)
        + _gather(v, i0 + 1, j0, k0 + 1, cval) * tx * (1 - ty) * tz
        + _gather(v, i0, j0 + 1, k0 + 1, cval) * (1 - tx) * ty * tz
        + _gather(v, i0 + 1, j0 + 1, k0 + 1, cval) * tx * ty * tz
    )
    return out.astype(vol.dtype, copy=False)
