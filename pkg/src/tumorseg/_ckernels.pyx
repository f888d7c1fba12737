# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`tumorseg._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, :, ::1] xp, int kx, int ky, int kz,
            int sx, int sy, int sz, real[:, :, ::1] cols):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t ox = cols.shape[2]
    cdef Py_ssize_t b, c, i, j, k, a, bb, cc, row, col
    cdef Py_ssize_t outx = (xp.shape[2] - kx) // sx + 1
    cdef Py_ssize_t outy = (xp.shape[3] - ky) // sy + 1
    cdef Py_ssize_t outz = (xp.shape[4] - kz) // sz + 1
    cdef real* src
    cdef real* dst
    for b in range(nb):
        for c in range(nc):
            for i in range(kx):
                for j in range(ky):
                    for k in range(kz):
                        row = ((c * kx + i) * ky + j) * kz + k
                        col = 0
                        for a in range(outx):
                            for bb in range(outy):
                                # one contiguous output row per (a, bb); input read with stride sz
                                src = &xp[b, c, a * sx + i, bb * sy + j, k]
                                dst = &cols[b, row, col]
                                if sz == 1:
                                    memcpy(dst, src, outz * sizeof(real))
                                else:
                                    for cc in range(outz):
                                        dst[cc] = src[cc * sz]
                                col += outz


def im2col3d(xp, kernel, stride):
    kx, ky, kz = kernel
    sx, sy, sz = stride
    xp = np.ascontiguousarray(xp)
    nb, nc, px, py, pz = xp.shape
    ox = (px - kx) // sx + 1
    oy = (py - ky) // sy + 1
    oz = (pz - kz) // sz + 1
    cols = np.empty((nb, nc * kx * ky * kz, ox * oy * oz), dtype=xp.dtype)
    _im2col(xp, kx, ky, kz, sx, sy, sz, cols)
    return cols


def _col2im(real[:, :, ::1] cols, int kx, int ky, int kz,
            int sx, int sy, int sz, real[:, :, :, :, ::1] xp):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t b, c, i, j, k, a, bb, cc, row, col
    cdef Py_ssize_t outx = (xp.shape[2] - kx) // sx + 1
    cdef Py_ssize_t outy = (xp.shape[3] - ky) // sy + 1
    cdef Py_ssize_t outz = (xp.shape[4] - kz) // sz + 1
    cdef real* src
    cdef real* dst
    for b in range(nb):
        for c in range(nc):
            for i in range(kx):
                for j in range(ky):
                    for k in range(kz):
                        row = ((c * kx + i) * ky + j) * kz + k
                        col = 0
                        for a in range(outx):
                            for bb in range(outy):
                                src = &cols[b, row, col]
                                dst = &xp[b, c, a * sx + i, bb * sy + j, k]
                                for cc in range(outz):
                                    dst[cc * sz] += src[cc]
                                col += outz


def col2im3d(cols, padded_shape, kernel, stride):
    kx, ky, kz = kernel
    sx, sy, sz = stride
    cols = np.ascontiguousarray(cols)
    xp = np.zeros(tuple(padded_shape), dtype=cols.dtype)
    _col2im(cols, kx, ky, kz, sx, sy, sz, xp)
    return xp


def min_distances(a, b):
    """For each row of ``a`` the Euclidean distance to the closest row of ``b``."""
    cdef double[:, ::1] pa = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] pb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = pa.shape[0], m = pb.shape[0], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    cdef double best, dx, dy, dz, d
    if m == 0:
        out.fill(np.inf)
        return out
    for i in range(n):
        best = 1e300
        for j in range(m):
            dx = pa[i, 0] - pb[j, 0]
            dy = pa[i, 1] - pb[j, 1]
            dz = pa[i, 2] - pb[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        res[i] = sqrt(best)
    return out


cdef inline double _fetch(double[:, :, :, ::1] v, Py_ssize_t ch, Py_ssize_t i,
                          Py_ssize_t j, Py_ssize_t k, double cval) nogil:
    if i < 0 or j < 0 or k < 0 or i >= v.shape[1] or j >= v.shape[2] or k >= v.shape[3]:
        return cval
    return v[ch, i, j, k]


def resample3d(vol, coords, int order, double cval=0.0):
    """Sample ``vol`` [c, X, Y, Z] at ``coords`` [3, x, y, z]; order 0 nearest, 1 trilinear."""
    src_dtype = vol.dtype
    cdef double[:, :, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float64)
    cdef double[:, :, :, ::1] q = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t nc = v.shape[0], nx = q.shape[1], ny = q.shape[2], nz = q.shape[3]
    out = np.empty((nc, nx, ny, nz), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t ch, a, b, c, i0, j0, k0
    cdef double fx, fy, fz, tx, ty, tz, acc
    for a in range(nx):
        for b in range(ny):
            for c in range(nz):
                fx = q[0, a, b, c]
                fy = q[1, a, b, c]
                fz = q[2, a, b, c]
                if order == 0:
                    i0 = <Py_ssize_t>floor(fx + 0.5)
                    j0 = <Py_ssize_t>floor(fy + 0.5)
                    k0 = <Py_ssize_t>floor(fz + 0.5)
                    for ch in range(nc):
                        o[ch, a, b, c] = _fetch(v, ch, i0, j0, k0, cval)
                else:
                    i0 = <Py_ssize_t>floor(fx)
                    j0 = <Py_ssize_t>floor(fy)
                    k0 = <Py_ssize_t>floor(fz)
                    tx = fx - i0
                    ty = fy - j0
                    tz = fz - k0
                    for ch in range(nc):
                        acc = (
                            _fetch(v, ch, i0, j0, k0, cval) * (1 - tx) * (1 - ty) * (1 - tz)
                            + _fetch(v, ch, i0 + 1, j0, k0, cval) * tx * (1 - ty) * (1 - tz)
                            + _fetch(v, ch, i0, j0 + 1, k0, cval) * (1 - tx) * ty * (1 - tz)
                            + _fetch(v, ch, i0, j0, k0 + 1, cval) * (1 - tx) * (1 - ty) * tz
                            + _fetch(v, ch, i0 + 1, j0 + 1, k0, cval) * tx * ty * (1 - tz)
                            + _fetch(v, ch, i0 + 1, j0, k0 + 1, cval) * tx * (1 - ty) * tz
                            + _fetch(v, ch, i0, j0 + 1, k0 + 1, cval) * (1 - tx) * ty * tz
                            + _fetch(v, ch, i0 + 1, j0 + 1, k0 + 1, cval) * tx * ty * tz
                        )
                        o[ch, a, b, c] = acc
    return out.astype(src_dtype, copy=False)
