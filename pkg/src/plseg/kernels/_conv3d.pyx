# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3x3 convolution kernels (zero padding, stride 1).

All spatial loops run over pre-padded inputs so the hot loops are
branch-free; padding is done by the caller. Parallel loops are
partitioned so that every output element is written by exactly one
thread with a fixed accumulation order, which keeps results bit-stable
across thread counts.
"""

from cython.parallel import prange

ctypedef fused real:
    float
    double


def forward_padded(real[:, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                   real[::1] b, real[:, :, :, ::1] y):
    """y[co] = b[co] + sum_ci conv(x[ci], w[co, ci]); xp is x padded by 1."""
    cdef Py_ssize_t co_n = y.shape[0], ci_n = xp.shape[0]
    cdef Py_ssize_t nx = y.shape[1], ny = y.shape[2], nz = y.shape[3]
    cdef Py_ssize_t co, ci, dx, dy, dz, ix, iy, iz
    cdef real wv

    for co in prange(co_n, nogil=True, schedule='static'):
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    y[co, ix, iy, iz] = b[co]
                for ci in range(ci_n):
                    for dx in range(3):
                        for dy in range(3):
                            for dz in range(3):
                                wv = w[co, ci, dx, dy, dz]
                                for iz in range(nz):
                                    y[co, ix, iy, iz] = y[co, ix, iy, iz] + wv * xp[ci, ix + dx, iy + dy, iz + dz]


def input_grad_padded(real[:, :, :, ::1] gyp, real[:, :, :, :, ::1] w,
                      real[:, :, :, ::1] gx):
    """gx[ci] = sum_co corr(gy[co], flip(w[co, ci])); gyp is gy padded by 1."""
    cdef Py_ssize_t co_n = gyp.shape[0], ci_n = gx.shape[0]
    cdef Py_ssize_t nx = gx.shape[1], ny = gx.shape[2], nz = gx.shape[3]
    cdef Py_ssize_t co, ci, dx, dy, dz, ix, iy, iz
    cdef real wv

    for ci in prange(ci_n, nogil=True, schedule='static'):
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    gx[ci, ix, iy, iz] = 0
                for co in range(co_n):
                    for dx in range(3):
                        for dy in range(3):
                            for dz in range(3):
                                wv = w[co, ci, 2 - dx, 2 - dy, 2 - dz]
                                for iz in range(nz):
                                    gx[ci, ix, iy, iz] = gx[ci, ix, iy, iz] + wv * gyp[co, ix + dx, iy + dy, iz + dz]


def param_grad_padded(real[:, :, :, ::1] xp, real[:, :, :, ::1] gy,
                      real[:, :, :, :, ::1] gw, real[::1] gb):
    """gw[co, ci, d] = sum_o gy[co, o] * xp[ci, o + d]; gb[co] = sum gy[co]."""
    cdef Py_ssize_t co_n = gy.shape[0], ci_n = xp.shape[0]
    cdef Py_ssize_t nx = gy.shape[1], ny = gy.shape[2], nz = gy.shape[3]
    cdef Py_ssize_t co, ci, dx, dy, dz, ix, iy, iz
    cdef real acc

    for co in prange(co_n, nogil=True, schedule='static'):
        acc = 0
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    acc = acc + gy[co, ix, iy, iz]
        gb[co] = acc
        for ci in range(ci_n):
            for dx in range(3):
                for dy in range(3):
                    for dz in range(3):
                        acc = 0
                        for ix in range(nx):
                            for iy in range(ny):
                                for iz in range(nz):
                                    acc = acc + gy[co, ix, iy, iz] * xp[ci, ix + dx, iy + dy, iz + dz]
                        gw[co, ci, dx, dy, dz] = acc
