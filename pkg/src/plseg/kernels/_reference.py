"""Pure-numpy fallback for the 3x3x3 convolution kernels.

Same contracts as the compiled module in ``_conv3d.pyx``: inputs are
pre-padded by one voxel on each spatial face, outputs are preallocated
by the caller. Implemented as shift-and-accumulate over the 27 kernel
taps, which avoids im2col-sized temporaries.
"""

import numpy as np


def forward_padded(xp, w, b, y):
    ci_n = xp.shape[0]
    nx, ny, nz = y.shape[1:]
    y[:] = b[:, None, None, None]
    for ci in range(ci_n):
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    slab = xp[ci, dx:dx + nx, dy:dy + ny, dz:dz + nz]
                    y += w[:, ci, dx, dy, dz][:, None, None, None] * slab[None]


def input_grad_padded(gyp, w, gx):
    co_n = gyp.shape[0]
    nx, ny, nz = gx.shape[1:]
    gx[:] = 0
    for co in range(co_n):
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    slab = gyp[co, dx:dx + nx, dy:dy + ny, dz:dz + nz]
                    gx += w[co, :, 2 - dx, 2 - dy, 2 - dz][:, None, None, None] * slab[None]


def param_grad_padded(xp, gy, gw, gb):
    nx, ny, nz = gy.shape[1:]
    gb[:] = gy.sum(axis=(1, 2, 3))
    gyf = gy.reshape(gy.shape[0], -1)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                slab = xp[:, dx:dx + nx, dy:dy + ny, dz:dz + nz]
                gw[:, :, dx, dy, dz] = gyf @ slab.reshape(slab.shape[0], -1).T
