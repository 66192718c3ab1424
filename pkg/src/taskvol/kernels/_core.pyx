# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: strided 3D convolution (forward and both gradients)
and trilinear/nearest resampling gathers.

Semantics match taskvol.kernels.reference; accumulation order is fixed, so
results are deterministic.  float32 and float64 are supported via fused
types.
"""

import numpy as np

cdef extern from "math.h" nogil:
    double floor(double x)

ctypedef fused real:
    float
    double


def conv3d_forward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, b, int stride, int pad):
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t c_in = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t nx = x.shape[1], ny = x.shape[2], nz = x.shape[3]
    cdef Py_ssize_t xo = (nx + 2 * pad - k) // stride + 1
    cdef Py_ssize_t yo = (ny + 2 * pad - k) // stride + 1
    cdef Py_ssize_t zo = (nz + 2 * pad - k) // stride + 1

    dtype = np.float32 if real is float else np.float64
    y_arr = np.zeros((c_out, xo, yo, zo), dtype=dtype)
    cdef real[:, :, :, ::1] y = y_arr
    cdef real[::1] bias = None
    cdef bint has_bias = b is not None
    if has_bias:
        bias = np.ascontiguousarray(b, dtype=dtype)

    cdef Py_ssize_t co, ci, ox, oy, oz, i, j, l, xi, yi, zi
    cdef real acc
    with nogil:
        for co in range(c_out):
            for ox in range(xo):
                for oy in range(yo):
                    for oz in range(zo):
                        acc = 0
                        for ci in range(c_in):
                            for i in range(k):
                                xi = ox * stride + i - pad
                                if xi < 0 or xi >= nx:
                                    continue
                                for j in range(k):
                                    yi = oy * stride + j - pad
                                    if yi < 0 or yi >= ny:
                                        continue
                                    for l in range(k):
                                        zi = oz * stride + l - pad
                                        if zi < 0 or zi >= nz:
                                            continue
                                        acc += x[ci, xi, yi, zi] * w[co, ci, i, j, l]
                        if has_bias:
                            acc += bias[co]
                        y[co, ox, oy, oz] = acc
    return y_arr


def conv3d_backward_input(real[:, :, :, ::1] dy, real[:, :, :, :, ::1] w, int stride, int pad, x_shape):
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t c_in = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t nx = x_shape[1], ny = x_shape[2], nz = x_shape[3]
    cdef Py_ssize_t xo = dy.shape[1], yo = dy.shape[2], zo = dy.shape[3]

    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((c_in, nx, ny, nz), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr

    cdef Py_ssize_t co, ci, ox, oy, oz, i, j, l, xi, yi, zi
    cdef real g
    with nogil:
        for co in range(c_out):
            for ox in range(xo):
                for oy in range(yo):
                    for oz in range(zo):
                        g = dy[co, ox, oy, oz]
                        if g == 0:
                            continue
                        for ci in range(c_in):
                            for i in range(k):
                                xi = ox * stride + i - pad
                                if xi < 0 or xi >= nx:
                                    continue
                                for j in range(k):
                                    yi = oy * stride + j - pad
                                    if yi < 0 or yi >= ny:
                                        continue
                                    for l in range(k):
                                        zi = oz * stride + l - pad
                                        if zi < 0 or zi >= nz:
                                            continue
                                        dx[ci, xi, yi, zi] += g * w[co, ci, i, j, l]
    return dx_arr


def conv3d_backward_weights(real[:, :, :, ::1] x, real[:, :, :, ::1] dy, int stride, int pad, int k):
    cdef Py_ssize_t c_in = x.shape[0]
    cdef Py_ssize_t nx = x.shape[1], ny = x.shape[2], nz = x.shape[3]
    cdef Py_ssize_t c_out = dy.shape[0]
    cdef Py_ssize_t xo = dy.shape[1], yo = dy.shape[2], zo = dy.shape[3]

    dtype = np.float32 if real is float else np.float64
    dw_arr = np.zeros((c_out, c_in, k, k, k), dtype=dtype)
    db_arr = np.zeros(c_out, dtype=dtype)
    cdef real[:, :, :, :, ::1] dw = dw_arr
    cdef real[::1] db = db_arr

    cdef Py_ssize_t co, ci, ox, oy, oz, i, j, l, xi, yi, zi
    cdef real g
    with nogil:
        for co in range(c_out):
            for ox in range(xo):
                for oy in range(yo):
                    for oz in range(zo):
                        g = dy[co, ox, oy, oz]
                        db[co] += g
                        if g == 0:
                            continue
                        for ci in range(c_in):
                            for i in range(k):
                                xi = ox * stride + i - pad
                                if xi < 0 or xi >= nx:
                                    continue
                                for j in range(k):
                                    yi = oy * stride + j - pad
                                    if yi < 0 or yi >= ny:
                                        continue
                                    for l in range(k):
                                        zi = oz * stride + l - pad
                                        if zi < 0 or zi >= nz:
                                            continue
                                        dw[co, ci, i, j, l] += g * x[ci, xi, yi, zi]
    return dw_arr, db_arr


def trilinear_gather(real[:, :, ::1] src, double[::1] xs, double[::1] ys, double[::1] zs, double fill):
    cdef Py_ssize_t nx = src.shape[0], ny = src.shape[1], nz = src.shape[2]
    cdef Py_ssize_t n = xs.shape[0]

    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr

    cdef Py_ssize_t p, dx, dy, dz
    cdef Py_ssize_t x0, y0, z0, cx, cy, cz
    cdef double fx, fy, fz, wx, wy, wz, acc, v
    with nogil:
        for p in range(n):
            x0 = <Py_ssize_t>floor(xs[p])
            y0 = <Py_ssize_t>floor(ys[p])
            z0 = <Py_ssize_t>floor(zs[p])
            fx = xs[p] - x0
            fy = ys[p] - y0
            fz = zs[p] - z0
            acc = 0.0
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                cx = x0 + dx
                for dy in range(2):
                    wy = fy if dy == 1 else 1.0 - fy
                    cy = y0 + dy
                    for dz in range(2):
                        wz = fz if dz == 1 else 1.0 - fz
                        cz = z0 + dz
                        if 0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz:
                            v = src[cx, cy, cz]
                        else:
                            v = fill
                        acc += wx * wy * wz * v
            out[p] = <real>acc
    return out_arr


def nearest_gather(real[:, :, ::1] src, double[::1] xs, double[::1] ys, double[::1] zs, double fill):
    cdef Py_ssize_t nx = src.shape[0], ny = src.shape[1], nz = src.shape[2]
    cdef Py_ssize_t n = xs.shape[0]

    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr

    cdef Py_ssize_t p, cx, cy, cz
    with nogil:
        for p in range(n):
            cx = <Py_ssize_t>floor(xs[p] + 0.5)
            cy = <Py_ssize_t>floor(ys[p] + 0.5)
            cz = <Py_ssize_t>floor(zs[p] + 0.5)
            if 0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz:
                out[p] = src[cx, cy, cz]
            else:
                out[p] = <real>fill
    return out_arr
