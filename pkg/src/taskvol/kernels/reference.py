"""Pure-numpy reference kernels.

These are the fallback implementations selected when the compiled extension
is unavailable (or forced via ``TASKVOL_BACKEND=python``).  They define the
semantics; the compiled kernels must agree with them to floating rounding.

Convolution layout is channel-first: inputs ``(c_in, X, Y, Z)``, filters
``(c_out, c_in, k, k, k)``.  Padding is symmetric zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int, pad: int) -> np.ndarray:
    """Strided 3D cross-correlation of x with filter bank w."""
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != c_in:
        raise ValueError(f"input channels {x.shape[0]} != filter channels {c_in}")
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    # (c_in, Xo*, Yo*, Zo*, k, k, k) strided view, then subsample by stride
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    y = np.einsum("cxyzijk,ocijk->oxyz", win, w, optimize=True)
    if b is not None:
        y = y + b[:, None, None, None]
    return np.ascontiguousarray(y)


def conv3d_backward_input(dy: np.ndarray, w: np.ndarray, stride: int, pad: int,
                          x_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient of conv3d_forward w.r.t. its input."""
    k = w.shape[2]
    xo, yo, zo = dy.shape[1:]
    dxp = np.zeros((x_shape[0],) + tuple(n + 2 * pad for n in x_shape[1:]), dtype=dy.dtype)
    # one strided slice per kernel offset: slices with step `stride` never
    # self-overlap, so plain += accumulates correctly
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.einsum("oxyz,oc->cxyz", dy, w[:, :, i, j, l], optimize=True)
                dxp[:,
                    i:i + stride * xo:stride,
                    j:j + stride * yo:stride,
                    l:l + stride * zo:stride] += contrib
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv3d_backward_weights(x: np.ndarray, dy: np.ndarray, stride: int,
                            pad: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv3d_forward w.r.t. filters and bias."""
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    dw = np.einsum("oxyz,cxyzijk->ocijk", dy, win, optimize=True)
    db = dy.sum(axis=(1, 2, 3))
    return np.ascontiguousarray(dw), np.ascontiguousarray(db)


def trilinear_gather(src: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     zs: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear interpolation of src at fractional voxel coordinates.

    Sample points outside the source grid contribute ``fill`` through the
    out-of-range corners, so a point fully outside returns exactly ``fill``.
    """
    nx, ny, nz = src.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    z0 = np.floor(zs).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    fz = zs - z0

    out = np.zeros(xs.shape, dtype=src.dtype)
    for dx in (0, 1):
        wx = (1.0 - fx) if dx == 0 else fx
        cx = x0 + dx
        for dy_ in (0, 1):
            wy = (1.0 - fy) if dy_ == 0 else fy
            cy = y0 + dy_
            for dz in (0, 1):
                wz = (1.0 - fz) if dz == 0 else fz
                cz = z0 + dz
                inside = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny) & (cz >= 0) & (cz < nz)
                vals = np.full(xs.shape, fill, dtype=src.dtype)
                vals[inside] = src[cx[inside], cy[inside], cz[inside]]
                out += (wx * wy * wz) * vals
    return out


def nearest_gather(src: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                   zs: np.ndarray, fill: float) -> np.ndarray:
    """Nearest-neighbour lookup of src at fractional voxel coordinates.

    Rounds half up, matching the compiled kernel.
    """
    nx, ny, nz = src.shape
    cx = np.floor(xs + 0.5).astype(np.int64)
    cy = np.floor(ys + 0.5).astype(np.int64)
    cz = np.floor(zs + 0.5).astype(np.int64)
    inside = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny) & (cz >= 0) & (cz < nz)
    out = np.full(xs.shape, fill, dtype=src.dtype)
    out[inside] = src[cx[inside], cy[inside], cz[inside]]
    return out
