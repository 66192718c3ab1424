"""Hot numerical kernels with a compiled core and a pure-numpy fallback.

The compiled Cython extension is preferred when importable; otherwise the
numpy reference implementations are used.  ``TASKVOL_BACKEND`` overrides the
choice: ``python`` forces the fallback everywhere, ``cython`` requires the
extension and routes everything through it (raising if it is missing).
``BACKEND`` records which core was selected.

By default each call is routed to whichever implementation measures faster
(see benchmarks/bench_kernels.py): the resampling gathers and
single-input-channel forward convolution go to the compiled core, while
multi-channel convolution stays on the numpy path, whose einsum contraction
is BLAS-backed and beats a straightforward compiled loop.

The public functions normalize inputs (contiguity, dtype, coordinate
shapes) so both backends are drop-in equivalent.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import reference

_requested = os.environ.get("TASKVOL_BACKEND", "").strip().lower()

try:
    if _requested == "python":
        raise ImportError("TASKVOL_BACKEND=python")
    from . import _core
except ImportError as _exc:
    _core = None
    if _requested == "cython":
        raise ImportError(
            f"TASKVOL_BACKEND=cython but the compiled extension is unavailable: {_exc}"
        ) from _exc
    if _requested != "python":
        warnings.warn(
            f"compiled kernels unavailable ({_exc}); using numpy fallback",
            RuntimeWarning,
            stacklevel=2,
        )

BACKEND = "cython" if _core is not None else "python"
_forced = _core if _requested == "cython" else None
_gather_impl = _core if _core is not None else reference


def compiled_available() -> bool:
    return _core is not None


def compiled_module():
    """The compiled extension module, or None.  Used by the benchmark and
    the backend-equivalence tests."""
    return _core


def _as_real(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def conv3d_forward(x, w, b, stride: int, pad: int, impl=None):
    x = _as_real(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if b is not None:
        b = np.ascontiguousarray(b, dtype=x.dtype)
    if impl is None:
        # single-channel contractions are too small for BLAS to win
        fast_single = _core if (_core is not None and w.shape[1] == 1) \
            else reference
        impl = _forced or fast_single
    return impl.conv3d_forward(x, w, b, stride, pad)


def conv3d_backward_input(dy, w, stride: int, pad: int, x_shape, impl=None):
    dy = _as_real(dy)
    w = np.ascontiguousarray(w, dtype=dy.dtype)
    impl = impl or _forced or reference
    return impl.conv3d_backward_input(dy, w, stride, pad, tuple(x_shape))


def conv3d_backward_weights(x, dy, stride: int, pad: int, k: int, impl=None):
    x = _as_real(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    impl = impl or _forced or reference
    return impl.conv3d_backward_weights(x, dy, stride, pad, k)


def trilinear_gather(src, xs, ys, zs, fill: float = 0.0, impl=None):
    """Trilinear interpolation of ``src`` at voxel coordinates; the output
    has the shape of the coordinate arrays."""
    src = _as_real(src)
    xs = np.asarray(xs, dtype=np.float64)
    shape = xs.shape
    flat = [np.ascontiguousarray(np.asarray(c, dtype=np.float64).reshape(-1)) for c in (xs, ys, zs)]
    impl = impl or _forced or _gather_impl
    out = impl.trilinear_gather(src, flat[0], flat[1], flat[2], float(fill))
    return np.asarray(out).reshape(shape)


def nearest_gather(src, xs, ys, zs, fill: float = 0.0, impl=None):
    """Nearest-neighbour lookup (round half up) at voxel coordinates."""
    src = _as_real(src)
    xs = np.asarray(xs, dtype=np.float64)
    shape = xs.shape
    flat = [np.ascontiguousarray(np.asarray(c, dtype=np.float64).reshape(-1)) for c in (xs, ys, zs)]
    impl = impl or _forced or _gather_impl
    out = impl.nearest_gather(src, flat[0], flat[1], flat[2], float(fill))
    return np.asarray(out).reshape(shape)


__all__ = [
    "BACKEND",
    "compiled_available",
    "compiled_module",
    "conv3d_forward",
    "conv3d_backward_input",
    "conv3d_backward_weights",
    "trilinear_gather",
    "nearest_gather",
    "reference",
]
