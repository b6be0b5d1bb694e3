"""Hot convolution kernels: im2col / col2im with a numba and a numpy backend.

Convolution is realized as patch expansion (im2col) + one BLAS matmul; the
backward pass scatters gradients back with col2im. Those two loops dominate
training time, so they are JIT-compiled with numba when available.

Backend selection, in order:
  1. the ``FIXEDHEAD_BACKEND`` environment variable ("numba", "numpy", "auto");
  2. ``set_backend(name)`` at runtime (used by tests and the benchmark);
  3. "auto" picks numba when importable, else falls back to pure numpy.

Both backends produce bitwise-identical outputs: im2col is a pure gather and
the col2im accumulation visits kernel offsets in the same (i, j) order.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (len(args) == 1 and callable(args[0])) else args[0]


_VALID = ("numba", "numpy", "auto")


def _resolve(name: str) -> str:
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("backend 'numba' requested but numba is not importable")
    return name


_backend = _resolve(os.environ.get("FIXEDHEAD_BACKEND", "auto").lower())


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    _backend = _resolve(name)


@njit(cache=True)
def _im2col_numba(xp, kh, kw, stride, out_h, out_w, cols):
    n, c = xp.shape[0], xp.shape[1]
    for ni in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = ci * kh * kw + i * kw + j
                    for oh in range(out_h):
                        ih = i + stride * oh
                        for ow in range(out_w):
                            cols[ni, row, oh * out_w + ow] = xp[ni, ci, ih, j + stride * ow]


@njit(cache=True)
def _col2im_numba(cols, kh, kw, stride, out_h, out_w, dxp):
    n, c = dxp.shape[0], dxp.shape[1]
    # kernel offsets outermost so accumulation order matches the numpy path
    for i in range(kh):
        for j in range(kw):
            for ni in range(n):
                for ci in range(c):
                    row = ci * kh * kw + i * kw + j
                    for oh in range(out_h):
                        ih = i + stride * oh
                        for ow in range(out_w):
                            dxp[ni, ci, ih, j + stride * ow] += cols[ni, row, oh * out_w + ow]


def _im2col_numpy(xp, kh, kw, stride, out_h, out_w):
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im_numpy(cols, kh, kw, stride, out_h, out_w, xp_shape):
    dxp = np.zeros(xp_shape, dtype=np.float64)
    n, c = xp_shape[0], xp_shape[1]
    cr = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cr[
                :, :, i, j
            ]
    return dxp


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Expand padded input (N,C,Hp,Wp) to patch columns (N, C*kh*kw, out_h*out_w)."""
    if _backend == "numba":
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c * kh * kw, out_h * out_w), dtype=np.float64)
        _im2col_numba(xp, kh, kw, stride, out_h, out_w, cols)
        return cols
    return _im2col_numpy(xp, kh, kw, stride, out_h, out_w)


def col2im(
    cols: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int, xp_shape
) -> np.ndarray:
    """Scatter-add patch-column gradients back to the padded input shape."""
    if _backend == "numba":
        dxp = np.zeros(xp_shape, dtype=np.float64)
        _col2im_numba(cols, kh, kw, stride, out_h, out_w, dxp)
        return dxp
    return _col2im_numpy(cols, kh, kw, stride, out_h, out_w, xp_shape)
