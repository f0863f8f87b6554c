"""Hot convolution kernels with two interchangeable backends.

The inner loops of patch extraction/scatter (im2col/col2im) and depthwise
convolution dominate training time.  Each kernel exists twice: a pure
numpy implementation built from strided slice arithmetic, and a numba
@njit implementation of the same loops.  The numba backend is used when
available; set the environment variable ``URBANTAG_NO_NUMBA=1`` before
import (or call :func:`set_backend`) to force the numpy path.  Both
backends compute the same quantities; summation order may differ at
floating-point resolution.

``benchmarks/bench_kernels.py`` compares the two backends head to head.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_ENV_FLAG = "URBANTAG_NO_NUMBA"


# ---------------------------------------------------------------------------
# numpy backend: K*K strided slice passes, vectorized over batch and space.

def im2col_numpy(xp, kh, kw, stride, oh, ow):
    """Gather sliding patches from padded input (B,C,Hp,Wp) into
    (B, C, kh, kw, oh, ow)."""
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    return cols


def col2im_numpy(dcols, xp_shape, stride):
    """Scatter-add patch gradients back onto the padded input grid."""
    _, _, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += dcols[:, :, u, v]
    return dxp


def depthwise_forward_numpy(xp, w, stride, oh, ow):
    """Per-channel spatial convolution of padded input with (C,kh,kw) kernels."""
    b, c, _, _ = xp.shape
    _, kh, kw = w.shape
    out = np.zeros((b, c, oh, ow), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            out += w[:, u, v][None, :, None, None] * xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    return out


def depthwise_backward_numpy(dout, xp, w, stride):
    """Gradients of depthwise convolution: (d_padded_input, d_weights)."""
    _, _, oh, ow = dout.shape
    _, kh, kw = w.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
            dw[:, u, v] = np.einsum("bcij,bcij->c", dout, sl)
            dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += (
                w[:, u, v][None, :, None, None] * dout
            )
    return dxp, dw


# ---------------------------------------------------------------------------
# numba backend: fused loop nests, parallel over independent (b, c) slices.

if numba is not None:

    @njit(cache=True, parallel=True)
    def _im2col_numba(xp, kh, kw, stride, oh, ow):
        b, c, _, _ = xp.shape
        cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
        for bc in prange(b * c):
            i = bc // c
            j = bc % c
            for u in range(kh):
                for v in range(kw):
                    for y in range(oh):
                        for x in range(ow):
                            cols[i, j, u, v, y, x] = xp[i, j, y * stride + u, x * stride + v]
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_numba(dcols, hp, wp, stride):
        b, c, kh, kw, oh, ow = dcols.shape
        dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
        for bc in prange(b * c):
            i = bc // c
            j = bc % c
            for u in range(kh):
                for v in range(kw):
                    for y in range(oh):
                        for x in range(ow):
                            dxp[i, j, y * stride + u, x * stride + v] += dcols[i, j, u, v, y, x]
        return dxp

    @njit(cache=True, parallel=True)
    def _depthwise_forward_numba(xp, w, stride, oh, ow):
        b, c, _, _ = xp.shape
        _, kh, kw = w.shape
        out = np.zeros((b, c, oh, ow), dtype=xp.dtype)
        for bc in prange(b * c):
            i = bc // c
            j = bc % c
            for y in range(oh):
                for x in range(ow):
                    acc = out[i, j, y, x]
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[j, u, v] * xp[i, j, y * stride + u, x * stride + v]
                    out[i, j, y, x] = acc
        return out

    @njit(cache=True, parallel=True)
    def _depthwise_backward_input_numba(dout, w, hp, wp, stride):
        b, c, oh, ow = dout.shape
        _, kh, kw = w.shape
        dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
        for bc in prange(b * c):
            i = bc // c
            j = bc % c
            for y in range(oh):
                for x in range(ow):
                    g = dout[i, j, y, x]
                    for u in range(kh):
                        for v in range(kw):
                            dxp[i, j, y * stride + u, x * stride + v] += w[j, u, v] * g
        return dxp

    @njit(cache=True, parallel=True)
    def _depthwise_backward_weight_numba(dout, xp, kh, kw, stride):
        b, c, oh, ow = dout.shape
        dw = np.zeros((c, kh, kw), dtype=dout.dtype)
        for j in prange(c):
            for u in range(kh):
                for v in range(kw):
                    acc = dw[j, u, v]
                    for i in range(b):
                        for y in range(oh):
                            for x in range(ow):
                                acc += dout[i, j, y, x] * xp[i, j, y * stride + u, x * stride + v]
                    dw[j, u, v] = acc
        return dw

    def im2col_numba(xp, kh, kw, stride, oh, ow):
        return _im2col_numba(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)

    def col2im_numba(dcols, xp_shape, stride):
        return _col2im_numba(np.ascontiguousarray(dcols), xp_shape[2], xp_shape[3], stride)

    def depthwise_forward_numba(xp, w, stride, oh, ow):
        return _depthwise_forward_numba(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, oh, ow)

    def depthwise_backward_numba(dout, xp, w, stride):
        dout = np.ascontiguousarray(dout)
        xp = np.ascontiguousarray(xp)
        w = np.ascontiguousarray(w)
        dxp = _depthwise_backward_input_numba(dout, w, xp.shape[2], xp.shape[3], stride)
        dw = _depthwise_backward_weight_numba(dout, xp, w.shape[1], w.shape[2], stride)
        return dxp, dw


_BACKENDS = {
    "numpy": {
        "im2col": im2col_numpy,
        "col2im": col2im_numpy,
        "depthwise_forward": depthwise_forward_numpy,
        "depthwise_backward": depthwise_backward_numpy,
    }
}
if numba is not None:
    _BACKENDS["numba"] = {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "depthwise_forward": depthwise_forward_numba,
        "depthwise_backward": depthwise_backward_numba,
    }


def _default_backend() -> str:
    if os.environ.get(_ENV_FLAG, "").strip() not in ("", "0"):
        return "numpy"
    return "numba" if "numba" in _BACKENDS else "numpy"


_active_name = _default_backend()
_active = _BACKENDS[_active_name]


def backend_name() -> str:
    """Name of the kernel backend currently in use ("numba" or "numpy")."""
    return _active_name


def set_backend(name: str) -> None:
    """Select the kernel backend explicitly (overrides the env flag)."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


def im2col(xp, kh, kw, stride, oh, ow):
    return _active["im2col"](xp, kh, kw, stride, oh, ow)


def col2im(dcols, xp_shape, stride):
    return _active["col2im"](dcols, xp_shape, stride)


def depthwise_forward(xp, w, stride, oh, ow):
    return _active["depthwise_forward"](xp, w, stride, oh, ow)


def depthwise_backward(dout, xp, w, stride):
    return _active["depthwise_backward"](dout, xp, w, stride)
