"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``col2im``, ``maxpool2_forward``, ``maxpool2_backward``,
``fnv1a64``) dispatch to the numba versions when numba imports cleanly and
``DVA_DISABLE_NUMBA`` is not set to ``1``; ``im2col`` always uses the numpy
strided copy, which is faster than the compiled loop.  Both flavours
stay importable under explicit ``*_numba`` / ``*_numpy`` names so tests and
``benchmarks/bench_kernels.py`` can compare them.

Array conventions:
  im2col:  x (n, c, h, w) -> cols (c*kh*kw, n*oh*ow); row (c*kh + i)*kw + j,
           column b*oh*ow + oy*ow + ox
  col2im:  the exact adjoint (scatter-add) of im2col
  maxpool: 2x2 windows, stride 2; indices are flat offsets into each h*w plane,
           ties resolved to the first window element in row-major order.
"""

from __future__ import annotations

import os

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DVA_DISABLE_NUMBA", "0") != "1"


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# pure numpy


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (c, kh, kw, n, oh, ow)
    cols = win.transpose(1, 4, 5, 0, 2, 3)
    return np.ascontiguousarray(cols).reshape(c * kh * kw, n * oh * ow)


def col2im_numpy(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def maxpool2_forward_numpy(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h2)[:, None] + local // 2
    colsi = 2 * np.arange(w2)[None, :] + local % 2
    return np.ascontiguousarray(out), (rows * w + colsi).astype(np.int64)


def maxpool2_backward_numpy(d_out, idx, shape):
    n, c, h, w = shape
    dx = np.zeros((n, c, h * w), dtype=d_out.dtype)
    np.put_along_axis(dx, idx.reshape(n, c, -1), d_out.reshape(n, c, -1), axis=2)
    return dx.reshape(n, c, h, w)


def fnv1a64_numpy(data) -> int:
    # Inherently sequential; plain Python is the fallback.
    h = FNV_OFFSET
    for b in memoryview(data).cast("B"):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


# --------------------------------------------------------------------------
# numba

if HAVE_NUMBA:

    @njit(cache=True)
    def _valid_range(o_count, stride, offset, size):
        # o in [lo, hi) keeps 0 <= o*stride + offset < size
        lo = 0
        while lo < o_count and lo * stride + offset < 0:
            lo += 1
        hi = o_count
        while hi > lo and (hi - 1) * stride + offset >= size:
            hi -= 1
        return lo, hi

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
        n, c, h, w = x.shape
        L = oh * ow
        cols = np.zeros((c * kh * kw, n * L), dtype=x.dtype)
        for ch in range(c):
            for i in range(kh):
                ylo, yhi = _valid_range(oh, stride, i - pad, h)
                for j in range(kw):
                    xlo, xhi = _valid_range(ow, stride, j - pad, w)
                    row = cols[(ch * kh + i) * kw + j]
                    off = j - pad
                    for b in range(n):
                        for oy in range(ylo, yhi):
                            src = x[b, ch, oy * stride + i - pad]
                            base = b * L + oy * ow
                            for ox in range(xlo, xhi):
                                row[base + ox] = src[ox * stride + off]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
        L = oh * ow
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for ch in range(c):
            for i in range(kh):
                ylo, yhi = _valid_range(oh, stride, i - pad, h)
                for j in range(kw):
                    xlo, xhi = _valid_range(ow, stride, j - pad, w)
                    row = cols[(ch * kh + i) * kw + j]
                    off = j - pad
                    for b in range(n):
                        for oy in range(ylo, yhi):
                            dst = out[b, ch, oy * stride + i - pad]
                            base = b * L + oy * ow
                            for ox in range(xlo, xhi):
                                dst[ox * stride + off] += row[base + ox]
        return out

    @njit(cache=True)
    def _maxpool2_fwd_nb(x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        out = np.empty((n, c, h2, w2), dtype=x.dtype)
        idx = np.empty((n, c, h2, w2), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for i in range(h2):
                    for j in range(w2):
                        best = x[b, ch, 2 * i, 2 * j]
                        bi = (2 * i) * w + 2 * j
                        for di in range(2):
                            for dj in range(2):
                                v = x[b, ch, 2 * i + di, 2 * j + dj]
                                if v > best:
                                    best = v
                                    bi = (2 * i + di) * w + 2 * j + dj
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = bi
        return out, idx

    @njit(cache=True)
    def _maxpool2_bwd_nb(d_out, idx, n, c, h, w):
        dx = np.zeros((n, c, h * w), dtype=d_out.dtype)
        h2, w2 = d_out.shape[2], d_out.shape[3]
        for b in range(n):
            for ch in range(c):
                for i in range(h2):
                    for j in range(w2):
                        dx[b, ch, idx[b, ch, i, j]] += d_out[b, ch, i, j]
        return dx.reshape(n, c, h, w)

    @njit(cache=True)
    def _fnv1a64_nb(buf):
        h = numba.uint64(FNV_OFFSET)
        prime = numba.uint64(FNV_PRIME)
        for k in range(buf.shape[0]):
            h = (h ^ numba.uint64(buf[k])) * prime
        return h

    def im2col_numba(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = out_size(h, kh, stride, pad)
        ow = out_size(w, kw, stride, pad)
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)

    def col2im_numba(cols, shape, kh, kw, stride, pad):
        n, c, h, w = shape
        oh = out_size(h, kh, stride, pad)
        ow = out_size(w, kw, stride, pad)
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, oh, ow)

    def maxpool2_forward_numba(x):
        return _maxpool2_fwd_nb(np.ascontiguousarray(x))

    def maxpool2_backward_numba(d_out, idx, shape):
        n, c, h, w = shape
        return _maxpool2_bwd_nb(np.ascontiguousarray(d_out), np.ascontiguousarray(idx), n, c, h, w)

    def fnv1a64_numba(data) -> int:
        buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        return int(_fnv1a64_nb(buf))


if USE_NUMBA:
    # im2col is a pure gather that numpy's strided copy already performs at
    # memory speed; the compiled loop measured ~2x slower, so both backends
    # share the numpy version (the numba twin stays for tests / benchmarks).
    im2col = im2col_numpy
    col2im = col2im_numba
    maxpool2_forward = maxpool2_forward_numba
    maxpool2_backward = maxpool2_backward_numba
    fnv1a64 = fnv1a64_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2_forward = maxpool2_forward_numpy
    maxpool2_backward = maxpool2_backward_numpy
    fnv1a64 = fnv1a64_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
