"""Numba-jitted direct-loop convolution kernels (the default hot path).

Same contracts as _kernels_numpy: stride-1 zero-padded cross-correlation,
real and complex (split-plane) variants.  Loop order is fixed, so
reductions are deterministic for a given dtype.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=True, nogil=True)


@njit(**_JIT)
def conv2d_forward(x, w, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    h2 = h + 2 * pad - kh + 1
    w2 = wd + 2 * pad - kw + 1
    y = np.zeros((n, f, h2, w2), dtype=x.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[ff, cc, p, q]
                        if wv == 0.0:
                            continue
                        for i in range(h2):
                            xi = i + p - pad
                            if xi < 0 or xi >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    y[nn, ff, i, j] += wv * x[nn, cc, xi, xj]
    return y


@njit(**_JIT)
def conv2d_grad_input(gy, w, pad, h, wd):
    n, f, h2, w2 = gy.shape
    _, c, kh, kw = w.shape
    gx = np.zeros((n, c, h, wd), dtype=gy.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[ff, cc, p, q]
                        if wv == 0.0:
                            continue
                        for i in range(h2):
                            xi = i + p - pad
                            if xi < 0 or xi >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    gx[nn, cc, xi, xj] += wv * gy[nn, ff, i, j]
    return gx


@njit(**_JIT)
def conv2d_grad_kernel(gy, x, pad, kh, kw):
    n, f, h2, w2 = gy.shape
    c, h, wd = x.shape[1], x.shape[2], x.shape[3]
    gw = np.zeros((f, c, kh, kw), dtype=gy.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        acc = 0.0
                        for i in range(h2):
                            xi = i + p - pad
                            if xi < 0 or xi >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    acc += gy[nn, ff, i, j] * x[nn, cc, xi, xj]
                        gw[ff, cc, p, q] += acc
    return gw


@njit(**_JIT)
def cconv2d_forward(xr, xi, wr, wi, pad):
    n, c, h, wd = xr.shape
    f, _, kh, kw = wr.shape
    h2 = h + 2 * pad - kh + 1
    w2 = wd + 2 * pad - kw + 1
    zr = np.zeros((n, f, h2, w2), dtype=xr.dtype)
    zi = np.zeros((n, f, h2, w2), dtype=xr.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        a = wr[ff, cc, p, q]
                        b = wi[ff, cc, p, q]
                        for i in range(h2):
                            xidx = i + p - pad
                            if xidx < 0 or xidx >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    xv = xr[nn, cc, xidx, xj]
                                    yv = xi[nn, cc, xidx, xj]
                                    zr[nn, ff, i, j] += a * xv - b * yv
                                    zi[nn, ff, i, j] += b * xv + a * yv
    return zr, zi


@njit(**_JIT)
def cconv2d_grad_input(gr, gi, wr, wi, pad, h, wd):
    n, f, h2, w2 = gr.shape
    c, kh, kw = wr.shape[1], wr.shape[2], wr.shape[3]
    gxr = np.zeros((n, c, h, wd), dtype=gr.dtype)
    gxi = np.zeros((n, c, h, wd), dtype=gr.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        a = wr[ff, cc, p, q]
                        b = wi[ff, cc, p, q]
                        for i in range(h2):
                            xidx = i + p - pad
                            if xidx < 0 or xidx >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    gvr = gr[nn, ff, i, j]
                                    gvi = gi[nn, ff, i, j]
                                    gxr[nn, cc, xidx, xj] += a * gvr + b * gvi
                                    gxi[nn, cc, xidx, xj] += a * gvi - b * gvr
    return gxr, gxi


@njit(**_JIT)
def cconv2d_grad_kernel(gr, gi, xr, xi, pad, kh, kw):
    n, f, h2, w2 = gr.shape
    c, h, wd = xr.shape[1], xr.shape[2], xr.shape[3]
    ga = np.zeros((f, c, kh, kw), dtype=gr.dtype)
    gb = np.zeros((f, c, kh, kw), dtype=gr.dtype)
    for nn in range(n):
        for ff in range(f):
            for cc in range(c):
                for p in range(kh):
                    for q in range(kw):
                        acca = 0.0
                        accb = 0.0
                        for i in range(h2):
                            xidx = i + p - pad
                            if xidx < 0 or xidx >= h:
                                continue
                            for j in range(w2):
                                xj = j + q - pad
                                if 0 <= xj < wd:
                                    gvr = gr[nn, ff, i, j]
                                    gvi = gi[nn, ff, i, j]
                                    acca += gvr * xr[nn, cc, xidx, xj] + gvi * xi[nn, cc, xidx, xj]
                                    accb += gvi * xr[nn, cc, xidx, xj] - gvr * xi[nn, cc, xidx, xj]
                        ga[ff, cc, p, q] += acca
                        gb[ff, cc, p, q] += accb
    return ga, gb
