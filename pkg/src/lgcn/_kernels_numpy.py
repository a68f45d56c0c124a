"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Selected by setting LGCN_BACKEND=numpy; otherwise used as fallback when
numba is unavailable.  All convolutions here are cross-correlations with
zero padding and stride 1, which is the convention used throughout the
package.

Complex convolution is expressed as one real correlation with stacked
channels: for z = (A*X - B*Y) + i(B*X + A*Y), the input [X;Y] is
correlated against the block kernel [[A, -B], [B, A]].
"""

import numpy as np


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw):
    """xp: padded input [N,C,Hp,Wp] -> columns [N*H2*W2, C*kh*kw]."""
    n, c, hp, wp = xp.shape
    h2 = hp - kh + 1
    w2 = wp - kw + 1
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(n, h2, w2, c, kh, kw), strides=(s0, s2, s3, s1, s2, s3)
    )
    return np.ascontiguousarray(patches).reshape(n * h2 * w2, c * kh * kw), h2, w2


def conv2d_forward(x, w, pad):
    """Real correlation. x [N,C,H,W], w [F,C,K,K] -> y [N,F,H2,W2]."""
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, h2, w2 = _im2col(_pad2d(x, pad), kh, kw)
    y = cols @ w.reshape(f, -1).T
    return y.reshape(n, h2, w2, f).transpose(0, 3, 1, 2).copy()


def conv2d_grad_kernel(gy, x, pad, kh, kw):
    """Gradient w.r.t. w. gy [N,F,H2,W2], x [N,C,H,W] -> gw [F,C,K,K]."""
    n, f, h2, w2 = gy.shape
    c = x.shape[1]
    cols, _, _ = _im2col(_pad2d(x, pad), kh, kw)
    g = gy.transpose(0, 2, 3, 1).reshape(n * h2 * w2, f)
    return (g.T @ cols).reshape(f, c, kh, kw)


def conv2d_grad_input(gy, w, pad, h, wdt):
    """Gradient w.r.t. x: full correlation of gy with the flipped kernel."""
    f, c, kh, kw = w.shape
    # pad gy so that a valid correlation with the flipped kernel yields
    # the padded-input gradient, then crop the zero padding off
    wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()  # [C,F,K,K]
    gxp = conv2d_forward(_pad2d(gy, 0), wt, pad=kh - 1)
    if pad:
        gxp = gxp[:, :, pad:pad + h, pad:pad + wdt]
    return np.ascontiguousarray(gxp)


def _block_kernel(wr, wi):
    # [[A, -B], [B, A]] over the channel axis
    top = np.concatenate([wr, -wi], axis=1)
    bot = np.concatenate([wi, wr], axis=1)
    return np.concatenate([top, bot], axis=0)


def cconv2d_forward(xr, xi, wr, wi, pad):
    f = wr.shape[0]
    x = np.concatenate([xr, xi], axis=1)
    y = conv2d_forward(x, _block_kernel(wr, wi), pad)
    return np.ascontiguousarray(y[:, :f]), np.ascontiguousarray(y[:, f:])


def cconv2d_grad_input(gr, gi, wr, wi, pad, h, w):
    f = wr.shape[0]
    c = wr.shape[1]
    g = np.concatenate([gr, gi], axis=1)
    gx = conv2d_grad_input(g, _block_kernel(wr, wi), pad, h, w)
    return np.ascontiguousarray(gx[:, :c]), np.ascontiguousarray(gx[:, c:])


def cconv2d_grad_kernel(gr, gi, xr, xi, pad, kh, kw):
    # zr = A*X - B*Y, zi = B*X + A*Y
    ga = conv2d_grad_kernel(gr, xr, pad, kh, kw) + conv2d_grad_kernel(gi, xi, pad, kh, kw)
    gb = conv2d_grad_kernel(gi, xr, pad, kh, kw) - conv2d_grad_kernel(gr, xi, pad, kh, kw)
    return ga, gb
