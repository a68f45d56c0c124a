"""Shared oracles for the test suite.

The naive convolutions here are written as plain Python loops on numpy
complex scalars, deliberately independent of the library's im2col/numba
kernels, so agreement is meaningful.
"""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_corr2d(x, w, padding):
    """Real cross-correlation oracle: x [N,C,H,W], w [F,C,K,K], stride 1."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for b in range(k):
                                acc += xp[ni, ci, i + a, j + b] * w[fi, ci, a, b]
                    out[ni, fi, i, j] = acc
    return out


def naive_ccorr2d(x, w, padding):
    """Complex cross-correlation oracle on numpy complex arrays."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, f, oh, ow), dtype=complex)
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 + 0.0j
                    for ci in range(c):
                        for a in range(k):
                            for b in range(k):
                                acc += xp[ni, ci, i + a, j + b] * w[fi, ci, a, b]
                    out[ni, fi, i, j] = acc
    return out


def to_complex_array(ct):
    """ComplexTensor -> numpy complex ndarray."""
    return ct.re + 1j * ct.im


def random_ctensor(rng, shape):
    from lgcn.ctensor import ComplexTensor
    return ComplexTensor(rng.standard_normal(shape), rng.standard_normal(shape))
