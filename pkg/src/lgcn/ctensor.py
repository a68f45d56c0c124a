"""Split-plane complex tensors and complex 2D convolution.

Complex values are stored as paired real arrays (re, im) since every
formula in this codebase is written on real components.  Convolution is
stride-1 zero-padded cross-correlation:

    Z = W * H = (A*X - B*Y) + i(B*X + A*Y)

for kernel W = A + iB and input H = X + iY.
"""

import numpy as np

from . import backend


class DimensionError(ValueError):
    """Shape mismatch between complex operands."""


class ComplexTensor:
    """Dense complex array as a (re, im) pair of equal-shape real arrays."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = np.asarray(re)
        im = np.zeros_like(re) if im is None else np.asarray(im)
        if re.shape != im.shape:
            raise DimensionError(f"re shape {re.shape} != im shape {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    @property
    def dtype(self):
        return self.re.dtype

    def astype(self, dtype):
        return ComplexTensor(self.re.astype(dtype), self.im.astype(dtype))

    def copy(self):
        return ComplexTensor(self.re.copy(), self.im.copy())

    def reshape(self, *shape):
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def magnitude(self):
        return np.sqrt(self.re ** 2 + self.im ** 2)

    def conj(self):
        return ComplexTensor(self.re, -self.im)

    def __add__(self, other):
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def __sub__(self, other):
        return ComplexTensor(self.re - other.re, self.im - other.im)

    def __mul__(self, scalar):
        return ComplexTensor(self.re * scalar, self.im * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"

    @staticmethod
    def zeros(shape, dtype=np.float64):
        return ComplexTensor(np.zeros(shape, dtype), np.zeros(shape, dtype))

    def check_finite(self, where=""):
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise FloatingPointError(f"non-finite complex values {where}".strip())
        return self


class ComplexKernel:
    """Convolution weights [C_out, C_in, K, K] with K odd."""

    def __init__(self, weights: ComplexTensor):
        if weights.re.ndim != 4:
            raise DimensionError(f"kernel must be 4-D, got shape {weights.shape}")
        c_out, c_in, kh, kw = weights.shape
        if kh != kw or kh % 2 == 0:
            raise DimensionError(f"kernel window must be square and odd, got {kh}x{kw}")
        if c_out < 1 or c_in < 1:
            raise DimensionError("kernel needs c_out, c_in >= 1")
        self.weights = weights

    @property
    def shape(self):
        return self.weights.shape

    @property
    def ksize(self):
        return self.weights.shape[-1]


def cmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Elementwise complex product (broadcasting allowed)."""
    try:
        re = a.re * b.re - a.im * b.im
        im = a.im * b.re + a.re * b.im
    except ValueError as exc:
        raise DimensionError(f"cmul shapes {a.shape} and {b.shape}: {exc}") from None
    return ComplexTensor(re, im)


def _check_conv_shapes(input: ComplexTensor, kernel: ComplexKernel, padding: int):
    if input.re.ndim != 4:
        raise DimensionError(f"conv input must be [N,C,H,W], got {input.shape}")
    n, c, h, w = input.shape
    c_out, c_in, k, _ = kernel.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels, kernel expects {c_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def _c(x):
    return np.ascontiguousarray(x)


def cconv2d(input: ComplexTensor, kernel: ComplexKernel, padding: int = 0) -> ComplexTensor:
    """Complex spatial convolution, output H' = H + 2*padding - K + 1."""
    _check_conv_shapes(input, kernel, padding)
    w = kernel.weights
    zr, zi = backend.cconv2d_forward(_c(input.re), _c(input.im), _c(w.re), _c(w.im), padding)
    return ComplexTensor(zr, zi)


def cconv2d_backward(grad_out: ComplexTensor, input: ComplexTensor,
                     kernel: ComplexKernel, padding: int = 0):
    """Adjoints of cconv2d under the real-pair parameterization.

    Returns (grad_input, grad_kernel) for a real scalar loss whose
    gradient w.r.t. the output is grad_out.
    """
    _check_conv_shapes(input, kernel, padding)
    n, c, h, w = input.shape
    k = kernel.ksize
    expect = (n, kernel.shape[0], h + 2 * padding - k + 1, w + 2 * padding - k + 1)
    if grad_out.shape != expect:
        raise DimensionError(f"grad_out shape {grad_out.shape}, expected {expect}")
    kw = kernel.weights
    gr, gi = _c(grad_out.re), _c(grad_out.im)
    gxr, gxi = backend.cconv2d_grad_input(gr, gi, _c(kw.re), _c(kw.im), padding, h, w)
    gar, gab = backend.cconv2d_grad_kernel(gr, gi, _c(input.re), _c(input.im), padding, k, k)
    return ComplexTensor(gxr, gxi), ComplexTensor(gar, gab)


def conv2d(x, w, padding=0):
    """Real correlation, same padding/stride conventions."""
    return backend.conv2d_forward(_c(x), _c(w), padding)


def conv2d_backward(gy, x, w, padding=0):
    gx = backend.conv2d_grad_input(_c(gy), _c(w), padding, x.shape[2], x.shape[3])
    gw = backend.conv2d_grad_kernel(_c(gy), _c(x), padding, w.shape[2], w.shape[3])
    return gx, gw
