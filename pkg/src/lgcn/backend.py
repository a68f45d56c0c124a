"""Kernel backend selection.

Two interchangeable implementations of the convolution kernels exist:

* ``numba``  - jitted direct loops (default when numba imports cleanly)
* ``numpy``  - im2col + BLAS matmul, no compilation step

Set the environment variable ``LGCN_BACKEND`` to ``numpy`` or ``numba``
before import to force one.  ``benchmarks/bench_conv.py`` compares the two.
"""

import os

from . import _kernels_numpy

_FORCED = os.environ.get("LGCN_BACKEND", "").strip().lower()

if _FORCED not in ("", "numpy", "numba"):
    raise RuntimeError(f"LGCN_BACKEND must be 'numpy' or 'numba', got {_FORCED!r}")

if _FORCED == "numpy":
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _FORCED == "numba":
            raise
        _impl = _kernels_numpy
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernel = _impl.conv2d_grad_kernel
cconv2d_forward = _impl.cconv2d_forward
cconv2d_grad_input = _impl.cconv2d_grad_input
cconv2d_grad_kernel = _impl.cconv2d_grad_kernel
