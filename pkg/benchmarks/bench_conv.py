"""Compare the numba (jitted direct loops) and numpy (im2col + BLAS)
convolution backends on the shapes the two architectures actually use.

Run:  python benchmarks/bench_conv.py [--repeats N]
"""

import argparse
import time

import numpy as np

from lgcn import _kernels_numpy as knp

try:
    from lgcn import _kernels_numba as knb
except ImportError:
    knb = None

CASES = [
    # label,                    n, c_in, c_out, h, k
    ("classifier block1 28px",  64, 8, 8, 28, 3),
    ("classifier block3 7px",   64, 32, 32, 7, 3),
    ("segnet full-res 128px",   8, 3, 3, 128, 3),
    ("segnet bottleneck 16px",  8, 12, 12, 16, 3),
]


def bench(fn, args, repeats):
    fn(*args)                       # warm-up (triggers jit compilation)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if knb is None:
        print("numba unavailable; benchmarking the numpy backend only")
    rng = np.random.default_rng(0)
    header = f"{'case':28s} {'op':12s} {'numpy':>10s} {'numba':>10s} {'ratio':>7s}"
    print(header)
    print("-" * len(header))
    for label, n, ci, co, h, k in CASES:
        x = rng.standard_normal((n, ci, h, h))
        xi = rng.standard_normal(x.shape)
        w = rng.standard_normal((co, ci, k, k))
        wi = rng.standard_normal(w.shape)
        pad = k // 2
        gy = rng.standard_normal((n, co, h, h))
        gi = rng.standard_normal(gy.shape)
        ops = [
            ("cconv fwd", "cconv2d_forward", (x, xi, w, wi, pad)),
            ("cconv gx", "cconv2d_grad_input", (gy, gi, w, wi, pad, h, h)),
            ("cconv gw", "cconv2d_grad_kernel", (gy, gi, x, xi, pad, k, k)),
        ]
        for op_label, fname, fargs in ops:
            t_np = bench(getattr(knp, fname), fargs, args.repeats)
            if knb is not None:
                t_nb = bench(getattr(knb, fname), fargs, args.repeats)
                ratio = t_np / t_nb
                print(f"{label:28s} {op_label:12s} {t_np * 1e3:9.2f}ms "
                      f"{t_nb * 1e3:9.2f}ms {ratio:6.2f}x")
            else:
                print(f"{label:28s} {op_label:12s} {t_np * 1e3:9.2f}ms "
                      f"{'-':>10s} {'-':>7s}")


if __name__ == "__main__":
    main()
