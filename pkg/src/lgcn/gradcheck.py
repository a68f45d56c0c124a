"""Central finite-difference validation of analytic gradients.

Used by the test suite and by the `lgcn gradcheck` command.  Losses are
random linear projections of the network output, so every output element
receives an independent gradient signal.
"""

import numpy as np

from .ctensor import ComplexTensor

FD_STEP = 1e-6


def projection_loss(out, proj):
    """Scalar loss <proj, out> plus its gradient w.r.t. out."""
    if isinstance(out, ComplexTensor):
        pr, pi = proj
        val = float(np.sum(out.re * pr) + np.sum(out.im * pi))
        return val, ComplexTensor(pr.copy(), pi.copy())
    val = float(np.sum(out * proj))
    return val, proj.copy()


def make_projection(out, rng):
    if isinstance(out, ComplexTensor):
        return rng.normal(size=out.shape), rng.normal(size=out.shape)
    return rng.normal(size=out.shape)


def run_forward(layers, x):
    for layer in layers:
        x = layer.forward(x, train=True)
    return x


def run_backward(layers, g):
    for layer in reversed(layers):
        g = layer.backward(g)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def check_param_grads(layers, x, rng, step=FD_STEP, n_entries=None):
    """Return {param_name: max relative error} over all (sampled) entries.

    Analytic gradients come from one forward/backward pass; numeric ones
    from central differences on each parameter entry.
    """
    out = run_forward(layers, x)
    proj = make_projection(out, rng)
    _, g = projection_loss(out, proj)
    for layer in layers:
        for p in layer.params():
            p.zero_grad()
    run_backward(layers, g)

    errs = {}
    for layer in layers:
        for p in layer.params():
            flat = p.value.reshape(-1)
            idxs = np.arange(flat.size)
            if n_entries is not None and flat.size > n_entries:
                idxs = rng.choice(flat.size, size=n_entries, replace=False)
            worst = 0.0
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                lp, _ = projection_loss(run_forward(layers, x), proj)
                flat[i] = orig - step
                lm, _ = projection_loss(run_forward(layers, x), proj)
                flat[i] = orig
                numeric = (lp - lm) / (2 * step)
                worst = max(worst, relative_error(p.grad.reshape(-1)[i], numeric))
            key = f"{type(layer).__name__}.{p.name}"
            errs[key] = max(errs.get(key, 0.0), worst)
    # restore caches to a consistent state
    run_forward(layers, x)
    return errs


def check_input_grad(layers, x, rng, step=FD_STEP, n_entries=32):
    """Max relative error of the gradient w.r.t. the input tensor."""
    out = run_forward(layers, x)
    proj = make_projection(out, rng)
    _, g = projection_loss(out, proj)
    for layer in layers:
        for p in layer.params():
            p.zero_grad()
    gx = run_backward(layers, g)

    planes = [(x.re, gx.re), (x.im, gx.im)] if isinstance(x, ComplexTensor) else [(x, gx)]
    worst = 0.0
    for arr, garr in planes:
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = projection_loss(run_forward(layers, x), proj)
            flat[i] = orig - step
            lm, _ = projection_loss(run_forward(layers, x), proj)
            flat[i] = orig
            worst = max(worst, relative_error(gflat[i], (lp - lm) / (2 * step)))
    return worst
