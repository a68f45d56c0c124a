"""Network layers with hand-rolled forward/backward passes.

Data flows as ComplexTensor; oriented feature maps are 5-D complex
tensors [N, C, U, H, W] whose U axis indexes the modulating-filter
orientations.  Real stages (after projection) are plain ndarrays.

Every layer caches what its backward needs during forward; backward
accumulates into Param.grad and returns the input gradient.
"""

import numpy as np

from .ctensor import ComplexTensor, ComplexKernel, DimensionError, cconv2d, cconv2d_backward, cmul, conv2d, conv2d_backward
from .gabor import GaborGrid, GaborParams, gabor_bank, dgabor_dtheta, dgabor_dlambda, dgabor_dsigma


class Param:
    """A learnable array with accumulated gradient."""

    def __init__(self, name, value, l2=True, trainable=True):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.l2 = l2
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Layer:
    def params(self):
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# modulation


def modulate(omega: ComplexKernel, params: GaborParams, grid: GaborGrid = None) -> ComplexTensor:
    """Gabor-modulated filter bank [C_out, C_in, U, K, K].

    bank[co, ci, u] = G_u (.) omega[co, ci]  (complex elementwise product).
    """
    k = omega.ksize
    if grid is None:
        grid = GaborGrid(k)
    if grid.K != k:
        raise DimensionError(f"kernel size {k} != grid size {grid.K}")
    gre, gim = gabor_bank(params, grid)            # [U,K,K]
    a = omega.weights.re[:, :, None, :, :]
    b = omega.weights.im[:, :, None, :, :]
    gre = gre[None, None].astype(a.dtype)
    gim = gim[None, None].astype(a.dtype)
    return ComplexTensor(gre * a - gim * b, gim * a + gre * b)


def gabor_conv(x: ComplexTensor, bank: ComplexTensor, padding=None) -> ComplexTensor:
    """Lifting convolution: orientation-free input -> oriented feature map.

    x [N,C_in,H,W], bank [C_out,C_in,U,K,K] -> [N,C_out,U,H',W'] with
    "same" zero padding by default.
    """
    if x.re.ndim != 4:
        raise DimensionError(f"lifting layer expects [N,C,H,W] input, got {x.shape}")
    c_out, c_in, u, k, _ = bank.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"input has {x.shape[1]} channels, bank expects {c_in}")
    if padding is None:
        padding = k // 2
    big = ComplexKernel(ComplexTensor(
        np.ascontiguousarray(bank.re.transpose(0, 2, 1, 3, 4)).reshape(c_out * u, c_in, k, k),
        np.ascontiguousarray(bank.im.transpose(0, 2, 1, 3, 4)).reshape(c_out * u, c_in, k, k)))
    z = cconv2d(x, big, padding)
    n, _, h2, w2 = z.shape
    return z.reshape(n, c_out, u, h2, w2)


def cyclic_conv_kernel(bank: ComplexTensor) -> ComplexTensor:
    """Expand a modulated bank into the cyclic big kernel.

    Output kernel maps input channel (c, i) to output channel (co, j)
    with filter bank[co, c, (j - i) mod U].
    """
    c_out, c_in, u, k, _ = bank.shape
    j = np.arange(u)[:, None]
    i = np.arange(u)[None, :]
    idx = (j - i) % u                                    # [U_out, U_in]
    def expand(plane):
        big = plane[:, :, idx]                           # [Co,Ci,Uj,Ui,K,K]
        big = big.transpose(0, 2, 1, 3, 4, 5)            # [Co,Uj,Ci,Ui,K,K]
        return big.reshape(c_out * u, c_in * u, k, k)
    return ComplexTensor(expand(bank.re), expand(bank.im))


def cyclic_gabor_conv(x: ComplexTensor, omega: ComplexKernel, params: GaborParams,
                      padding=None) -> ComplexTensor:
    """Cyclic convolution over an oriented input [N,C_in,U,H,W]."""
    if x.re.ndim != 5:
        raise DimensionError(f"cyclic conv expects [N,C,U,H,W] input, got {x.shape}")
    n, c_in, u, h, w = x.shape
    if u != params.U:
        raise DimensionError(f"input has U={u} orientations, params have U={params.U}")
    if c_in != omega.shape[1]:
        raise DimensionError(f"input has {c_in} channels, kernel expects {omega.shape[1]}")
    k = omega.ksize
    if padding is None:
        padding = k // 2
    bank = modulate(omega, params)
    big = ComplexKernel(cyclic_conv_kernel(bank))
    z = cconv2d(x.reshape(n, c_in * u, h, w), big, padding)
    c_out = omega.shape[0]
    return z.reshape(n, c_out, u, z.shape[2], z.shape[3])


def _collapse_cyclic_kernel_grad(gbig: ComplexTensor, c_out, c_in, u, k):
    """Scatter the big-kernel gradient back onto the U-bank, summing the
    (j, i) pairs that share a cyclic offset."""
    def collapse(plane):
        g = plane.reshape(c_out, u, c_in, u, k, k)
        out = np.zeros((c_out, c_in, u, k, k), dtype=plane.dtype)
        for j in range(u):
            for i in range(u):
                out[:, :, (j - i) % u] += g[:, j, :, i]
        return out
    return ComplexTensor(collapse(gbig.re), collapse(gbig.im))


class GaborConv(Layer):
    """Gabor-modulated convolution.

    On a 4-D input this is the lifting layer (output gains the U axis).
    On a 5-D oriented input the modulating filter index follows the
    input orientation (orientation-matched), preserving the U axis.

    complex_weights=False gives the real static-Gabor variant: only the
    real Gabor plane modulates a real kernel, and the imaginary input
    plane is ignored (it is structurally zero in real networks).
    """

    def __init__(self, c_in, c_out, k, thetas, lambdas, sigma=None,
                 *, complex_weights=True, learnable_gabor=True, learn_sigma=False,
                 shared_lambda=False, grad_mode="chain", rng=None, dtype=np.float64,
                 aliasing_ok=False):
        from .initschemes import init_complex_weights, he_uniform
        if sigma is None:
            sigma = float(np.sqrt(0.5))
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.U = len(np.atleast_1d(thetas))
        self.grid = GaborGrid(k)
        self.complex_weights = complex_weights
        self.learn_sigma = learn_sigma
        self.shared_lambda = shared_lambda
        self.aliasing_ok = aliasing_ok
        if grad_mode not in ("chain", "paper"):
            raise ValueError(f"grad_mode must be 'chain' or 'paper', got {grad_mode!r}")
        self.grad_mode = grad_mode
        rng = rng or np.random.default_rng()
        if complex_weights:
            wk = init_complex_weights(c_in * k * k, (c_out, c_in, k, k), rng)
            self.A = Param("A", wk.weights.re.astype(dtype))
            self.B = Param("B", wk.weights.im.astype(dtype))
        else:
            self.A = Param("A", he_uniform((c_out, c_in, k, k), c_in * k * k, rng).astype(dtype))
            self.B = None
        lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
        if shared_lambda and lam.size != 1:
            lam = lam[:1]
        self.theta = Param("theta", np.atleast_1d(np.asarray(thetas, np.float64)).copy(),
                           l2=False, trainable=learnable_gabor)
        self.lam = Param("lambda", lam.copy(), l2=False, trainable=learnable_gabor)
        sig = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if learn_sigma:
            if sig.size == 1:
                sig = np.full(1 if shared_lambda else self.U, sig[0])
            self.sigma = Param("sigma", sig.copy(), l2=False, trainable=True)
        else:
            self.sigma = None
            self._sigma_fixed = float(sig[0])
        self._cache = None

    def params(self):
        ps = [self.A, self.theta, self.lam]
        if self.B is not None:
            ps.insert(1, self.B)
        if self.sigma is not None:
            ps.append(self.sigma)
        return ps

    def gabor_params(self) -> GaborParams:
        lam = self.lam.value
        if self.shared_lambda:
            lam = np.repeat(lam, self.U)
        if self.sigma is not None:
            sig = self.sigma.value
            sig = np.repeat(sig, self.U) if sig.size == 1 else sig
            return GaborParams(self.theta.value, lam, sigmas=sig,
                               aliasing_ok=self.aliasing_ok)
        return GaborParams(self.theta.value, lam, sigma=self._sigma_fixed,
                           aliasing_ok=self.aliasing_ok)

    def omega(self) -> ComplexKernel:
        b = self.B.value if self.B is not None else np.zeros_like(self.A.value)
        return ComplexKernel(ComplexTensor(self.A.value, b))

    def _bank(self):
        gp = self.gabor_params()
        gre, gim = gabor_bank(gp, self.grid)        # [U,K,K] float64
        if not self.complex_weights:
            gim = np.zeros_like(gre)                # real variant: real plane only
        dt = self.A.value.dtype
        a = self.A.value[:, :, None]
        gre_c, gim_c = gre.astype(dt)[None, None], gim.astype(dt)[None, None]
        if self.B is not None:
            b = self.B.value[:, :, None]
            m = ComplexTensor(gre_c * a - gim_c * b, gim_c * a + gre_c * b)
        else:
            m = ComplexTensor(gre_c * a, gim_c * a)
        return m, gp, gre, gim

    def forward(self, x: ComplexTensor, train=False):
        m, gp, gre, gim = self._bank()
        k, u = self.k, self.U
        pad = k // 2
        if x.re.ndim == 4:
            mode = "lift"
            big = ComplexKernel(ComplexTensor(
                np.ascontiguousarray(m.re.transpose(0, 2, 1, 3, 4)).reshape(self.c_out * u, self.c_in, k, k),
                np.ascontiguousarray(m.im.transpose(0, 2, 1, 3, 4)).reshape(self.c_out * u, self.c_in, k, k)))
            z = cconv2d(x, big, pad)
            n = x.shape[0]
            out = z.reshape(n, self.c_out, u, z.shape[2], z.shape[3])
            self._cache = (mode, x, big, gre, gim, gp)
        elif x.re.ndim == 5:
            if x.shape[2] != u:
                raise DimensionError(f"input U={x.shape[2]} != layer U={u}")
            mode = "diag"
            slices, kerns = [], []
            for uu in range(u):
                xi = ComplexTensor(np.ascontiguousarray(x.re[:, :, uu]),
                                   np.ascontiguousarray(x.im[:, :, uu]))
                ker = ComplexKernel(ComplexTensor(np.ascontiguousarray(m.re[:, :, uu]),
                                                  np.ascontiguousarray(m.im[:, :, uu])))
                slices.append(xi)
                kerns.append(ker)
            zs = [cconv2d(xi, ker, pad) for xi, ker in zip(slices, kerns)]
            out = ComplexTensor(np.stack([z.re for z in zs], axis=2),
                                np.stack([z.im for z in zs], axis=2))
            self._cache = (mode, slices, kerns, gre, gim, gp)
        else:
            raise DimensionError(f"GaborConv input must be 4-D or 5-D, got {x.shape}")
        return out

    def _param_grads_from_bank_grad(self, gm: ComplexTensor, gre, gim, gp):
        """Fold a bank gradient [Co,Ci,U,K,K] onto A/B and theta/lambda."""
        a = self.A.value.astype(np.float64)
        gmr = gm.re.astype(np.float64)
        gmi = gm.im.astype(np.float64)
        gre_b, gim_b = gre[None, None], gim[None, None]
        if self.B is not None:
            b = self.B.value.astype(np.float64)
            self.A.grad += (gmr * gre_b + gmi * gim_b).sum(axis=2).astype(self.A.value.dtype)
            self.B.grad += (gmi * gre_b - gmr * gim_b).sum(axis=2).astype(self.B.value.dtype)
        else:
            b = None
            self.A.grad += (gmr * gre_b + gmi * gim_b).sum(axis=2).astype(self.A.value.dtype)

        grid = self.grid
        dth = np.zeros(self.U)
        dla = np.zeros(self.U)
        dsi = np.zeros(self.U) if self.sigma is not None else None
        for u in range(self.U):
            derivs = [(dth, dgabor_dtheta(gp, u, grid)), (dla, dgabor_dlambda(gp, u, grid))]
            if dsi is not None:
                derivs.append((dsi, dgabor_dsigma(gp, u, grid)))
            gr_u, gi_u = gmr[:, :, u], gmi[:, :, u]
            for acc, (dre, dim_) in derivs:
                if self.B is not None:
                    if self.grad_mode == "chain" or not self.complex_weights:
                        # m_re = a g_re - b g_im, m_im = a g_im + b g_re
                        dmre = a * dre - b * dim_
                        dmim = a * dim_ + b * dre
                        acc[u] += np.sum(gr_u * dmre + gi_u * dmim)
                    else:
                        # published combination a' = a+b, b' = a-b applied to
                        # the averaged upstream gradient
                        dm = (a + b) * dre + (a - b) * dim_
                        acc[u] += np.sum(0.5 * (gr_u + gi_u) * dm)
                else:
                    dmre = a * dre
                    dmim = a * dim_ if self.complex_weights else None
                    acc[u] += np.sum(gr_u * dmre)
                    if dmim is not None:
                        acc[u] += np.sum(gi_u * dmim)
        self.theta.grad += dth
        self.lam.grad += dla.sum(keepdims=True) if self.shared_lambda else dla
        if self.sigma is not None:
            self.sigma.grad += dsi.sum(keepdims=True) if self.sigma.value.size == 1 else dsi

    def backward(self, grad: ComplexTensor):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        mode = self._cache[0]
        pad = self.k // 2
        if mode == "lift":
            _, x, big, gre, gim, gp = self._cache
            n = grad.shape[0]
            g = grad.reshape(n, self.c_out * self.U, grad.shape[3], grad.shape[4])
            gx, gbig = cconv2d_backward(g, x, big, pad)
            gm = gbig.reshape(self.c_out, self.U, self.c_in, self.k, self.k)
            gm = ComplexTensor(gm.re.transpose(0, 2, 1, 3, 4), gm.im.transpose(0, 2, 1, 3, 4))
        else:
            _, slices, kerns, gre, gim, gp = self._cache
            gxs, gms = [], []
            for uu in range(self.U):
                gu = ComplexTensor(np.ascontiguousarray(grad.re[:, :, uu]),
                                   np.ascontiguousarray(grad.im[:, :, uu]))
                gxi, gki = cconv2d_backward(gu, slices[uu], kerns[uu], pad)
                gxs.append(gxi)
                gms.append(gki)
            gx = ComplexTensor(np.stack([g.re for g in gxs], axis=2),
                               np.stack([g.im for g in gxs], axis=2))
            gm = ComplexTensor(np.stack([g.re for g in gms], axis=2),
                               np.stack([g.im for g in gms], axis=2))
        self._param_grads_from_bank_grad(gm, gre, gim, gp)
        return gx


class CyclicGaborConv(Layer):
    """Orientation-tied convolution: filter index = (j - i) mod U."""

    def __init__(self, c_in, c_out, k, thetas, lambdas, sigma=None, *,
                 learnable_gabor=True, learn_sigma=False, grad_mode="chain",
                 shared_lambda=False, rng=None, dtype=np.float64, aliasing_ok=False):
        # reuse GaborConv's parameter handling/bank machinery
        self._g = GaborConv(c_in, c_out, k, thetas, lambdas, sigma,
                            complex_weights=True, learnable_gabor=learnable_gabor,
                            learn_sigma=learn_sigma, shared_lambda=shared_lambda,
                            grad_mode=grad_mode, rng=rng, dtype=dtype,
                            aliasing_ok=aliasing_ok)
        self._cache = None

    @property
    def U(self):
        return self._g.U

    def params(self):
        return self._g.params()

    def forward(self, x: ComplexTensor, train=False):
        if x.re.ndim != 5:
            raise DimensionError(f"cyclic conv expects [N,C,U,H,W], got {x.shape}")
        g = self._g
        if x.shape[2] != g.U:
            raise DimensionError(f"input U={x.shape[2]} != layer U={g.U}")
        m, gp, gre, gim = g._bank()
        big = ComplexKernel(cyclic_conv_kernel(m))
        n, c_in, u, h, w = x.shape
        xf = x.reshape(n, c_in * u, h, w)
        z = cconv2d(xf, big, g.k // 2)
        self._cache = (xf, big, gre, gim, gp, x.shape)
        return z.reshape(n, g.c_out, u, z.shape[2], z.shape[3])

    def backward(self, grad: ComplexTensor):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        xf, big, gre, gim, gp, xshape = self._cache
        g = self._g
        n = grad.shape[0]
        gf = grad.reshape(n, g.c_out * g.U, grad.shape[3], grad.shape[4])
        gx, gbig = cconv2d_backward(gf, xf, big, g.k // 2)
        gm = _collapse_cyclic_kernel_grad(gbig, g.c_out, g.c_in, g.U, g.k)
        g._param_grads_from_bank_grad(gm, gre, gim, gp)
        return gx.reshape(*xshape)


class PlainConv(Layer):
    """Unmodulated convolution (complex or real) for the baseline variants."""

    def __init__(self, c_in, c_out, k, *, complex_weights=True, rng=None, dtype=np.float64):
        from .initschemes import init_complex_weights, he_uniform
        rng = rng or np.random.default_rng()
        self.k = k
        self.complex_weights = complex_weights
        if complex_weights:
            wk = init_complex_weights(c_in * k * k, (c_out, c_in, k, k), rng)
            self.A = Param("A", wk.weights.re.astype(dtype))
            self.B = Param("B", wk.weights.im.astype(dtype))
        else:
            self.A = Param("A", he_uniform((c_out, c_in, k, k), c_in * k * k, rng).astype(dtype))
            self.B = None
        self._cache = None

    def params(self):
        return [self.A] + ([self.B] if self.B is not None else [])

    def _kernel(self):
        b = self.B.value if self.B is not None else np.zeros_like(self.A.value)
        return ComplexKernel(ComplexTensor(self.A.value, b))

    def forward(self, x: ComplexTensor, train=False):
        ker = self._kernel()
        z = cconv2d(x, ker, self.k // 2)
        self._cache = (x, ker)
        return z

    def backward(self, grad: ComplexTensor):
        x, ker = self._cache
        gx, gk = cconv2d_backward(grad, x, ker, self.k // 2)
        self.A.grad += gk.re
        if self.B is not None:
            self.B.grad += gk.im
        else:
            gx = ComplexTensor(gx.re, np.zeros_like(gx.re))  # imag plane is structural zero
        return gx


class CRelu(Layer):
    """Magnitude-gated activation: ReLU(|z| + b) z / |z|, with 0 -> 0."""

    def __init__(self, channels, dtype=np.float64):
        self.b = Param("crelu_bias", np.zeros(channels, dtype), l2=True)
        self._cache = None

    def params(self):
        return [self.b]

    def _bshape(self, ndim):
        # channel axis is 1; broadcast over the rest
        return (1, -1) + (1,) * (ndim - 2)

    def forward(self, z: ComplexTensor, train=False):
        r = z.magnitude()
        b = self.b.value.reshape(self._bshape(z.re.ndim))
        shifted = r + b
        active = (shifted > 0) & (r > 0)
        inv_r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        fac = np.where(active, shifted * inv_r, 0.0)
        self._cache = (z, active, inv_r, b)
        return ComplexTensor(fac * z.re, fac * z.im)

    def backward(self, grad: ComplexTensor):
        z, active, inv_r, b = self._cache
        dot = grad.re * z.re + grad.im * z.im
        fac_grad = np.where(active, dot * inv_r, 0.0)
        # d(fac)/dz through |z|: -(b / r^3) z
        coef = np.where(active, -b * inv_r ** 3 * dot, 0.0)
        r = 1.0 / np.where(inv_r > 0, inv_r, 1.0)
        shifted = np.where(active, (r + b) * inv_r, 0.0)
        gre = grad.re * shifted + coef * z.re
        gim = grad.im * shifted + coef * z.im
        axes = tuple(i for i in range(z.re.ndim) if i != 1)
        self.b.grad += fac_grad.sum(axis=axes).astype(self.b.value.dtype)
        return ComplexTensor(gre, gim)


class Relu(Layer):
    """Plain ReLU on the real plane (real-network variants and FC stacks)."""

    def forward(self, x, train=False):
        if isinstance(x, ComplexTensor):
            mask = x.re > 0
            self._cache = (mask, True)
            return ComplexTensor(x.re * mask, x.im)
        mask = x > 0
        self._cache = (mask, False)
        return x * mask

    def backward(self, grad):
        mask, was_complex = self._cache
        if was_complex:
            return ComplexTensor(grad.re * mask, grad.im)
        return grad * mask


class ComplexBatchNorm(Layer):
    """Whitening batch norm on (re, im) pairs.

    Per feature (channel, and orientation when present): center by the
    complex mean, multiply by the inverse square root of the 2x2
    re/im covariance, then apply a learnable symmetric 2x2 scale and a
    complex shift.  Running moments use momentum 0.9; eps 1e-5 on the
    covariance diagonal.
    """

    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, channels, orientations=None, dtype=np.float64):
        f = channels * (orientations or 1)
        self.channels = channels
        self.orientations = orientations
        self.f = f
        s = 1.0 / np.sqrt(2.0)
        self.gamma_rr = Param("gamma_rr", np.full(f, s, dtype))
        self.gamma_ii = Param("gamma_ii", np.full(f, s, dtype))
        self.gamma_ri = Param("gamma_ri", np.zeros(f, dtype))
        self.beta_re = Param("beta_re", np.zeros(f, dtype), l2=True)
        self.beta_im = Param("beta_im", np.zeros(f, dtype), l2=True)
        self.run_mean = np.zeros((f, 2))
        self.run_cov = np.tile(0.5 * np.eye(2), (f, 1, 1))
        self.seen_batches = 0
        self._cache = None

    def params(self):
        return [self.gamma_rr, self.gamma_ii, self.gamma_ri, self.beta_re, self.beta_im]

    def _to_fm(self, z: ComplexTensor):
        """[N,C,(U),H,W] -> xv [F, M, 2] plus the inverse permutation info."""
        ndim = z.re.ndim
        if ndim == 5:
            n, c, u, h, w = z.shape
            f = c * u
        elif ndim == 4:
            n, c, h, w = z.shape
            u, f = None, c
        else:
            raise DimensionError(f"batchnorm expects 4-D or 5-D, got {z.shape}")
        if f != self.f:
            raise DimensionError(f"batchnorm built for {self.f} features, got {f}")
        re = z.re.reshape(n, f, h, w)
        im = z.im.reshape(n, f, h, w)
        xv = np.stack([re, im], axis=-1)             # [N,F,H,W,2]
        xv = xv.transpose(1, 0, 2, 3, 4).reshape(f, -1, 2)
        return xv, (n, h, w, z.shape)

    def _from_fm(self, yv, meta):
        n, h, w, shape = meta
        y = yv.reshape(self.f, n, h, w, 2).transpose(1, 0, 2, 3, 4)
        re = y[..., 0].reshape(shape)
        im = y[..., 1].reshape(shape)
        return ComplexTensor(np.ascontiguousarray(re), np.ascontiguousarray(im))

    @staticmethod
    def _inv_sqrt(cov):
        """Inverse matrix square root of symmetric PD 2x2 stacks [F,2,2]."""
        evals, evecs = np.linalg.eigh(cov)
        inv = evecs @ (evecs.transpose(0, 2, 1) / np.sqrt(evals)[:, :, None])
        return inv, evals, evecs

    def _gamma_mat(self):
        g = np.zeros((self.f, 2, 2))
        g[:, 0, 0] = self.gamma_rr.value
        g[:, 1, 1] = self.gamma_ii.value
        g[:, 0, 1] = g[:, 1, 0] = self.gamma_ri.value
        return g

    def forward(self, z: ComplexTensor, train=False):
        xv, meta = self._to_fm(z)
        m = xv.shape[1]
        if train:
            mu = xv.mean(axis=1)
            xc = xv - mu[:, None]
            cov = np.einsum("fmi,fmj->fij", xc, xc) / m
            self.run_mean = self.MOMENTUM * self.run_mean + (1 - self.MOMENTUM) * mu
            self.run_cov = self.MOMENTUM * self.run_cov + (1 - self.MOMENTUM) * cov
            self.seen_batches += 1
        else:
            mu = self.run_mean
            xc = xv - mu[:, None]
            cov = self.run_cov.copy()
        cov = cov + self.EPS * np.eye(2)
        wmat, evals, evecs = self._inv_sqrt(cov)
        yv = np.einsum("fij,fmj->fmi", wmat, xc)
        gm = self._gamma_mat()
        out = np.einsum("fij,fmj->fmi", gm, yv)
        out[..., 0] += self.beta_re.value[:, None]
        out[..., 1] += self.beta_im.value[:, None]
        self._cache = (xc, yv, wmat, evals, evecs, gm, meta, train, m)
        return self._from_fm(out, meta)

    def backward(self, grad: ComplexTensor):
        xc, yv, wmat, evals, evecs, gm, meta, train, m = self._cache
        gz, _ = self._to_fm(grad)
        self.beta_re.grad += gz[..., 0].sum(axis=1).astype(self.beta_re.value.dtype)
        self.beta_im.grad += gz[..., 1].sum(axis=1).astype(self.beta_im.value.dtype)
        ggm = np.einsum("fmi,fmj->fij", gz, yv)
        self.gamma_rr.grad += ggm[:, 0, 0].astype(self.gamma_rr.value.dtype)
        self.gamma_ii.grad += ggm[:, 1, 1].astype(self.gamma_ii.value.dtype)
        self.gamma_ri.grad += (ggm[:, 0, 1] + ggm[:, 1, 0]).astype(self.gamma_ri.value.dtype)
        gy = np.einsum("fji,fmj->fmi", gm, gz)       # gamma symmetric
        gxc = np.einsum("fji,fmj->fmi", wmat, gy)    # W symmetric
        if train:
            # gradient through W = C^{-1/2}
            gw = np.einsum("fmi,fmj->fij", gy, xc)
            gs = -np.einsum("fij,fjk,fkl->fil", wmat, gw, wmat)
            gs = 0.5 * (gs + gs.transpose(0, 2, 1))
            gst = np.einsum("fji,fjk,fkl->fil", evecs, gs, evecs)
            sq = np.sqrt(evals)
            denom = sq[:, :, None] + sq[:, None, :]
            gct = gst / denom
            gc = np.einsum("fij,fjk,flk->fil", evecs, gct, evecs)
            gc = 0.5 * (gc + gc.transpose(0, 2, 1))
            gxc = gxc + 2.0 / m * np.einsum("fij,fmj->fmi", gc, xc)
            gxc = gxc - gxc.mean(axis=1, keepdims=True)
        return self._from_fm(gxc, meta)


class RealBatchNorm(Layer):
    """Standard batch norm on the real plane (real-network variants)."""

    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, channels, dtype=np.float64):
        self.gamma = Param("gamma", np.ones(channels, dtype))
        self.beta = Param("beta", np.zeros(channels, dtype), l2=True)
        self.run_mean = np.zeros(channels)
        self.run_var = np.ones(channels)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, z, train=False):
        x = z.re if isinstance(z, ComplexTensor) else z
        axes = tuple(i for i in range(x.ndim) if i != 1)
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.run_mean = self.MOMENTUM * self.run_mean + (1 - self.MOMENTUM) * mu
            self.run_var = self.MOMENTUM * self.run_var + (1 - self.MOMENTUM) * var
        else:
            mu, var = self.run_mean, self.run_var
        inv = 1.0 / np.sqrt(var + self.EPS)
        xh = (x - mu.reshape(bshape)) * inv.reshape(bshape)
        out = self.gamma.value.reshape(bshape) * xh + self.beta.value.reshape(bshape)
        self._cache = (xh, inv, axes, bshape, train, x.shape, isinstance(z, ComplexTensor))
        return ComplexTensor(out, np.zeros_like(out)) if isinstance(z, ComplexTensor) else out

    def backward(self, grad):
        g = grad.re if isinstance(grad, ComplexTensor) else grad
        xh, inv, axes, bshape, train, shape, was_complex = self._cache
        m = g.size // g.shape[1]
        self.beta.grad += g.sum(axis=axes).astype(self.beta.value.dtype)
        self.gamma.grad += (g * xh).sum(axis=axes).astype(self.gamma.value.dtype)
        gxh = g * self.gamma.value.reshape(bshape)
        if train:
            gx = (inv.reshape(bshape) / m) * (
                m * gxh - gxh.sum(axis=axes).reshape(bshape)
                - xh * (gxh * xh).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxh * inv.reshape(bshape)
        return ComplexTensor(gx, np.zeros_like(gx)) if was_complex else gx


class OrientationMaxPool(Layer):
    """Keep, per pixel, the complex value with maximal magnitude over U."""

    def forward(self, z: ComplexTensor, train=False):
        if z.re.ndim != 5:
            raise DimensionError(f"orientation pool expects [N,C,U,H,W], got {z.shape}")
        mag = z.re ** 2 + z.im ** 2
        idx = mag.argmax(axis=2)                     # first max wins ties
        self._cache = (idx, z.shape)
        take = np.expand_dims(idx, axis=2)
        re = np.take_along_axis(z.re, take, axis=2)[:, :, 0]
        im = np.take_along_axis(z.im, take, axis=2)[:, :, 0]
        return ComplexTensor(re, im)

    def backward(self, grad: ComplexTensor):
        idx, shape = self._cache
        gre = np.zeros(shape, dtype=grad.re.dtype)
        gim = np.zeros(shape, dtype=grad.re.dtype)
        take = np.expand_dims(idx, axis=2)
        np.put_along_axis(gre, take, np.expand_dims(grad.re, 2), axis=2)
        np.put_along_axis(gim, take, np.expand_dims(grad.im, 2), axis=2)
        return ComplexTensor(gre, gim)


def _avgpool2(x):
    h, w = x.shape[-2:]
    h2, w2 = h // 2, w // 2
    xt = x[..., : 2 * h2, : 2 * w2]
    xt = xt.reshape(*x.shape[:-2], h2, 2, w2, 2)
    return xt.mean(axis=(-3, -1)), (h, w)


def _avgpool2_back(g, hw):
    h, w = hw
    out = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
    spread = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
    out[..., : spread.shape[-2], : spread.shape[-1]] = spread
    return out


class AvgPool(Layer):
    """2x2 stride-2 mean over re and im separately; trailing odd row/col dropped."""

    def forward(self, z, train=False):
        if isinstance(z, ComplexTensor):
            re, hw = _avgpool2(z.re)
            im, _ = _avgpool2(z.im)
            self._cache = (hw, True)
            return ComplexTensor(re, im)
        y, hw = _avgpool2(z)
        self._cache = (hw, False)
        return y

    def backward(self, grad):
        hw, was_complex = self._cache
        if was_complex:
            return ComplexTensor(_avgpool2_back(grad.re, hw), _avgpool2_back(grad.im, hw))
        return _avgpool2_back(grad, hw)


class GlobalAvgPool(Layer):
    """Global spatial mean: [N,C,H,W] -> [N,C]."""

    def forward(self, z: ComplexTensor, train=False):
        self._cache = z.shape
        return ComplexTensor(z.re.mean(axis=(-2, -1)), z.im.mean(axis=(-2, -1)))

    def backward(self, grad: ComplexTensor):
        shape = self._cache
        h, w = shape[-2:]
        scale = 1.0 / (h * w)
        gre = np.broadcast_to(grad.re[..., None, None] * scale, shape).copy()
        gim = np.broadcast_to(grad.im[..., None, None] * scale, shape).copy()
        return ComplexTensor(gre, gim)


class NearestUpsample(Layer):
    """2x nearest-neighbour spatial upsampling."""

    def forward(self, z: ComplexTensor, train=False):
        def up(x):
            return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)
        return ComplexTensor(up(z.re), up(z.im)) if isinstance(z, ComplexTensor) else up(z)

    def backward(self, grad):
        def down(g):
            h, w = g.shape[-2:]
            return g.reshape(*g.shape[:-2], h // 2, 2, w // 2, 2).sum(axis=(-3, -1))
        if isinstance(grad, ComplexTensor):
            return ComplexTensor(down(grad.re), down(grad.im))
        return down(grad)


class ProjectReal(Layer):
    """[N,F] complex -> [N,2F] real: re block first, then im."""

    def forward(self, z: ComplexTensor, train=False):
        self._cache = z.shape
        return np.concatenate([z.re, z.im], axis=1)

    def backward(self, grad):
        f = self._cache[1]
        return ComplexTensor(np.ascontiguousarray(grad[:, :f]),
                             np.ascontiguousarray(grad[:, f:]))


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        from .initschemes import he_uniform
        rng = rng or np.random.default_rng()
        self.W = Param("W", he_uniform((n_in, n_out), n_in, rng).astype(dtype))
        self.b = Param("b", np.zeros(n_out, dtype), l2=True)
        self._cache = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False):
        self._cache = x
        return x @ self.W.value + self.b.value

    def backward(self, grad):
        x = self._cache
        self.W.grad += x.T @ grad
        self.b.grad += grad.sum(axis=0)
        return grad @ self.W.value.T


class ArcsinhScale(Layer):
    """Learned arcsinh stretch: y = arcsinh(a x + b)."""

    def __init__(self, a=1.0, b=0.0, dtype=np.float64):
        self.a = Param("arcsinh_a", np.asarray([a], dtype), l2=False)
        self.b = Param("arcsinh_b", np.asarray([b], dtype), l2=False)
        self._cache = None

    def params(self):
        return [self.a, self.b]

    def forward(self, x, train=False):
        t = self.a.value[0] * x + self.b.value[0]
        d = 1.0 / np.sqrt(1.0 + t * t)
        self._cache = (x, d)
        return np.arcsinh(t)

    def backward(self, grad):
        x, d = self._cache
        self.a.grad += np.asarray([np.sum(grad * x * d)], dtype=self.a.value.dtype)
        self.b.grad += np.asarray([np.sum(grad * d)], dtype=self.b.value.dtype)
        return grad * self.a.value[0] * d


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cache
        return grad * y * (1.0 - y)


class ToComplex(Layer):
    """Lift a real array into complex space with zero imaginary part."""

    def forward(self, x, train=False):
        return ComplexTensor(np.asarray(x), np.zeros_like(x))

    def backward(self, grad: ComplexTensor):
        return grad.re  # input imaginary part is fixed at zero


class ConcatReIm(Layer):
    """[N,C,H,W] complex -> [N,2C,H,W] real, re block first."""

    def forward(self, z: ComplexTensor, train=False):
        self._cache = z.shape[1]
        return np.concatenate([z.re, z.im], axis=1)

    def backward(self, grad):
        c = self._cache
        return ComplexTensor(np.ascontiguousarray(grad[:, :c]),
                             np.ascontiguousarray(grad[:, c:]))


class RealConv2d(Layer):
    """Plain real convolution on ndarrays (projection heads, real baselines)."""

    def __init__(self, c_in, c_out, k, rng=None, dtype=np.float64):
        from .initschemes import he_uniform
        rng = rng or np.random.default_rng()
        self.k = k
        self.W = Param("W", he_uniform((c_out, c_in, k, k), c_in * k * k, rng).astype(dtype))
        self.b = Param("b", np.zeros(c_out, dtype), l2=True)
        self._cache = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False):
        self._cache = x
        y = conv2d(x, self.W.value, self.k // 2)
        return y + self.b.value[None, :, None, None]

    def backward(self, grad):
        x = self._cache
        gx, gw = conv2d_backward(grad, x, self.W.value, self.k // 2)
        self.W.grad += gw
        self.b.grad += grad.sum(axis=(0, 2, 3))
        return gx
