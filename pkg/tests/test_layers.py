import numpy as np
import pytest

from lgcn import layers as L
from lgcn.ctensor import ComplexKernel, ComplexTensor, DimensionError
from lgcn.gabor import GaborGrid, GaborParams, gabor_bank
from lgcn.gradcheck import (check_input_grad, check_param_grads, make_projection,
                            projection_loss, run_backward, run_forward)
from conftest import naive_ccorr2d, random_ctensor, to_complex_array

TOL = 1e-4


def rand_params(rng, u):
    return GaborParams(thetas=rng.uniform(0, 2 * np.pi, u),
                       lambdas=rng.uniform(2.5, 6.0, u))


def rand_kernel(rng, c_out, c_in, k):
    return ComplexKernel(random_ctensor(rng, (c_out, c_in, k, k)))


class TestModulate:
    def test_elementwise_complex_product(self, rng):
        omega = rand_kernel(rng, 2, 3, 5)
        p = rand_params(rng, 4)
        bank = L.modulate(omega, p)
        gre, gim = gabor_bank(p, GaborGrid(5))
        g = gre + 1j * gim
        expected = g[None, None] * to_complex_array(omega.weights)[:, :, None]
        assert np.abs(to_complex_array(bank) - expected).max() < 1e-12
        assert bank.shape == (2, 3, 4, 5, 5)

    def test_grid_size_mismatch(self, rng):
        with pytest.raises(DimensionError):
            L.modulate(rand_kernel(rng, 1, 1, 3), rand_params(rng, 2), GaborGrid(5))


class TestGaborConvFunctional:
    def test_lift_matches_naive_oracle(self, rng):
        x = random_ctensor(rng, (2, 3, 6, 6))
        omega = rand_kernel(rng, 2, 3, 3)
        p = rand_params(rng, 4)
        bank = L.modulate(omega, p)
        out = L.gabor_conv(x, bank)
        xc = to_complex_array(x)
        bc = to_complex_array(bank)
        for u in range(4):
            ref = naive_ccorr2d(xc, bc[:, :, u], padding=1)
            got = to_complex_array(out)[:, :, u]
            assert np.abs(got - ref).max() < 1e-10

    def test_lift_rejects_oriented_input(self, rng):
        x = random_ctensor(rng, (2, 3, 4, 6, 6))
        bank = L.modulate(rand_kernel(rng, 2, 3, 3), rand_params(rng, 4))
        with pytest.raises(DimensionError):
            L.gabor_conv(x, bank)


class TestCyclicConv:
    def test_matches_naive_index_difference_oracle(self, rng):
        u, c_in, c_out, k = 3, 2, 2, 3
        x = random_ctensor(rng, (2, c_in, u, 6, 6))
        omega = rand_kernel(rng, c_out, c_in, k)
        p = rand_params(rng, u)
        out = to_complex_array(L.cyclic_gabor_conv(x, omega, p))
        bank = to_complex_array(L.modulate(omega, p))
        xc = to_complex_array(x)
        for j in range(u):
            ref = 0
            for i in range(u):
                ref = ref + naive_ccorr2d(xc[:, :, i], bank[:, :, (j - i) % u],
                                          padding=1)
            assert np.abs(out[:, :, j] - ref).max() < 1e-10

    @pytest.mark.parametrize("trial", range(5))
    def test_orientation_shift_equivariance(self, rng, trial):
        u = int(rng.integers(2, 6))
        x = random_ctensor(rng, (1, 2, u, 5, 5))
        omega = rand_kernel(rng, 2, 2, 3)
        p = rand_params(rng, u)
        s = int(rng.integers(1, u))
        y = to_complex_array(L.cyclic_gabor_conv(x, omega, p))
        xs = ComplexTensor(np.roll(x.re, s, axis=2), np.roll(x.im, s, axis=2))
        ys = to_complex_array(L.cyclic_gabor_conv(xs, omega, p))
        assert np.abs(ys - np.roll(y, s, axis=2)).max() < 1e-10


class TestCRelu:
    def test_formula(self, rng):
        layer = L.CRelu(3)
        layer.b.value[:] = np.array([-0.5, 0.0, 0.5])
        z = random_ctensor(rng, (2, 3, 4, 4))
        out = layer.forward(z)
        mag = z.magnitude()
        fac = np.maximum(mag + layer.b.value[None, :, None, None], 0.0)
        fac = np.where(mag > 0, fac / np.maximum(mag, 1e-300), 0.0)
        assert np.allclose(out.re, fac * z.re)
        assert np.allclose(out.im, fac * z.im)

    def test_zero_input_maps_to_zero(self):
        layer = L.CRelu(1)
        layer.b.value[:] = 1.0
        z = ComplexTensor(np.zeros((1, 1, 2, 2)))
        out = layer.forward(z)
        assert np.all(out.re == 0) and np.all(out.im == 0)


class TestOrientationMaxPool:
    def test_selects_max_magnitude(self, rng):
        x = random_ctensor(rng, (2, 3, 4, 5, 5))
        layer = L.OrientationMaxPool()
        out = layer.forward(x)
        mags = x.magnitude()
        idx = mags.argmax(axis=2)
        ref = np.take_along_axis(x.re, idx[:, :, None], axis=2)[:, :, 0]
        assert np.array_equal(out.re, ref)
        assert np.allclose(out.magnitude(), mags.max(axis=2))


class TestComplexBatchNorm:
    def test_train_mode_whitens(self, rng):
        bn = L.ComplexBatchNorm(3)
        bn.gamma_rr.value[:] = 1.0
        bn.gamma_ii.value[:] = 1.0
        x = random_ctensor(rng, (16, 3, 8, 8))
        x.re *= 3.0
        x.im += 2.0
        out = bn.forward(x, train=True)
        for c in range(3):
            v = np.stack([out.re[:, c].ravel(), out.im[:, c].ravel()])
            cov = np.cov(v, bias=True)
            assert np.abs(cov - np.eye(2)).max() < 1e-2
            assert abs(v.mean()) < 1e-12

    def test_running_stats_used_in_eval(self, rng):
        bn = L.ComplexBatchNorm(2)
        x = random_ctensor(rng, (8, 2, 4, 4))
        before = bn.run_mean.copy()
        bn.forward(x, train=True)
        assert not np.array_equal(bn.run_mean, before)
        y1 = bn.forward(x, train=False)
        y2 = bn.forward(x, train=False)  # eval passes do not mutate stats
        assert np.array_equal(y1.re, y2.re)


class TestPoolingAdjoints:
    def test_avgpool_roundtrip_gradient(self, rng):
        layer = L.AvgPool()
        x = random_ctensor(rng, (2, 3, 6, 6))
        y = layer.forward(x)
        assert y.shape == (2, 3, 3, 3)
        g = random_ctensor(rng, y.shape)
        gx = layer.backward(g)
        # adjoint identity <g, pool(x)> == <unpool(g), x>
        lhs = float((g.re * y.re + g.im * y.im).sum())
        rhs = float((gx.re * x.re + gx.im * x.im).sum())
        assert np.isclose(lhs, rhs, rtol=1e-12)

    def test_upsample_shapes(self, rng):
        layer = L.NearestUpsample()
        x = random_ctensor(rng, (2, 3, 4, 4))
        y = layer.forward(x)
        assert y.shape == (2, 3, 8, 8)
        assert np.array_equal(y.re[:, :, ::2, ::2], x.re)


# ---------------------------------------------------------------------------
# finite-difference gradient checks, one per layer class
# ---------------------------------------------------------------------------

class TestGradients:
    def check(self, layers, x, rng, expect_keys=()):
        errs = check_param_grads(layers, x, rng, n_entries=6)
        for key, err in errs.items():
            assert err < TOL, f"{key}: {err}"
        for k in expect_keys:
            assert any(k in key for key in errs), f"missing {k} in {list(errs)}"
        assert check_input_grad(layers, x, rng) < TOL

    def test_gabor_conv_lift(self, rng):
        p = rand_params(rng, 3)
        layer = L.GaborConv(2, 2, 3, p.thetas, p.lambdas, rng=rng)
        self.check([layer], random_ctensor(rng, (2, 2, 7, 7)), rng,
                   ("theta", "lambda", "A", "B"))

    def test_gabor_conv_orientation_matched(self, rng):
        p = rand_params(rng, 3)
        layer = L.GaborConv(2, 2, 3, p.thetas, p.lambdas, rng=rng)
        self.check([layer], random_ctensor(rng, (2, 2, 3, 6, 6)), rng)

    def test_gabor_conv_shared_lambda(self, rng):
        p = rand_params(rng, 3)
        layer = L.GaborConv(1, 2, 3, p.thetas, p.lambdas[:1],
                            shared_lambda=True, rng=rng)
        assert layer.lam.value.size == 1
        self.check([layer], random_ctensor(rng, (2, 1, 6, 6)), rng, ("lambda",))

    def test_gabor_conv_learned_sigma(self, rng):
        p = rand_params(rng, 3)
        layer = L.GaborConv(1, 2, 3, p.thetas, p.lambdas,
                            sigma=rng.uniform(0.8, 1.5, 3), learn_sigma=True, rng=rng)
        self.check([layer], random_ctensor(rng, (2, 1, 6, 6)), rng, ("sigma",))

    def test_gabor_conv_real_static_variant(self, rng):
        p = rand_params(rng, 3)
        layer = L.GaborConv(2, 2, 3, p.thetas, p.lambdas, complex_weights=False,
                            learnable_gabor=False, rng=rng)
        x = ComplexTensor(rng.standard_normal((2, 2, 6, 6)))
        out = layer.forward(x)
        assert np.all(out.im == 0)  # real path stays real
        errs = check_param_grads([layer], x, rng, n_entries=6)
        assert all(e < TOL for e in errs.values())

    def test_cyclic_gabor_conv(self, rng):
        p = rand_params(rng, 3)
        layer = L.CyclicGaborConv(2, 2, 3, p.thetas, p.lambdas, rng=rng)
        self.check([layer], random_ctensor(rng, (2, 2, 3, 6, 6)), rng,
                   ("theta", "lambda"))

    def test_plain_conv(self, rng):
        self.check([L.PlainConv(2, 3, 3, rng=rng)],
                   random_ctensor(rng, (2, 2, 6, 6)), rng)

    def test_crelu(self, rng):
        layers = [L.PlainConv(2, 2, 3, rng=rng), L.CRelu(2)]
        self.check(layers, random_ctensor(rng, (2, 2, 6, 6)), rng, ("crelu_bias",))

    def test_complex_batchnorm(self, rng):
        layers = [L.PlainConv(2, 3, 3, rng=rng), L.ComplexBatchNorm(3)]
        self.check(layers, random_ctensor(rng, (4, 2, 6, 6)), rng)

    def test_real_batchnorm_and_dense(self, rng):
        layers = [L.Dense(10, 4, rng=rng), L.Relu()]
        x = rng.standard_normal((6, 10))
        errs = check_param_grads(layers, x, rng, n_entries=6)
        assert all(e < TOL for e in errs.values())

    def test_arcsinh(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        errs = check_param_grads([L.ArcsinhScale()], x, rng)
        assert all(e < TOL for e in errs.values())

    def test_two_layer_stack_with_cyclic(self, rng):
        p = rand_params(rng, 3)
        layers = [
            L.GaborConv(1, 2, 3, p.thetas, p.lambdas, rng=rng),
            L.CRelu(2),
            L.CyclicGaborConv(2, 2, 3, p.thetas, p.lambdas, rng=rng),
            L.OrientationMaxPool(),
        ]
        self.check(layers, random_ctensor(rng, (2, 1, 6, 6)), rng)


class TestGradModes:
    def test_paper_mode_agrees_on_symmetric_bank_gradient(self, rng):
        """The closed-form update variant contracts d(m_re + m_im) with the
        averaged modulated-kernel gradient, so it coincides with the plain
        chain rule exactly when that gradient's real/imag planes are equal."""
        u, k = 3, 3
        thetas = rng.uniform(0, 2 * np.pi, u)
        lambdas = rng.uniform(2.5, 6.0, u)
        gm_plane = rng.standard_normal((2, 2, u, k, k))
        gm = ComplexTensor(gm_plane, gm_plane.copy())
        grads = {}
        for mode in ("chain", "paper"):
            layer = L.GaborConv(2, 2, k, thetas, lambdas, grad_mode=mode,
                                rng=np.random.default_rng(7))
            gre, gim = gabor_bank(layer.gabor_params(), layer.grid)
            for q in layer.params():
                q.zero_grad()
            layer._param_grads_from_bank_grad(gm, gre, gim, layer.gabor_params())
            grads[mode] = (layer.theta.grad.copy(), layer.lam.grad.copy())
        assert np.allclose(grads["chain"][0], grads["paper"][0], atol=1e-10)
        assert np.allclose(grads["chain"][1], grads["paper"][1], atol=1e-10)

    def test_paper_mode_trains(self, rng):
        # the variant must at least produce finite gradients end to end
        p = rand_params(rng, 3)
        layer = L.GaborConv(1, 2, 3, p.thetas, p.lambdas, grad_mode="paper",
                            rng=rng)
        x = random_ctensor(rng, (2, 1, 6, 6))
        out = layer.forward(x)
        for q in layer.params():
            q.zero_grad()
        layer.backward(random_ctensor(rng, out.shape))
        assert np.isfinite(layer.theta.grad).all()
        assert np.isfinite(layer.lam.grad).all()

    def test_invalid_mode_rejected(self, rng):
        p = rand_params(rng, 2)
        with pytest.raises(ValueError):
            L.GaborConv(1, 1, 3, p.thetas, p.lambdas, grad_mode="bogus", rng=rng)
