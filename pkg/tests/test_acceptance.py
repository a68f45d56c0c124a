"""Acceptance gate: one test (or test group) per release criterion.

Criteria 5 and 6 exercise rotated MNIST and therefore need the four MNIST
IDX files on disk (under $LGCN_DATA_DIR, default ./data).  When the files
are absent those tests FAIL with an explanatory message rather than
silently passing or skipping: the criterion is then unverified, and the
run is red until the data is supplied.
"""

import json
import math
import os
import struct
import time

import numpy as np
import pytest

from lgcn import data as D
from lgcn import layers as L
from lgcn import models as M
from lgcn import train as T
from lgcn.cli import MNIST_FILES, load_mnist
from lgcn.ctensor import ComplexTensor
from lgcn.gabor import GaborGrid, GaborParams, gabor_filter
from lgcn.gradcheck import check_param_grads
from lgcn.initschemes import InitStrategy, init_complex_weights, init_gabor_params
from conftest import naive_ccorr2d, random_ctensor, to_complex_array

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
EXACT_TOL = 1e-12


def mnist_root():
    return os.environ.get("LGCN_DATA_DIR", "data")


def require_mnist():
    root = mnist_root()
    missing = [n for pair in MNIST_FILES.values() for n in pair
               if not os.path.exists(os.path.join(root, n))]
    if missing:
        pytest.fail(
            f"UNVERIFIED CRITERION: rotated-MNIST checks need the MNIST IDX "
            f"files, which are not present ({missing} missing under "
            f"{root!r}). Download the four files into that directory (or "
            f"point LGCN_DATA_DIR at them) and re-run. This failure is "
            f"intentional: the criterion cannot be checked without the data.")


def rand_gabor_params(rng, u):
    return GaborParams(thetas=rng.uniform(0, 2 * np.pi, u),
                       lambdas=rng.uniform(2.5, 6.0, u))


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients match central finite differences
# ---------------------------------------------------------------------------

class TestCriterion1GradientCorrectness:
    def test_100_random_configurations_under_2_minutes(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(20260826)
        worst = {}
        for i in range(100):
            u = int(rng.integers(1, 4))
            c_in = int(rng.integers(1, 3))
            c_out = int(rng.integers(1, 3))
            k = int(rng.choice([3, 5]))
            thetas = rng.uniform(0, 2 * np.pi, u)
            lambdas = rng.uniform(2.5, 6.0, u)
            lift = L.GaborConv(c_in, c_out, k, thetas, lambdas,
                               rng=np.random.default_rng(1000 + i))
            stack = [lift, L.CRelu(c_out)]
            if i % 3 == 0:
                # every third configuration goes through a second, cyclic layer
                stack.append(L.CyclicGaborConv(
                    c_out, c_out, 3, rng.uniform(0, 2 * np.pi, u),
                    rng.uniform(2.5, 6.0, u),
                    rng=np.random.default_rng(2000 + i)))
            h = int(rng.integers(k + 2, k + 5))
            x = ComplexTensor(rng.standard_normal((1, c_in, h, h)),
                              rng.standard_normal((1, c_in, h, h)))
            for key, err in check_param_grads(stack, x, rng,
                                              n_entries=3).items():
                name = key.split(".", 1)[1]
                worst[name] = max(worst.get(name, 0.0), err)
            if i % 10 == 0:
                xr = rng.standard_normal((1, 2, 6, 6))
                for key, err in check_param_grads([L.ArcsinhScale()], xr,
                                                  rng).items():
                    name = key.split(".", 1)[1]
                    worst[name] = max(worst.get(name, 0.0), err)
        for cls in ("theta", "lambda", "A", "B", "crelu_bias",
                    "arcsinh_a", "arcsinh_b"):
            assert cls in worst, f"parameter class {cls} never checked"
            assert worst[cls] < GRAD_TOL, (cls, worst[cls])
        assert time.perf_counter() - t0 < 120


# ---------------------------------------------------------------------------
# criterion 2: fast implementations equal naive loop oracles
# ---------------------------------------------------------------------------

class TestCriterion2OracleEquivalence:
    def test_randomized_instances_under_1_minute(self, rng):
        t0 = time.perf_counter()
        for _ in range(20):
            n = int(rng.integers(1, 3))
            c_in = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 4))
            u = int(rng.integers(1, 9))
            h = int(rng.integers(4, 9))
            k = 3
            omega = L.ComplexKernel(random_ctensor(rng, (c_out, c_in, k, k)))
            p = rand_gabor_params(rng, u)
            bank = L.modulate(omega, p)

            # modulation: elementwise complex product
            from lgcn.gabor import gabor_bank
            gre, gim = gabor_bank(p, GaborGrid(k))
            expected = ((gre + 1j * gim)[None, None]
                        * to_complex_array(omega.weights)[:, :, None])
            assert np.abs(to_complex_array(bank) - expected).max() < EXACT_TOL

            # complex convolution: naive complex loop oracle
            x = random_ctensor(rng, (n, c_in, h, h))
            out = to_complex_array(L.gabor_conv(x, bank))
            xc = to_complex_array(x)
            bc = to_complex_array(bank)
            for uu in range(u):
                ref = naive_ccorr2d(xc, bc[:, :, uu], padding=k // 2)
                assert np.abs(out[:, :, uu] - ref).max() < ORACLE_TOL

            # cyclic convolution: index-difference oracle
            xo = random_ctensor(rng, (n, c_in, u, h, h))
            oc = to_complex_array(L.cyclic_gabor_conv(xo, omega, p))
            xoc = to_complex_array(xo)
            for j in range(u):
                ref = sum(naive_ccorr2d(xoc[:, :, i], bc[:, :, (j - i) % u],
                                        padding=k // 2) for i in range(u))
                assert np.abs(oc[:, :, j] - ref).max() < ORACLE_TOL
        assert time.perf_counter() - t0 < 60


# ---------------------------------------------------------------------------
# criterion 3: cyclic-shift equivariance
# ---------------------------------------------------------------------------

class TestCriterion3CyclicEquivariance:
    def test_50_random_trials(self, rng):
        for _ in range(50):
            u = int(rng.integers(2, 7))
            c = int(rng.integers(1, 3))
            x = random_ctensor(rng, (1, c, u, 5, 5))
            omega = L.ComplexKernel(random_ctensor(rng, (c, c, 3, 3)))
            p = rand_gabor_params(rng, u)
            s = int(rng.integers(1, u))
            y = to_complex_array(L.cyclic_gabor_conv(x, omega, p))
            xs = ComplexTensor(np.roll(x.re, s, axis=2),
                               np.roll(x.im, s, axis=2))
            ys = to_complex_array(L.cyclic_gabor_conv(xs, omega, p))
            assert np.abs(ys - np.roll(y, s, axis=2)).max() < ORACLE_TOL


# ---------------------------------------------------------------------------
# criterion 4: Gabor invariants and initialization statistics
# ---------------------------------------------------------------------------

class TestCriterion4GaborAndInitStatistics:
    def test_parity_under_theta_plus_pi(self, rng):
        g = GaborGrid(7)
        for _ in range(50):
            p0 = rand_gabor_params(rng, 1)
            p1 = GaborParams(thetas=p0.thetas + np.pi, lambdas=p0.lambdas)
            re0, im0 = gabor_filter(p0, 0, g)
            re1, im1 = gabor_filter(p1, 0, g)
            assert np.abs(re1 - re0).max() < EXACT_TOL
            assert np.abs(im1 + im0).max() < EXACT_TOL

    def test_envelope_isotropy(self, rng):
        g = GaborGrid(7)
        ref = None
        for theta in rng.uniform(0, 2 * np.pi, 50):
            p = GaborParams(thetas=np.array([theta]), lambdas=np.array([4.0]))
            re, im = gabor_filter(p, 0, g)
            mag = np.hypot(re, im)
            if ref is None:
                ref = mag
            assert np.abs(mag - ref).max() < EXACT_TOL

    def test_omega_magnitude_variance_at_1e5_draws(self):
        rng = np.random.default_rng(77)
        n_in = 100
        k = init_complex_weights(n_in, (12000, 1, 3, 3), rng)  # 108k draws
        mags = k.weights.magnitude().reshape(-1)
        target = (4 - np.pi) / (2 * n_in)
        assert abs(mags.var() - target) / target < 0.05

    def test_lambda_init_stats_at_1e5_draws(self):
        rng = np.random.default_rng(78)
        u = 4
        draws = np.concatenate(
            [init_gabor_params(u, InitStrategy(), rng).lambdas
             for _ in range(100_000 // u)])
        assert abs(draws.mean() - 6.0) / 6.0 < 0.05
        assert abs(draws.var() - 0.5) / 0.5 < 0.05


# ---------------------------------------------------------------------------
# criterion 5: desk-scale rotated MNIST accuracy and variant ordering
# ---------------------------------------------------------------------------

def _train_rotated_mnist(variant, u, epochs, n_train, n_test, seed):
    X, y = load_mnist(mnist_root(), "train")
    Xt, yt = load_mnist(mnist_root(), "test")
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.shape[0], size=n_train, replace=False)
    Xr, yr, _ = D.rotated_dataset(X[idx].astype(np.float32) / 255.0, y[idx],
                                  rng)
    tidx = rng.choice(Xt.shape[0], size=n_test, replace=False)
    Xte, yte, _ = D.rotated_dataset(Xt[tidx].astype(np.float32) / 255.0,
                                    yt[tidx], rng)
    n_val = n_train // 10
    net = M.Classifier(M.ClassifierConfig(variant=variant, U=u, seed=seed))
    T.fit(net, (Xr[:, None][n_val:], yr[n_val:]),
          (Xr[:, None][:n_val], yr[:n_val]), "classification",
          T.TrainConfig(epochs=epochs, batch_size=64, seed=seed))
    return net, T.evaluate(net, Xte[:, None], yte, "classification")


class TestCriterion5RotatedMnist:
    def test_accuracy_and_variant_ordering(self):
        require_mnist()
        acc = {}
        for variant in ("lgcn", "real-static", "real-plain"):
            _, acc[variant] = _train_rotated_mnist(
                variant, u=4, epochs=10, n_train=10_000, n_test=2_000, seed=0)
        assert acc["lgcn"] >= 0.93, acc
        assert acc["lgcn"] >= acc["real-static"] >= acc["real-plain"], acc


# ---------------------------------------------------------------------------
# criterion 6: rotation-response flatness improves with more orientations
# ---------------------------------------------------------------------------

class TestCriterion6RotationResponse:
    def test_peak_to_peak_decreases_with_u(self):
        require_mnist()
        X, y = load_mnist(mnist_root(), "train")
        Xt, _ = load_mnist(mnist_root(), "test")
        probe = Xt[:200].astype(np.float32) / 255.0
        ptp = []
        for u in (1, 2, 4, 8):
            net, _ = _train_rotated_mnist("lgcn", u=u, epochs=3,
                                          n_train=4_000, n_test=200, seed=0)
            ratios = []
            for deg in range(0, 360, 30):
                Xr = np.stack([D.rotate_sample(img, math.radians(deg))
                               for img in probe])
                _, ratio = net.forward_probe(Xr[:, None])
                ratios.append(ratio)
            ptp.append(max(ratios) - min(ratios))
        inversions = sum(1 for a, b in zip(ptp, ptp[1:]) if b > a)
        assert inversions <= 1, ptp


# ---------------------------------------------------------------------------
# criterion 7: synthesized-cirrus segmentation trends
# ---------------------------------------------------------------------------

CIRRUS_SEEDS = (1, 2, 3)


def _cirrus_iou(samples, split, model_variant, seed):
    X = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples]).astype(np.float64)
    tr, va, te = split["train"], split["val"], split["test"]
    net = M.SegNet(M.SegNetConfig(variant=model_variant, task="segmentation",
                                  depth=3, base_channels=3, U=4, seed=seed))
    T.fit(net, (X[tr], y[tr]), (X[va], y[va]), "segmentation",
          T.TrainConfig(epochs=4, batch_size=8, seed=seed))
    return T.evaluate(net, X[te], y[te], "segmentation", batch_size=8)


class TestCriterion7CirrusTrends:
    def test_iou_trends_under_90_minutes(self):
        t0 = time.perf_counter()
        # median over seeds: at this model scale an occasional unlucky init
        # collapses a single run, which the median discards
        med_iou = {}
        for variant in D.CIRRUS_VARIANTS:
            samples, split = D.gen_cirrus_dataset(
                D.CirrusConfig(variant=variant, seed=11))
            for mv in ("lgcn", "real-plain"):
                vals = [_cirrus_iou(samples, split, mv, seed)
                        for seed in CIRRUS_SEEDS]
                med_iou[variant, mv] = float(np.median(vals))
        # oriented model at least matches the plain CNN on random orientations
        assert (med_iou["random-orientation", "lgcn"]
                >= med_iou["random-orientation", "real-plain"]), med_iou
        # and degrades less from the easy to the hard variant
        drop_lgcn = (med_iou["fixed-orientation", "lgcn"]
                     - med_iou["random+artefacts", "lgcn"])
        drop_cnn = (med_iou["fixed-orientation", "real-plain"]
                    - med_iou["random+artefacts", "real-plain"])
        assert drop_lgcn < drop_cnn, med_iou
        assert time.perf_counter() - t0 < 90 * 60


# ---------------------------------------------------------------------------
# criterion 8: determinism and persistence
# ---------------------------------------------------------------------------

class TestCriterion8DeterminismPersistence:
    def _toy(self, rng, n=40):
        y = rng.integers(0, 2, n)
        X = rng.standard_normal((n, 1, 10, 10)) + y[:, None, None, None]
        return X, y

    def test_same_seed_identical_metrics_logs(self, rng, tmp_path):
        X, y = self._toy(rng)
        logs = []
        for run in range(2):
            log = tmp_path / f"log{run}.jsonl"
            net = M.Classifier(M.ClassifierConfig(
                variant="lgcn", widths=(4,), convs_per_block=1, U=2,
                fc_widths=(8,), num_classes=2, in_size=10, seed=5))
            T.fit(net, (X[:32], y[:32]), (X[32:], y[32:]), "classification",
                  T.TrainConfig(epochs=3, batch_size=8, seed=5,
                                log_path=str(log)))
            recs = [json.loads(l) for l in log.read_text().splitlines()]
            for r in recs:
                r.pop("wall_time", None)
            logs.append(recs)
        assert logs[0] == logs[1]

    def test_checkpoint_round_trip_byte_exact(self, rng, tmp_path):
        net = M.SegNet(M.SegNetConfig(variant="lgcn", depth=1,
                                      base_channels=2, U=2, seed=3))
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        M.save_checkpoint(a, net)
        loaded, _ = M.load_checkpoint(a)
        M.save_checkpoint(b, loaded)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_idx_parser_reports_corruption_offsets(self, tmp_path):
        ip = tmp_path / "images"
        lp = tmp_path / "labels"
        imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        with open(ip, "wb") as f:
            f.write(struct.pack(">IIII", D.IDX_MAGIC_IMAGES, *imgs.shape))
            f.write(imgs.tobytes()[:-4])        # truncate the pixel payload
        with open(lp, "wb") as f:
            f.write(struct.pack(">II", D.IDX_MAGIC_LABELS, 2))
            f.write(bytes([0, 1]))
        with pytest.raises(D.IdxFormatError, match="byte offset 16"):
            D.load_idx(str(ip), str(lp))
        with open(ip, "wb") as f:                # corrupt magic
            f.write(struct.pack(">IIII", 0xDEADBEEF, *imgs.shape))
            f.write(imgs.tobytes())
        with pytest.raises(D.IdxFormatError, match="0xdeadbeef|0xDEADBEEF"):
            D.load_idx(str(ip), str(lp))
