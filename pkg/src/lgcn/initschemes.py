"""Weight and Gabor-parameter initialization.

Complex weights follow the Rayleigh-magnitude construction: |w| is drawn
so that Var[|w|] = (4 - pi) / (2 n_in), phase uniform on [0, 2pi).  Gabor
wavelengths default to Normal(3 sqrt(U), sqrt(U)/4) (variance, not std),
orientations uniform around the full circle.

Scheme names appear verbatim in experiment configs; each maps to one
ablation-table variant.
"""

from dataclasses import dataclass

import numpy as np

from .ctensor import ComplexKernel, ComplexTensor
from .gabor import GaborParams

LAMBDA_SCHEMES = ("normal-3sqrtU", "fixed-3", "normal-3", "uniform-aliasing")
SIGMA_SCHEMES = ("fixed-sqrt2inv", "fixed-pi", "normal-pi-learnable")
SHARING_MODES = ("per-filter", "single-per-layer")


class InitConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InitStrategy:
    lambda_scheme: str = "normal-3sqrtU"
    sigma_scheme: str = "fixed-pi"
    sharing: str = "per-filter"

    def __post_init__(self):
        if self.lambda_scheme not in LAMBDA_SCHEMES:
            raise InitConfigError(
                f"unknown lambda scheme {self.lambda_scheme!r}; valid: {LAMBDA_SCHEMES}")
        if self.sigma_scheme not in SIGMA_SCHEMES:
            raise InitConfigError(
                f"unknown sigma scheme {self.sigma_scheme!r}; valid: {SIGMA_SCHEMES}")
        if self.sharing not in SHARING_MODES:
            raise InitConfigError(
                f"unknown sharing mode {self.sharing!r}; valid: {SHARING_MODES}")

    @property
    def learn_sigma(self):
        return self.sigma_scheme == "normal-pi-learnable"

    @property
    def shared(self):
        return self.sharing == "single-per-layer"

    @property
    def aliasing(self):
        return self.lambda_scheme == "uniform-aliasing"

    def to_dict(self):
        return {"lambda_scheme": self.lambda_scheme, "sigma_scheme": self.sigma_scheme,
                "sharing": self.sharing}

    @staticmethod
    def from_dict(d):
        extra = set(d) - {"lambda_scheme", "sigma_scheme", "sharing"}
        if extra:
            raise InitConfigError(f"unknown init strategy keys: {sorted(extra)}")
        return InitStrategy(**d)


def init_complex_weights(n_in, shape, rng) -> ComplexKernel:
    """Rayleigh magnitude with Var[|w|] = (4 - pi)/(2 n_in), uniform phase."""
    if n_in <= 0:
        raise InitConfigError(f"fan-in must be positive, got {n_in}")
    s = 1.0 / np.sqrt(n_in)             # Rayleigh scale: Var[|w|] = (4-pi)/2 * s^2
    mag = rng.rayleigh(scale=s, size=shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return ComplexKernel(ComplexTensor(mag * np.cos(phase), mag * np.sin(phase)))


def he_uniform(shape, n_in, rng):
    """Standard He-style uniform init for real weights and FC layers."""
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=shape)


def _draw_lambdas(u, strategy: InitStrategy, rng):
    n = 1 if strategy.shared else u
    scheme = strategy.lambda_scheme
    if scheme == "fixed-3":
        return np.full(n, 3.0)
    if scheme == "normal-3":
        return rng.normal(3.0, np.sqrt(0.25), size=n)
    if scheme == "normal-3sqrtU":
        return rng.normal(3.0 * np.sqrt(u), np.sqrt(np.sqrt(u) / 4.0), size=n)
    if scheme == "uniform-aliasing":
        return rng.uniform(-1.5, 1.5, size=n)
    raise InitConfigError(scheme)


def _draw_sigmas(u, strategy: InitStrategy, rng):
    n = 1 if strategy.shared else u
    scheme = strategy.sigma_scheme
    if scheme == "fixed-sqrt2inv":
        return np.full(n, 1.0 / np.sqrt(2.0)), False
    if scheme == "fixed-pi":
        return np.full(n, np.pi), False
    if scheme == "normal-pi-learnable":
        return rng.normal(np.pi, np.sqrt(0.25), size=n), True
    raise InitConfigError(scheme)


def init_gabor_params(u, strategy: InitStrategy = None, rng=None) -> GaborParams:
    """Draw per-layer Gabor parameters; thetas always uniform on [0, 2pi)."""
    if u < 1:
        raise InitConfigError(f"need U >= 1, got {u}")
    strategy = strategy or InitStrategy()
    rng = rng if rng is not None else np.random.default_rng()
    thetas = rng.uniform(0.0, 2.0 * np.pi, size=u)
    lam = _draw_lambdas(u, strategy, rng)
    sig, learnable = _draw_sigmas(u, strategy, rng)
    lam_full = np.repeat(lam, u) if lam.size == 1 else lam
    sig_full = np.repeat(sig, u) if sig.size == 1 else sig
    if learnable:
        return GaborParams(thetas, lam_full, sigmas=sig_full, aliasing_ok=strategy.aliasing)
    return GaborParams(thetas, lam_full, sigma=float(sig_full[0]),
                       aliasing_ok=strategy.aliasing)
