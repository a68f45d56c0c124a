"""Discretized complex Gabor filters and their analytic parameter derivatives.

A filter on the centered integer grid (k, l), with rotated coordinates
k' = k cos(t) + l sin(t) and l' = l cos(t) - k sin(t), is

    G[k, l] = exp(-(k'^2 + gamma^2 l'^2) / (2 sigma^2)) * exp(i(2 pi k'/lam + psi))

The analytic derivatives below hold for psi = 0, gamma = 1 (the regime used
everywhere in this package); the envelope is then isotropic and independent
of the orientation, so only the phase term differentiates.
"""

from dataclasses import dataclass, field

import numpy as np

NYQUIST_LAMBDA = 2.0  # below 2 px/cycle the sinusoid aliases


class GaborParamError(ValueError):
    pass


@dataclass
class GaborParams:
    """Per-layer learnable orientations/wavelengths plus fixed hyperparameters."""

    thetas: np.ndarray          # [U] radians
    lambdas: np.ndarray         # [U] pixels per cycle, > 0
    psi: float = 0.0
    sigma: float = 1.0 / np.sqrt(2.0)
    gamma: float = 1.0
    sigmas: np.ndarray = None   # optional learnable per-filter scales
    aliasing_ok: bool = False   # permit the uniform(-1.5,1.5) aliasing regime

    def __post_init__(self):
        self.thetas = np.atleast_1d(np.asarray(self.thetas, dtype=np.float64))
        self.lambdas = np.atleast_1d(np.asarray(self.lambdas, dtype=np.float64))
        if self.thetas.shape != self.lambdas.shape:
            raise GaborParamError("thetas and lambdas must have equal length")
        if self.thetas.size < 1:
            raise GaborParamError("need at least one orientation")
        if not self.aliasing_ok and np.any(self.lambdas <= 0):
            raise GaborParamError(f"wavelengths must be positive, got {self.lambdas}")
        if np.any(self.lambdas == 0):
            raise GaborParamError("wavelength 0 is undefined")
        if self.sigmas is not None:
            self.sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64))

    @property
    def U(self):
        return self.thetas.size

    def sigma_of(self, u):
        return float(self.sigmas[u]) if self.sigmas is not None else self.sigma


@dataclass
class GaborGrid:
    """Centered integer sampling offsets for an odd kernel size."""

    K: int
    k: np.ndarray = field(init=False)
    l: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise GaborParamError(f"kernel size must be odd and >= 1, got {self.K}")
        half = (self.K - 1) // 2
        offs = np.arange(-half, half + 1, dtype=np.float64)
        self.k, self.l = np.meshgrid(offs, offs, indexing="ij")

    def rotated(self, theta):
        ct, st = np.cos(theta), np.sin(theta)
        kp = self.k * ct + self.l * st
        lp = self.l * ct - self.k * st
        return kp, lp


def _envelope(grid, sigma, gamma, theta):
    kp, lp = grid.rotated(theta)
    return np.exp(-(kp ** 2 + gamma ** 2 * lp ** 2) / (2.0 * sigma ** 2)), kp, lp


def gabor_filter(params: GaborParams, u: int, grid: GaborGrid):
    """Sample filter u on the grid; returns (re, im) float64 [K, K] arrays."""
    lam = float(params.lambdas[u])
    if lam <= 0 and not params.aliasing_ok:
        raise GaborParamError(f"lambda[{u}] = {lam} must be positive")
    if lam == 0:
        raise GaborParamError("wavelength 0 is undefined")
    env, kp, _ = _envelope(grid, params.sigma_of(u), params.gamma, params.thetas[u])
    phase = 2.0 * np.pi / lam * kp + params.psi
    return env * np.cos(phase), env * np.sin(phase)


def dgabor_dtheta(params: GaborParams, u: int, grid: GaborGrid):
    """(d re/d theta, d im/d theta); valid for psi=0, gamma=1."""
    lam = float(params.lambdas[u])
    env, kp, lp = _envelope(grid, params.sigma_of(u), params.gamma, params.thetas[u])
    w = 2.0 * np.pi / lam
    phase = w * kp
    return -w * env * lp * np.sin(phase), w * env * lp * np.cos(phase)


def dgabor_dlambda(params: GaborParams, u: int, grid: GaborGrid):
    """(d re/d lambda, d im/d lambda); valid for psi=0, gamma=1."""
    lam = float(params.lambdas[u])
    env, kp, _ = _envelope(grid, params.sigma_of(u), params.gamma, params.thetas[u])
    w2 = 2.0 * np.pi / lam ** 2
    phase = 2.0 * np.pi / lam * kp
    return w2 * env * kp * np.sin(phase), -w2 * env * kp * np.cos(phase)


def dgabor_dsigma(params: GaborParams, u: int, grid: GaborGrid):
    """Chain rule on the envelope only (no closed form published)."""
    sigma = params.sigma_of(u)
    gre, gim = gabor_filter(params, u, grid)
    _, kp, lp = _envelope(grid, sigma, params.gamma, params.thetas[u])
    scale = (kp ** 2 + params.gamma ** 2 * lp ** 2) / sigma ** 3
    return scale * gre, scale * gim


def gabor_bank(params: GaborParams, grid: GaborGrid):
    """All U filters stacked: (re, im) arrays of shape [U, K, K]."""
    re = np.empty((params.U, grid.K, grid.K))
    im = np.empty_like(re)
    for u in range(params.U):
        re[u], im[u] = gabor_filter(params, u, grid)
    return re, im


def aliasing_lambdas(lambdas) -> np.ndarray:
    """Indices of wavelengths in the aliasing range (Nyquist guard)."""
    lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    return np.flatnonzero(np.abs(lam) <= NYQUIST_LAMBDA)
