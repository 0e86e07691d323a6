"""Pointwise optics evaluated inside the kernels: phase functions, mixtures, Phong factor."""
import math

import numpy as np
from numba import njit

PHASE_HG = 0
PHASE_RAYLEIGH = 1

MODE_EXTINCTION = 0
MODE_SCATTERING = 1

INV_4PI = 1.0 / (4.0 * math.pi)
RAYLEIGH_NORM = 3.0 / (16.0 * math.pi)
HG_ISOTROPIC_G = 1e-6


@njit(cache=True, nogil=True)
def phase_value(kind, g, mu):
    if kind == PHASE_RAYLEIGH:
        return RAYLEIGH_NORM * (1.0 + mu * mu)
    denom = 1.0 + g * g - 2.0 * g * mu
    return (1.0 - g * g) * INV_4PI / (denom * math.sqrt(denom))


@njit(cache=True, nogil=True)
def _cbrt(x):
    if x < 0.0:
        return -((-x) ** (1.0 / 3.0))
    return x ** (1.0 / 3.0)


@njit(cache=True, nogil=True)
def sample_phase_cos(kind, g, u):
    """Inverse CDF of cos(theta) for HG or Rayleigh, u uniform in [0, 1)"""
    if kind == PHASE_RAYLEIGH:
        # mu^3 + 3 mu + 4 - 8u = 0 has a single real root
        w = 4.0 * u - 2.0
        s = math.sqrt(w * w + 1.0)
        mu = _cbrt(w + s) + _cbrt(w - s)
    elif abs(g) < HG_ISOTROPIC_G:
        mu = 2.0 * u - 1.0
    else:
        frac = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
        mu = (1.0 + g * g - frac * frac) / (2.0 * g)
    if mu > 1.0:
        return 1.0
    if mu < -1.0:
        return -1.0
    return mu


@njit(cache=True, nogil=True)
def sample_phase_cos_array(kind, g, u):
    out = np.empty(u.shape[0], dtype=np.float64)
    for i in range(u.shape[0]):
        out[i] = sample_phase_cos(kind, g, u[i])
    return out


@njit(cache=True, nogil=True)
def species_weight(beta, s, v, albedo, mode, fallback):
    if mode == MODE_SCATTERING and not fallback:
        return albedo[s] * beta[s, v]
    return beta[s, v]


@njit(cache=True, nogil=True)
def uses_fallback(beta, v, albedo, mode):
    """Scattering-weighted sampling falls back to extinction weights where beta_s vanishes"""
    if mode != MODE_SCATTERING:
        return False
    total = 0.0
    for s in range(beta.shape[0]):
        total += albedo[s] * beta[s, v]
    return total <= 0.0


@njit(cache=True, nogil=True)
def mixture_terms(beta, v, albedo, kinds, gs, mode, mu):
    """(A, M, W) at voxel v for scattering cosine mu.

    A = sum_j albedo_j beta_j f_j(mu)   scattering kernel of the contribution function
    M = sum_j w_j f_j(mu)               sampled direction density times W
    W = sum_j w_j                       species selection normalizer
    """
    fallback = uses_fallback(beta, v, albedo, mode)
    a = 0.0
    m = 0.0
    w_total = 0.0
    for s in range(beta.shape[0]):
        f = phase_value(kinds[s], gs[s], mu)
        a += albedo[s] * beta[s, v] * f
        w = species_weight(beta, s, v, albedo, mode, fallback)
        m += w * f
        w_total += w
    return a, m, w_total


@njit(cache=True, nogil=True)
def phong_factor(kappa, gamma, c):
    if c < 0.0:
        c = 0.0
    elif c > 1.0:
        c = 1.0
    return 1.0 - kappa + kappa * c ** gamma


@njit(cache=True, nogil=True)
def phong_log_derivatives(kappa, gamma, c):
    """(d log b / d kappa, d log b / d gamma); zero when b vanishes"""
    if c < 0.0:
        c = 0.0
    elif c > 1.0:
        c = 1.0
    cg = c ** gamma
    value = 1.0 - kappa + kappa * cg
    if value <= 0.0:
        return 0.0, 0.0
    d_kappa = (-1.0 + cg) / value
    if c <= 0.0:
        d_gamma = 0.0
    else:
        d_gamma = kappa * cg * math.log(c) / value
    return d_kappa, d_gamma
