"""Exponential-family primitives for the variational factors.

Four families cover every factor in the model: Gaussian (means and loading
entries, latent coordinates), inverse-gamma (noise and shrinkage scales),
gamma (local shrinkage precisions and their rates), and Dirichlet (mixing
weights). Each family gets the same small toolkit, vectorized over numpy
arrays of parameters:

* moments used by the conjugate updates and the ELBO,
* natural-parameter maps (``*_to_natural`` / ``*_from_natural``),
* the Fisher information both in natural coordinates (the Hessian of the
  log partition) and in the stored parameterization,
* entropies.

Conventions, fixed once so every caller agrees:

* Gaussian is stored as (mean m, variance v); natural (m/v, -1/(2v));
  sufficient statistics (x, x^2).
* Inverse-gamma is stored as (shape a, scale b), density propto
  x^(-a-1) exp(-b/x); natural (-a-1, -b); statistics (log x, 1/x).
* Gamma is stored as (shape a, RATE b), density propto
  x^(a-1) exp(-b x); natural (a-1, -b); statistics (log x, x).
* Dirichlet is stored as the concentration vector alpha; the natural
  parameter is taken to be alpha itself (base measure prod x_k^-1),
  so conjugate count updates read directly as alpha = rho + counts.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln, polygamma


def _trigamma(x):
    return polygamma(1, x)


# --------------------------------------------------------------------------
# Gaussian (mean, variance)
# --------------------------------------------------------------------------

def gaussian_to_natural(m, v):
    return m / v, -0.5 / v


def gaussian_from_natural(eta1, eta2):
    v = -0.5 / eta2
    return eta1 * v, v


def gaussian_entropy(v):
    return 0.5 * np.log(2.0 * np.pi * np.e * v)


def gaussian_fisher_natural(m, v):
    """Hessian of the log partition at (m, v), a (..., 2, 2) array."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.empty(np.broadcast(m, v).shape + (2, 2))
    out[..., 0, 0] = v
    out[..., 0, 1] = out[..., 1, 0] = 2.0 * m * v
    out[..., 1, 1] = 4.0 * m**2 * v + 2.0 * v**2
    return out


def gaussian_fisher_stored(m, v):
    """Fisher information in (m, v) coordinates: diag(1/v, 1/(2 v^2))."""
    m, v = np.broadcast_arrays(np.asarray(m, float), np.asarray(v, float))
    out = np.zeros(m.shape + (2, 2))
    out[..., 0, 0] = 1.0 / v
    out[..., 1, 1] = 0.5 / v**2
    return out


def gaussian_jacobian_unconstrained(m, v):
    """d(eta)/d(m, log v), rows over natural coordinates."""
    m, v = np.broadcast_arrays(np.asarray(m, float), np.asarray(v, float))
    J = np.zeros(m.shape + (2, 2))
    J[..., 0, 0] = 1.0 / v
    J[..., 0, 1] = -m / v
    J[..., 1, 1] = 0.5 / v
    return J


# --------------------------------------------------------------------------
# Inverse-gamma (shape, scale)
# --------------------------------------------------------------------------

def invgamma_to_natural(a, b):
    return -a - 1.0, -np.asarray(b, dtype=float)


def invgamma_from_natural(eta1, eta2):
    return -eta1 - 1.0, -np.asarray(eta2, dtype=float)


def invgamma_mean_inv(a, b):
    """E[1/x]."""
    return a / b


def invgamma_mean_log(a, b):
    """E[log x]."""
    return np.log(b) - digamma(a)


def invgamma_mode(a, b):
    return b / (a + 1.0)


def invgamma_entropy(a, b):
    return a + np.log(b) + gammaln(a) - (1.0 + a) * digamma(a)


def invgamma_fisher_natural(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = _trigamma(a)
    out[..., 0, 1] = out[..., 1, 0] = -1.0 / b
    out[..., 1, 1] = a / b**2
    return out


def invgamma_fisher_stored(a, b):
    # the (a, b) -> natural map is affine with Jacobian diag(-1, -1),
    # so the Fisher matrix coincides with the natural-coordinate one
    return invgamma_fisher_natural(a, b)


def invgamma_jacobian_unconstrained(a, b):
    """d(eta)/d(log a, log b)."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    J = np.zeros(a.shape + (2, 2))
    J[..., 0, 0] = -a
    J[..., 1, 1] = -b
    return J


# --------------------------------------------------------------------------
# Gamma (shape, rate)
# --------------------------------------------------------------------------

def gamma_to_natural(a, b):
    return np.asarray(a, dtype=float) - 1.0, -np.asarray(b, dtype=float)


def gamma_from_natural(eta1, eta2):
    return eta1 + 1.0, -np.asarray(eta2, dtype=float)


def gamma_mean(a, b):
    return a / b


def gamma_mean_log(a, b):
    return digamma(a) - np.log(b)


def gamma_entropy(a, b):
    return a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)


def gamma_fisher_natural(a, b):
    # Cov(log x, x) = +1/b; the sign differs from the stored-coordinate
    # Fisher because the (a, rate) -> natural map flips the second axis
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = _trigamma(a)
    out[..., 0, 1] = out[..., 1, 0] = 1.0 / b
    out[..., 1, 1] = a / b**2
    return out


def gamma_fisher_stored(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = _trigamma(a)
    out[..., 0, 1] = out[..., 1, 0] = -1.0 / b
    out[..., 1, 1] = a / b**2
    return out


def gamma_jacobian_unconstrained(a, b):
    """d(eta)/d(log a, log b)."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    J = np.zeros(a.shape + (2, 2))
    J[..., 0, 0] = a
    J[..., 1, 1] = -b
    return J


# --------------------------------------------------------------------------
# Dirichlet (concentration vector)
# --------------------------------------------------------------------------

def dirichlet_mean_log(alpha):
    """E[log p_k], vectorized over the trailing axis."""
    alpha = np.asarray(alpha, dtype=float)
    return digamma(alpha) - digamma(alpha.sum(axis=-1, keepdims=True))


def dirichlet_mean(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def dirichlet_entropy(alpha):
    alpha = np.asarray(alpha, dtype=float)
    a0 = alpha.sum(axis=-1)
    K = alpha.shape[-1]
    log_beta = gammaln(alpha).sum(axis=-1) - gammaln(a0)
    return (log_beta + (a0 - K) * digamma(a0)
            - ((alpha - 1.0) * digamma(alpha)).sum(axis=-1))


def dirichlet_fisher_natural(alpha):
    """Trigamma-based Fisher matrix, symmetric PD for alpha > 0."""
    alpha = np.asarray(alpha, dtype=float)
    return np.diag(_trigamma(alpha)) - _trigamma(alpha.sum()) * np.ones(
        (alpha.size, alpha.size))


def dirichlet_fisher_stored(alpha):
    # natural parameter is alpha itself under our base-measure convention
    return dirichlet_fisher_natural(alpha)


def dirichlet_jacobian_unconstrained(alpha):
    """d(alpha)/d(log alpha) = diag(alpha)."""
    return np.diag(np.asarray(alpha, dtype=float))


def categorical_entropy(r, axis=-1):
    """Entropy of categorical factors; zero-probability entries contribute 0."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r > 0.0, r * np.log(r), 0.0)
    return -terms.sum(axis=axis)
