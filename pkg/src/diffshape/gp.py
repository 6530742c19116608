"""Sparse variational Gaussian process over (time, latent) inputs.

The momenta of the shape model are given independent GP priors per
output dimension, sharing one product kernel

    k((t,z),(t',z')) = variance * exp(-(t-t')^2 / (2 length_t^2))
                                * exp(-|z-z'|^2 / (2 length_z^2)).

Inference uses m inducing points with a whitened parameterisation: the
variational posterior is over V with U = chol(K_mm) V, so the prior on V
is standard normal and the KL term needs no kernel matrices. One m x m
covariance factor is shared across all output dimensions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .errors import ConditioningError, ValidationError

JITTER_FACTOR = 1e-6
_JITTER_ESCALATIONS = 2  # two x10 escalations after the base attempt


@dataclass(frozen=True)
class GpKernelParams:
    variance: float
    length_t: float
    length_z: float

    def __post_init__(self):
        if not (self.variance > 0 and self.length_t > 0 and self.length_z > 0):
            raise ValidationError("kernel parameters must be positive")


@dataclass(frozen=True)
class GaussianDist:
    """Diagonal Gaussian: mean (d,), sd (d,) with sd > 0."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        sd = np.asarray(self.sd, dtype=float)
        if mean.shape != sd.shape or mean.ndim != 1:
            raise ValidationError("mean and sd must be 1-D with equal shapes")
        if (sd <= 0).any():
            raise ValidationError("sd must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)


@dataclass(frozen=True)
class InducingState:
    """Inducing locations (m, 1+k) in [0,1] x R^k, whitened variational
    mean q_mean (m, D) and shared lower-triangular factor q_chol (m, m)."""

    locations: np.ndarray
    q_mean: np.ndarray
    q_chol: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        mean = np.asarray(self.q_mean, dtype=float)
        chol = np.asarray(self.q_chol, dtype=float)
        if loc.ndim != 2 or loc.shape[0] < 1 or loc.shape[1] < 2:
            raise ValidationError("locations must be (m>=1, 1+k)")
        m = loc.shape[0]
        if (loc[:, 0] < -1e-12).any() or (loc[:, 0] > 1 + 1e-12).any():
            raise ValidationError("inducing time coordinates must lie in [0,1]")
        if mean.ndim != 2 or mean.shape[0] != m:
            raise ValidationError("q_mean must be (m, D)")
        if chol.shape != (m, m):
            raise ValidationError("q_chol must be (m, m)")
        if (np.diag(chol) <= 0).any():
            raise ValidationError("q_chol diagonal must be positive")
        if np.abs(np.triu(chol, 1)).max(initial=0.0) > 0:
            raise ValidationError("q_chol must be lower triangular")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "q_mean", mean)
        object.__setattr__(self, "q_chol", chol)


def kernel_tz(a, b, params):
    """Kernel matrix between input sets a (p, 1+k) and b (q, 1+k)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    dt2 = (a[:, :1] - b[:, :1].T) ** 2
    dz2 = ((a[:, None, 1:] - b[None, :, 1:]) ** 2).sum(axis=2)
    return params.variance * np.exp(-dt2 / (2.0 * params.length_t**2)
                                    - dz2 / (2.0 * params.length_z**2))


def chol_with_jitter(mat, variance):
    """Cholesky of ``mat`` plus escalating jitter (1e-6 x variance, two
    x10 escalations). Returns (factor, jitter used); raises
    ConditioningError when all attempts fail."""
    jitter = JITTER_FACTOR * float(variance)
    eye = np.eye(mat.shape[0])
    for attempt in range(_JITTER_ESCALATIONS + 1):
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ConditioningError(
        f"Cholesky failed after {_JITTER_ESCALATIONS + 1} jitter attempts "
        f"(last jitter {jitter / 10.0:.3g})")


def conditional_mean_cov(query, inducing, params):
    """Sparse posterior of the GP at query inputs.

    Returns (mean (q, D), cov (q, q)); the covariance is shared across
    output dimensions: Nystrom residual K_qq - A A^T plus the inducing
    posterior term A S A^T, with A = K_qm chol(K_mm)^{-T} and
    S = q_chol q_chol^T.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    k_mm = kernel_tz(inducing.locations, inducing.locations, params)
    l_m, _ = chol_with_jitter(k_mm, params.variance)
    k_qm = kernel_tz(query, inducing.locations, params)
    a = solve_triangular(l_m, k_qm.T, lower=True).T
    mean = a @ inducing.q_mean
    b = a @ inducing.q_chol
    cov = kernel_tz(query, query, params) - a @ a.T + b @ b.T
    diag = np.diagonal(cov).copy()
    neg = diag < 0
    if neg.any():
        if (diag < -1e-9 * params.variance).any():
            raise ConditioningError("predictive covariance has a significantly "
                                    "negative diagonal")
        warnings.warn("clamping tiny negative predictive variances to zero")
        cov = cov.copy()
        cov[np.diag_indices_from(cov)] = np.where(neg, 0.0, diag)
    return mean, cov


def sample_reparam(dist, draws):
    """Pathwise sample mean + sd * draws (differentiable in the
    distribution's parameters when computed on the tape)."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape != dist.mean.shape:
        raise ValidationError("draws must match the distribution's shape")
    return dist.mean + dist.sd * draws


def kl_gaussian_diag(q, p=None):
    """KL(q || p) for diagonal Gaussians; p defaults to standard normal."""
    if p is None:
        mean = q.mean
        sd = q.sd
        return float(0.5 * np.sum(sd**2 + mean**2 - 1.0 - 2.0 * np.log(sd)))
    var_ratio = (q.sd / p.sd) ** 2
    mean_term = ((q.mean - p.mean) / p.sd) ** 2
    return float(0.5 * np.sum(var_ratio + mean_term - 1.0 - np.log(var_ratio)))


def kl_whitened_inducing(q_mean, q_chol):
    """KL(q(V) || N(0, I)) summed over the D output dimensions sharing one
    covariance factor: 0.5 |q_mean|_F^2 + D * 0.5 (tr(LL^T) - m - 2 log|L|)."""
    q_mean = np.asarray(q_mean, dtype=float)
    q_chol = np.asarray(q_chol, dtype=float)
    m = q_chol.shape[0]
    d = q_mean.shape[1]
    trace = float((q_chol**2).sum())
    logdet = float(np.log(np.diag(q_chol)).sum())
    return float(0.5 * (q_mean**2).sum() + d * 0.5 * (trace - m - 2.0 * logdet))


# ---------------------------------------------------------------------------
# tape-level pieces used by the model's ELBO


def kernel_tz_var(a, b, variance, log_length_t, log_length_z):
    """Differentiable kernel matrix; a, b are (p,1+k)/(q,1+k) Vars or
    arrays, the hyperparameters are scalar Vars (variance = exp of a log
    leaf upstream)."""
    a = ad.wrap(a)
    b = ad.wrap(b)
    ta, za = a[:, :1], a[:, 1:]
    tb, zb = b[:, :1], b[:, 1:]
    dt2 = ad.square(ta - ad.swap_last2(tb))
    za2 = ad.sum_(ad.square(za), axis=1, keepdims=True)
    zb2 = ad.sum_(ad.square(zb), axis=1, keepdims=True)
    dz2 = za2 + ad.swap_last2(zb2) - 2.0 * ad.matmul(za, ad.swap_last2(zb))
    gamma_t = 0.5 * ad.exp(-2.0 * log_length_t)
    gamma_z = 0.5 * ad.exp(-2.0 * log_length_z)
    return variance * ad.exp(-(dt2 * gamma_t) - (dz2 * gamma_z))


def whitened_conditional_mean_var(query, locations, q_mean, variance,
                                  log_length_t, log_length_z):
    """Differentiable conditional mean A @ q_mean with
    A = K_qm chol(K_mm)^{-T}; returns (mean Var, A Var)."""
    k_mm = kernel_tz_var(locations, locations, variance, log_length_t, log_length_z)
    m = ad.value_of(locations).shape[0]
    _, jitter = chol_with_jitter(ad.value_of(k_mm), float(ad.value_of(variance)))
    l_m = ad.cholesky(k_mm + (jitter / float(ad.value_of(variance))) * variance * np.eye(m))
    k_qm = kernel_tz_var(query, locations, variance, log_length_t, log_length_z)
    a = ad.swap_last2(ad.solve_lower(l_m, ad.swap_last2(k_qm)))
    return ad.matmul(a, q_mean), a


def kl_whitened_inducing_var(q_mean, chol_logdiag, chol_strict):
    """Differentiable whitened-inducing KL from the raw parameters:
    L = strict_lower(chol_strict) + diag(exp(chol_logdiag))."""
    m = ad.value_of(chol_logdiag).shape[0]
    d = ad.value_of(q_mean).shape[1]
    mask = np.tril(np.ones((m, m)), -1)
    diag_e = ad.exp(chol_logdiag)
    trace = ad.sum_(ad.square(chol_strict * mask)) + ad.sum_(ad.square(diag_e))
    logdet = ad.sum_(chol_logdiag)
    mean_term = 0.5 * ad.sum_(ad.square(q_mean))
    return mean_term + (0.5 * d) * (trace - float(m) - 2.0 * logdet)


def kl_gaussian_diag_var(mean, log_sd):
    """Differentiable KL(N(mean, exp(log_sd)^2) || N(0, I)) summed over
    all entries; row sums are returned so callers can weight per shape."""
    sd2 = ad.exp(2.0 * log_sd)
    per = 0.5 * (sd2 + ad.square(mean) - 1.0 - 2.0 * log_sd)
    return ad.sum_(per, axis=tuple(range(1, ad.value_of(mean).ndim)))


def assemble_chol(chol_logdiag, chol_strict):
    """Tape-level lower-triangular factor from its free parameters."""
    m = ad.value_of(chol_logdiag).shape[0]
    mask = np.tril(np.ones((m, m)), -1)
    eye = np.eye(m)
    diag_part = ad.reshape(ad.exp(chol_logdiag), (m, 1)) * eye
    return chol_strict * mask + diag_part
