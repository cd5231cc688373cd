"""Probability densities and parameter transforms shared by both models.

Everything here is a pure function of its arguments. Densities are
evaluated in log space and return ``-inf`` outside their support instead
of raising, except where an argument is structurally invalid (negative
count, non-positive scale), which raises :class:`DomainError`.

Correlation matrices are handled through their Cholesky factors. The
unconstrained parameterization maps a factor to a flat vector of
canonical partial correlations passed through ``atanh``; the forward map
rebuilds the factor row by row so positive definiteness holds by
construction. The LKJ prior in that unconstrained space factorizes into
independent one-dimensional terms, which keeps both the density and its
gradient cheap and exact.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from .errors import DomainError

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "poisson_log_pmf",
    "poisson_log_pmf_grad",
    "bernoulli_logit_log_pmf",
    "bernoulli_logit_grad",
    "half_cauchy_log_density",
    "half_cauchy_grad",
    "half_cauchy_log_density_t",
    "half_cauchy_grad_t",
    "normal_log_density",
    "normal_grad",
    "mvn_log_density_chol",
    "mvn_grad_x",
    "lkj_cholesky_log_density",
    "sample_lkj_cholesky",
    "check_correlation_cholesky",
    "check_scale_vector",
    "num_cpc",
    "cpc_index_arrays",
    "cpc_to_cholesky",
    "cholesky_to_cpc",
    "cpc_cholesky_vjp",
    "cholesky_to_corr",
    "corr_from_unconstrained",
    "corr_to_unconstrained",
    "corr_unconstrained_log_jacobian",
    "corr_unconstrained_log_prior",
    "scale_from_unconstrained",
    "scale_to_unconstrained",
]


# ---------------------------------------------------------------------------
# Elementary log densities
# ---------------------------------------------------------------------------

def poisson_log_pmf(k, log_mu):
    """Poisson log pmf with the rate given on the log scale.

    Accepts scalars or arrays; ``k`` must hold nonnegative integers.
    """
    k = np.asarray(k)
    if np.any(k < 0):
        raise DomainError("Poisson counts must be nonnegative")
    k = k.astype(np.float64)
    log_mu = np.asarray(log_mu, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = k * log_mu - np.exp(log_mu) - gammaln(k + 1.0)
    return out if out.ndim else float(out)


def poisson_log_pmf_grad(k, log_mu):
    """Gradient of :func:`poisson_log_pmf` with respect to ``log_mu``."""
    k = np.asarray(k, dtype=np.float64)
    log_mu = np.asarray(log_mu, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = k - np.exp(log_mu)
    return out if out.ndim else float(out)


def bernoulli_logit_log_pmf(y, eta):
    """Bernoulli log pmf on the logit scale, overflow safe.

    ``y * eta - log(1 + exp(eta))`` computed via ``logaddexp`` so large
    ``|eta|`` saturates instead of overflowing.
    """
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1)):
        raise DomainError("Bernoulli outcomes must be 0 or 1")
    y = y.astype(np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    out = y * eta - np.logaddexp(0.0, eta)
    return out if out.ndim else float(out)


def bernoulli_logit_grad(y, eta):
    """Gradient of :func:`bernoulli_logit_log_pmf` with respect to ``eta``."""
    y = np.asarray(y, dtype=np.float64)
    out = y - expit(np.asarray(eta, dtype=np.float64))
    return out if out.ndim else float(out)


def half_cauchy_log_density(s, scale):
    """Half-Cauchy(0, scale) log density; support is s > 0."""
    if scale <= 0:
        raise DomainError("half-Cauchy scale must be positive")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise DomainError("half-Cauchy support is the positive reals")
    out = math.log(2.0) - math.log(math.pi * scale) - np.log1p((s / scale) ** 2)
    return out if out.ndim else float(out)


def half_cauchy_grad(s, scale):
    """d/ds of :func:`half_cauchy_log_density`."""
    s = np.asarray(s, dtype=np.float64)
    out = -2.0 * s / (scale * scale + s * s)
    return out if out.ndim else float(out)


def half_cauchy_log_density_t(t, scale):
    """Half-Cauchy log density of s = exp(t) plus the log-scale Jacobian t."""
    t = np.asarray(t, dtype=np.float64)
    s = np.exp(t)
    out = math.log(2.0) - math.log(math.pi * scale) - np.log1p((s / scale) ** 2) + t
    return out if out.ndim else float(out)


def half_cauchy_grad_t(t, scale):
    """d/dt of :func:`half_cauchy_log_density_t`."""
    t = np.asarray(t, dtype=np.float64)
    s2 = np.exp(2.0 * t)
    out = 1.0 - 2.0 * s2 / (scale * scale + s2)
    return out if out.ndim else float(out)


def normal_log_density(x, sd):
    """Univariate zero-mean normal log density."""
    if sd <= 0:
        raise DomainError("normal sd must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = -0.5 * LOG_2PI - math.log(sd) - 0.5 * (x / sd) ** 2
    return out if out.ndim else float(out)


def normal_grad(x, sd):
    """d/dx of :func:`normal_log_density`."""
    x = np.asarray(x, dtype=np.float64)
    out = -x / (sd * sd)
    return out if out.ndim else float(out)


def mvn_log_density_chol(x, sigma, L):
    """Zero-mean MVN log density with covariance diag(sigma) L L' diag(sigma).

    Uses one triangular solve; never forms the covariance or its inverse.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    j = L.shape[0]
    if x.shape[-1] != j or sigma.shape[0] != j:
        raise DomainError("dimension mismatch between x, sigma, and L")
    check_scale_vector(sigma)
    w = solve_triangular(L, (x / sigma).T, lower=True).T
    log_det = np.sum(np.log(sigma)) + np.sum(np.log(np.diag(L)))
    quad = np.sum(w * w, axis=-1)
    out = -0.5 * j * LOG_2PI - log_det - 0.5 * quad
    return out if np.ndim(out) else float(out)


def mvn_grad_x(x, sigma, L):
    """Gradient of :func:`mvn_log_density_chol` with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    w = solve_triangular(L, (x / sigma).T, lower=True)
    v = solve_triangular(L, w, lower=True, trans="T").T
    return -v / sigma


# ---------------------------------------------------------------------------
# Correlation Cholesky factors
# ---------------------------------------------------------------------------

def check_correlation_cholesky(L, atol: float = 1e-8):
    """Validate a correlation-matrix Cholesky factor.

    Lower triangular, positive diagonal, unit-norm rows.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DomainError("Cholesky factor must be a square matrix")
    if not np.allclose(L, np.tril(L), atol=atol):
        raise DomainError("Cholesky factor must be lower triangular")
    if np.any(np.diag(L) <= 0):
        raise DomainError("Cholesky factor needs a positive diagonal")
    row_norms = np.sum(L * L, axis=1)
    if not np.allclose(row_norms, 1.0, atol=max(atol, 1e-6)):
        raise DomainError("rows of a correlation Cholesky factor must have unit norm")
    return L


def check_scale_vector(sigma):
    """Validate a vector of positive standard deviations."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise DomainError("scale vector entries must be positive and finite")
    return sigma


def num_cpc(j: int) -> int:
    """Number of free correlation parameters for a j x j matrix."""
    return j * (j - 1) // 2


def cpc_index_arrays(j: int):
    """Row/column indices of the strict lower triangle in row-major order."""
    rows, cols = np.tril_indices(j, k=-1)
    return rows, cols


def cpc_to_cholesky(z, j: int):
    """Build a correlation Cholesky factor from canonical partial correlations.

    ``z`` holds the strict lower triangle in row-major order, each entry in
    (-1, 1). Row k is filled left to right; each entry is scaled so the row
    keeps unit norm, and the diagonal takes the remainder.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != num_cpc(j):
        raise DomainError(f"expected {num_cpc(j)} partial correlations for j={j}")
    L = np.zeros((j, j))
    L[0, 0] = 1.0
    m = 0
    for i in range(1, j):
        s = 0.0
        for k in range(i):
            w = math.sqrt(max(1.0 - s, 0.0))
            L[i, k] = z[m] * w
            s += L[i, k] ** 2
            m += 1
        L[i, i] = math.sqrt(max(1.0 - s, 0.0))
    return L


def cholesky_to_cpc(L):
    """Inverse of :func:`cpc_to_cholesky`."""
    L = np.asarray(L, dtype=np.float64)
    j = L.shape[0]
    z = np.empty(num_cpc(j))
    m = 0
    for i in range(1, j):
        s = 0.0
        for k in range(i):
            w = math.sqrt(max(1.0 - s, 0.0))
            z[m] = L[i, k] / w
            s += L[i, k] ** 2
            m += 1
    return z


def cpc_cholesky_vjp(z, j: int, g_L):
    """Vector-Jacobian product through :func:`cpc_to_cholesky`.

    Given cotangents ``g_L`` on every lower-triangular entry of the factor
    (diagonal included), returns cotangents on the partial correlations.
    Runs the forward recursion again to recover the running row norms, then
    walks each row backwards.
    """
    z = np.asarray(z, dtype=np.float64)
    g_z = np.zeros_like(z)
    m = 0
    for i in range(1, j):
        row_start = m
        s_vals = np.empty(i + 1)
        l_row = np.empty(i)
        s = 0.0
        for k in range(i):
            s_vals[k] = s
            w = math.sqrt(max(1.0 - s, 0.0))
            l_row[k] = z[m + k] * w
            s += l_row[k] ** 2
        s_vals[i] = s
        diag = math.sqrt(max(1.0 - s, 0.0))
        # backward pass: gs tracks the cotangent of the running sum of squares
        gs = g_L[i, i] * (-0.5 / diag) if diag > 0 else 0.0
        for k in range(i - 1, -1, -1):
            w = math.sqrt(max(1.0 - s_vals[k], 0.0))
            gl = g_L[i, k] + gs * 2.0 * l_row[k]
            g_z[m + k] = gl * w
            if w > 0:
                gs = gs + gl * z[m + k] * (-0.5 / w)
        m = row_start + i
    return g_z


def cholesky_to_corr(L):
    """Materialize the correlation matrix from its Cholesky factor."""
    L = np.asarray(L, dtype=np.float64)
    return L @ L.T


def corr_from_unconstrained(y, j: int):
    """Map an unconstrained vector to a correlation Cholesky factor."""
    return cpc_to_cholesky(np.tanh(np.asarray(y, dtype=np.float64)), j)


def corr_to_unconstrained(L):
    """Map a correlation Cholesky factor to its unconstrained vector."""
    z = cholesky_to_cpc(L)
    return np.arctanh(z)


def corr_unconstrained_log_jacobian(y, j: int) -> float:
    """log |d L / d y| of the unconstrained-to-factor map.

    The map is triangular in the row-major ordering, so the determinant is
    the product of the per-entry derivatives: tanh slope times the running
    row-remainder factor.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.tanh(y)
    total = float(np.sum(np.log1p(-z * z)))
    m = 0
    for i in range(1, j):
        s = 0.0
        for k in range(i):
            total += 0.5 * math.log1p(-s) if s < 1.0 else -math.inf
            l = z[m] * math.sqrt(max(1.0 - s, 0.0))
            s += l * l
            m += 1
    return total


def _cpc_exponents(j: int, eta: float):
    """Per-entry exponents of the LKJ prior pushed to partial correlations."""
    _, cols = cpc_index_arrays(j)
    return eta + (j - 2.0 - cols) / 2.0


def corr_unconstrained_log_prior(y, j: int, eta: float = 1.0):
    """LKJ(eta) prior density in the unconstrained space, with gradient.

    The prior on the correlation matrix, pushed through the factor and
    tanh maps (Jacobians included), separates into independent terms
    ``e_m * log(1 - tanh(y_m)^2)`` with column-dependent exponents.
    Returns ``(log_density, gradient)``.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.tanh(y)
    e = _cpc_exponents(j, eta)
    logp = float(np.sum(e * np.log1p(-z * z)))
    grad = -2.0 * e * z
    return logp, grad


def lkj_cholesky_log_density(L, eta: float = 1.0) -> float:
    """Unnormalized LKJ(eta) log density evaluated on a Cholesky factor.

    Includes the factor-to-matrix Jacobian, so a sampler working on the
    factor targets LKJ on the correlation matrix itself. Reduces to the
    sum of ``(j - k + 2 eta - 2) * log L[k, k]`` over rows k >= 2.
    """
    if eta <= 0:
        raise DomainError("LKJ shape must be positive")
    L = check_correlation_cholesky(L)
    j = L.shape[0]
    k = np.arange(2, j + 1)
    diag = np.diag(L)[1:]
    return float(np.sum((j - k + 2.0 * eta - 2.0) * np.log(diag)))


def sample_lkj_cholesky(j: int, eta: float, rng: np.random.Generator):
    """Draw a correlation Cholesky factor from the LKJ(eta) distribution.

    Uses the partial-correlation factorization: entry (i, k) of the strict
    lower triangle is an independent scaled Beta variate whose shape depends
    only on its column.
    """
    if eta <= 0:
        raise DomainError("LKJ shape must be positive")
    _, cols = cpc_index_arrays(j)
    a = eta + (j - 2.0 - cols) / 2.0
    z = 2.0 * rng.beta(a, a) - 1.0
    return cpc_to_cholesky(z, j)


# ---------------------------------------------------------------------------
# Scale transforms
# ---------------------------------------------------------------------------

def scale_to_unconstrained(sigma):
    """Positive scales to the real line (elementwise log)."""
    return np.log(check_scale_vector(sigma))


def scale_from_unconstrained(t):
    """Inverse of :func:`scale_to_unconstrained`; log-Jacobian is sum(t)."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(t), float(np.sum(t))
