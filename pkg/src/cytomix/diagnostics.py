"""MCMC convergence diagnostics: split R-hat and autocorrelation ESS.

R-hat is the split-chain potential scale reduction computed on
rank-normalized draws, so heavy tails or nonlinear scales do not mask
mixing failures. ESS sums pairwise autocorrelations (even/odd lags)
across chains and truncates the sum at the first non-positive,
non-increasing pair.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .errors import ParameterError


def split_chains(x: np.ndarray) -> np.ndarray:
    """Halve each chain, doubling the chain count (drops an odd last draw)."""
    x = np.asarray(x, dtype=np.float64)
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def rank_normalize(x: np.ndarray) -> np.ndarray:
    """Map pooled draws to normal scores via fractional ranks."""
    shape = x.shape
    ranks = rankdata(x.ravel(), method="average")
    z = ndtri((ranks - 3.0 / 8.0) / (x.size + 0.25))
    return z.reshape(shape)


def _basic_rhat(x: np.ndarray) -> float:
    m, n = x.shape
    chain_means = x.mean(axis=1)
    chain_vars = x.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * np.var(chain_means, ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else np.inf
    var_hat = (n - 1.0) / n * w + b / n
    # estimator noise can dip the ratio a hair under 1; floor it there
    return float(max(np.sqrt(var_hat / w), 1.0))


def compute_rhat(x: np.ndarray) -> float:
    """Split-chain rank-normalized R-hat for one parameter.

    ``x`` has shape (chains, draws). Needs at least two chains and four
    draws per chain.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError("expected a (chains, draws) array")
    m, n = x.shape
    if m < 2:
        raise ParameterError("R-hat is unavailable for a single chain")
    if n < 4:
        raise ParameterError("R-hat needs at least 4 draws per chain")
    return _basic_rhat(rank_normalize(split_chains(x)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariances of one chain via FFT."""
    n = x.size
    xd = x - x.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    f = np.fft.rfft(xd, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real / n
    return acov


def compute_ess(x: np.ndarray) -> float:
    """Effective sample size from combined-chain autocorrelations.

    ``x`` has shape (chains, draws). Pairwise (Geyer) truncation: sums
    rho[2m] + rho[2m+1] while the pairs stay positive, then enforces
    monotone non-increase before summing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    m, n = x.shape
    if n < 4:
        raise ParameterError("ESS needs at least 4 draws per chain")
    acov = np.vstack([_autocovariance(x[c]) for c in range(m)])
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    mean_acov = acov.mean(axis=0)
    if m > 1:
        var_plus = (n - 1.0) / n * w + np.var(x.mean(axis=1), ddof=1)
    else:
        # single chain: plain autocorrelations acov_t / acov_0
        var_plus = mean_acov[0]
        w = mean_acov[0]
    if var_plus <= 0 or not np.isfinite(var_plus):
        return float("nan")

    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0
    max_pairs = (n - 1) // 2
    pair_sums = []
    for t in range(max_pairs):
        p = rho[2 * t] + rho[2 * t + 1]
        if t > 0 and p <= 0:
            break
        pair_sums.append(p)
    if not pair_sums:
        return float(m * n)
    # Geyer initial monotone sequence
    for t in range(1, len(pair_sums)):
        pair_sums[t] = min(pair_sums[t], pair_sums[t - 1])
    tau = max(-1.0 + 2.0 * float(np.sum(pair_sums)), 1.0 / (m * n))
    ess = m * n / tau
    return float(min(ess, m * n))
