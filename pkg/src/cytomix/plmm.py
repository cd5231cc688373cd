"""Multivariate Poisson log-normal mixed model.

Counts for cell i and marker j are Poisson with a log rate built from a
per-condition fixed effect, a per-cell random effect whose covariance is
condition specific, and a per-donor random effect:

    log mu[i, j] = beta[cond(i), j] + b[i, j] + u[donor(i), j]

Random-effect covariances factor into scale vectors (half-Cauchy priors)
and correlation Cholesky factors (LKJ priors); fixed effects get a wide
normal prior. The default parameterization is non-centered: the sampler
works on standardized effects z with b = diag(sigma) L z. A centered
variant (b sampled directly under its multivariate normal) is available
for cross-checking; both define the same posterior over the shared
parameters.

The joint log posterior and its exact gradient are written out by hand
and verified against finite differences in the test suite.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from . import probability as prob
from .data import CellTable
from .errors import NotFoundError, ParameterError
from .hmc import ModelTarget, PosteriorDraws, SamplerConfig, run_chains

LOG_2PI = math.log(2.0 * math.pi)

BETA_PRIOR_SD = 7.0
SIGMA_PRIOR_SCALE = 2.5
LKJ_ETA = 1.0

PREDICATES = ("gt_median", "le_median", "eq_zero", "gt_zero")


@dataclass(frozen=True)
class SubsetSpec:
    """A cell subset defined by marker predicates, used as a PPC statistic.

    Medians are computed on the dataset under evaluation, pooled over both
    conditions. The statistic is the fraction of cells satisfying every
    rule.
    """

    name: str
    rules: tuple

    def __post_init__(self):
        if not self.rules:
            raise ParameterError("subset spec needs at least one rule")
        for marker, predicate in self.rules:
            if predicate not in PREDICATES:
                raise ParameterError(f"unknown predicate {predicate!r} for {marker!r}")

    def evaluate(self, counts: np.ndarray, marker_names: list[str]) -> float:
        counts = np.asarray(counts)
        mask = np.ones(counts.shape[0], dtype=bool)
        for marker, predicate in self.rules:
            if marker not in marker_names:
                raise NotFoundError(f"marker {marker!r} not in panel")
            col = counts[:, marker_names.index(marker)]
            if predicate in ("gt_median", "le_median"):
                med = np.median(col)
                mask &= col > med if predicate == "gt_median" else col <= med
            elif predicate == "eq_zero":
                mask &= col == 0
            else:
                mask &= col > 0
        return float(mask.mean())


@dataclass
class PpcResult:
    stat_name: str
    observed: float
    replicated: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "stat_name": self.stat_name,
                "observed": self.observed,
                "rep_index": np.arange(len(self.replicated)),
                "replicated": self.replicated,
            }
        )


@dataclass
class CorrIncreaseSummary:
    """Posterior probabilities that each pairwise correlation is larger in
    the second condition, plus a histogram of the upper triangle."""

    marker_names: list[str]
    p_hat: np.ndarray  # J x J, symmetric, nan diagonal
    pairs: pd.DataFrame  # marker_i, marker_j, p_hat
    hist_counts: np.ndarray
    hist_edges: np.ndarray


class PlmmModel:
    """Joint log posterior of the Poisson log-normal mixed model."""

    def __init__(self, counts, cond_idx, donor_idx, marker_names,
                 donor_names=None, condition_levels=("cond1", "cond2"),
                 parameterization="noncentered", eta=LKJ_ETA):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ParameterError("counts must be a 2-d array")
        if np.any(counts < 0):
            raise ParameterError("counts must be nonnegative")
        if parameterization not in ("noncentered", "centered"):
            raise ParameterError("parameterization must be noncentered or centered")
        self.counts = counts
        self.y = counts.astype(np.float64)
        self.n, self.j = counts.shape
        self.cond_idx = np.asarray(cond_idx, dtype=np.int64)
        self.donor_idx = np.asarray(donor_idx, dtype=np.int64)
        self.d = int(self.donor_idx.max()) + 1
        self.marker_names = list(marker_names)
        self.donor_names = list(donor_names) if donor_names is not None \
            else [f"donor{i + 1}" for i in range(self.d)]
        self.condition_levels = tuple(condition_levels)
        self.parameterization = parameterization
        self.eta = float(eta)

        self.rows_c = [np.where(self.cond_idx == c)[0] for c in (0, 1)]
        # fixed-order donor reduction: sort once, reduceat over group starts
        self._donor_order = np.argsort(self.donor_idx, kind="stable")
        sorted_donors = self.donor_idx[self._donor_order]
        self._donor_starts = np.searchsorted(sorted_donors, np.arange(self.d))
        self._cells_per_donor = np.bincount(self.donor_idx, minlength=self.d)
        if np.any(self._cells_per_donor == 0):
            raise ParameterError("every donor index up to the maximum must have cells")
        self._lgamma_const = float(np.sum(gammaln(self.y + 1.0)))

        j, m = self.j, prob.num_cpc(self.j)
        self.m_corr = m
        sizes = [2 * j, self.n * j, self.d * j, j, j, j, m, m, m]
        names = ["beta", "cell", "donor", "t_sigma_c1", "t_sigma_c2",
                 "t_sigma_d", "y_corr_c1", "y_corr_c2", "y_corr_d"]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.slices = {nm: slice(int(offsets[i]), int(offsets[i + 1]))
                       for i, nm in enumerate(names)}
        self.dim = int(offsets[-1])
        self._tril = np.tril_indices(self.j)
        self._pairs = [(c, r) for r, c in zip(*np.tril_indices(self.j, k=-1))]
        self.names = self._build_names()

    @classmethod
    def from_cell_table(cls, table: CellTable, parameterization="noncentered",
                        eta=LKJ_ETA) -> "PlmmModel":
        return cls(
            counts=table.counts,
            cond_idx=table.condition_index,
            donor_idx=table.donor_index,
            marker_names=table.marker_names,
            donor_names=table.donor_names,
            condition_levels=table.condition_levels,
            parameterization=parameterization,
            eta=eta,
        )

    # -- parameter bookkeeping ----------------------------------------------

    def _build_names(self) -> list[str]:
        names = []
        for c in (1, 2):
            names += [f"beta_cond{c}.{m}" for m in self.marker_names]
        for block in ("cond1", "cond2", "donor"):
            names += [f"sigma_{block}.{m}" for m in self.marker_names]
        for block in ("cond1", "cond2", "donor"):
            names += [f"omega_{block}[{self.marker_names[a]},{self.marker_names[b]}]"
                      for a, b in self._pairs]
        for d in self.donor_names:
            names += [f"u[{d},{m}]" for m in self.marker_names]
        return names

    def _unpack(self, v):
        s = self.slices
        beta = v[s["beta"]].reshape(2, self.j)
        cell = v[s["cell"]].reshape(self.n, self.j)
        donor = v[s["donor"]].reshape(self.d, self.j)
        t = [v[s["t_sigma_c1"]], v[s["t_sigma_c2"]], v[s["t_sigma_d"]]]
        y_corr = [v[s["y_corr_c1"]], v[s["y_corr_c2"]], v[s["y_corr_d"]]]
        return beta, cell, donor, t, y_corr

    def _donor_sum(self, r):
        return np.add.reduceat(r[self._donor_order], self._donor_starts, axis=0)

    # -- log density and gradient -------------------------------------------

    def logp_grad(self, v):
        lp_terms, grad = self._evaluate(np.asarray(v, dtype=np.float64))
        lp = sum(lp_terms.values())
        if not np.isfinite(lp):
            return -np.inf, grad
        return lp, grad

    def diagnose(self, v) -> dict:
        terms, _ = self._evaluate(np.asarray(v, dtype=np.float64))
        return terms

    def _evaluate(self, v):
        if v.shape != (self.dim,):
            raise ParameterError(f"expected parameter vector of length {self.dim}")
        if not np.all(np.isfinite(v)):
            return {"likelihood": -np.inf}, np.zeros(self.dim)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._evaluate_inner(v)

    def _evaluate_inner(self, v):
        beta, cell, donor, t, y_corr = self._unpack(v)
        sigma = [np.exp(tk) for tk in t]
        if not all(np.all(np.isfinite(sk)) for sk in sigma):
            return {"sigma_priors": -np.inf}, np.zeros(self.dim)
        z_cpc = [np.tanh(yk) for yk in y_corr]
        L = [prob.cpc_to_cholesky(zk, self.j) for zk in z_cpc]
        A = [sigma[k][:, None] * L[k] for k in range(3)]

        grad = np.zeros(self.dim)
        s = self.slices
        g_beta = np.zeros((2, self.j))
        g_cell = np.zeros((self.n, self.j))
        g_donor = np.zeros((self.d, self.j))
        g_t = [np.zeros(self.j) for _ in range(3)]
        g_L = [np.zeros((self.j, self.j)) for _ in range(3)]

        centered = self.parameterization == "centered"
        if centered:
            b = cell
            u = donor
        else:
            b = np.empty((self.n, self.j))
            for c in (0, 1):
                b[self.rows_c[c]] = cell[self.rows_c[c]] @ A[c].T
            u = donor @ A[2].T

        log_mu = beta[self.cond_idx] + b + u[self.donor_idx]
        with np.errstate(over="ignore"):
            mu = np.exp(log_mu)
        loglik = float(np.sum(self.y * log_mu) - np.sum(mu)) - self._lgamma_const

        r = self.y - mu
        r_donor = self._donor_sum(r)
        for c in (0, 1):
            g_beta[c] = r[self.rows_c[c]].sum(axis=0)

        if centered:
            lp_cell, lp_donor = self._centered_effects(
                b, u, r, r_donor, sigma, L, g_cell, g_donor, g_t, g_L)
        else:
            lp_cell = -0.5 * float(np.sum(cell * cell)) - 0.5 * self.n * self.j * LOG_2PI
            lp_donor = -0.5 * float(np.sum(donor * donor)) - 0.5 * self.d * self.j * LOG_2PI
            for c in (0, 1):
                rc = r[self.rows_c[c]]
                zc = cell[self.rows_c[c]]
                g_cell[self.rows_c[c]] = rc @ A[c]
                g_t[c] += (rc * b[self.rows_c[c]]).sum(axis=0)
                g_L[c] += sigma[c][:, None] * (rc.T @ zc)
            g_cell -= cell
            g_donor = r_donor @ A[2] - donor
            g_t[2] += (r_donor * u).sum(axis=0)
            g_L[2] += sigma[2][:, None] * (r_donor.T @ donor)

        lp_beta = float(np.sum(prob.normal_log_density(beta, BETA_PRIOR_SD)))
        g_beta += prob.normal_grad(beta, BETA_PRIOR_SD)

        lp_sigma = 0.0
        for k in range(3):
            lp_sigma += float(np.sum(prob.half_cauchy_log_density_t(t[k], SIGMA_PRIOR_SCALE)))
            g_t[k] += prob.half_cauchy_grad_t(t[k], SIGMA_PRIOR_SCALE)

        lp_corr = 0.0
        g_y_corr = []
        for k in range(3):
            lp_k, g_k = prob.corr_unconstrained_log_prior(y_corr[k], self.j, self.eta)
            lp_corr += lp_k
            tri = np.tril(g_L[k])
            g_from_lik = prob.cpc_cholesky_vjp(z_cpc[k], self.j, tri)
            g_y_corr.append(g_from_lik * (1.0 - z_cpc[k] ** 2) + g_k)

        grad[s["beta"]] = g_beta.ravel()
        grad[s["cell"]] = g_cell.ravel()
        grad[s["donor"]] = g_donor.ravel()
        grad[s["t_sigma_c1"]] = g_t[0]
        grad[s["t_sigma_c2"]] = g_t[1]
        grad[s["t_sigma_d"]] = g_t[2]
        grad[s["y_corr_c1"]] = g_y_corr[0]
        grad[s["y_corr_c2"]] = g_y_corr[1]
        grad[s["y_corr_d"]] = g_y_corr[2]

        terms = {
            "likelihood": loglik,
            "cell_effects": lp_cell,
            "donor_effects": lp_donor,
            "beta_prior": lp_beta,
            "sigma_priors": lp_sigma,
            "correlation_priors": lp_corr,
        }
        return terms, grad

    def _centered_effects(self, b, u, r, r_donor, sigma, L,
                          g_cell, g_donor, g_t, g_L):
        """Multivariate normal densities of directly-sampled effects, with
        gradients flowing to the effects, the scales, and the factors."""
        lp_cell = 0.0
        for c in (0, 1):
            rows = self.rows_c[c]
            lp_cell += self._mvn_block(
                b[rows], sigma[c], L[c], r[rows], g_cell, rows, g_t, g_L, c)
        lp_donor = self._mvn_block(
            u, sigma[2], L[2], r_donor, g_donor, slice(None), g_t, g_L, 2)
        return lp_cell, lp_donor

    def _mvn_block(self, B, sig, Lk, lik_cot, g_B, rows, g_t, g_L, k):
        n = B.shape[0]
        C = sig[:, None] * Lk
        if np.any(np.diag(C) <= 0) or not np.all(np.isfinite(C)):
            return -np.inf
        W = solve_triangular(C, B.T, lower=True, check_finite=False).T
        log_det = float(np.sum(np.log(sig)) + np.sum(np.log(np.diag(Lk))))
        lp = -0.5 * float(np.sum(W * W)) - n * log_det - 0.5 * n * self.j * LOG_2PI
        # d lp / d B = -W C^{-1}; likelihood cotangent adds directly
        g_B[rows] += lik_cot - solve_triangular(C, W.T, lower=True, trans="T",
                                                check_finite=False).T
        S = W.T @ W
        c_invt = solve_triangular(C, np.eye(self.j), lower=True, trans="T",
                                  check_finite=False)
        g_C = np.tril(c_invt @ S - n * c_invt)
        g_t[k] += sig * np.sum(g_C * Lk, axis=1)
        g_L[k] += sig[:, None] * g_C
        return lp

    # -- initialization -------------------------------------------------------

    def initial_vectors(self, chains: int, seed: int) -> list[np.ndarray]:
        """Fixed effects at the per-condition Poisson MLE (log mean count),
        standardized effects at zero, unit scales with per-chain jitter,
        identity correlations."""
        beta0 = np.empty((2, self.j))
        for c in (0, 1):
            if len(self.rows_c[c]) == 0:
                beta0[c] = 0.0
                continue
            means = self.y[self.rows_c[c]].mean(axis=0)
            zero = means == 0.0
            if np.any(zero):
                bad = [self.marker_names[i] for i in np.where(zero)[0]]
                warnings.warn(
                    f"markers {bad} have all-zero counts in condition {c + 1}; "
                    "initializing with a 0.5 pseudo-count", stacklevel=2)
                means = means + 0.5 * zero
            beta0[c] = np.log(means)
        base = np.zeros(self.dim)
        base[self.slices["beta"]] = beta0.ravel()
        children = np.random.SeedSequence(seed).spawn(chains)
        inits = []
        for child in children:
            rng = np.random.default_rng(child)
            v = base.copy()
            for block in ("t_sigma_c1", "t_sigma_c2", "t_sigma_d"):
                v[self.slices[block]] += 0.01 * rng.standard_normal(self.j)
            inits.append(v)
        return inits

    # -- reporting ------------------------------------------------------------

    def constrain(self, v) -> np.ndarray:
        beta, cell, donor, t, y_corr = self._unpack(np.asarray(v, dtype=np.float64))
        sigma = [np.exp(tk) for tk in t]
        L = [prob.cpc_to_cholesky(np.tanh(yk), self.j) for yk in y_corr]
        if self.parameterization == "centered":
            u = donor
        else:
            u = donor @ (sigma[2][:, None] * L[2]).T
        out = [beta.ravel()]
        out += [sigma[k] for k in range(3)]
        for k in range(3):
            omega = prob.cholesky_to_corr(L[k])
            out.append(np.array([omega[a, b] for a, b in self._pairs]))
        out.append(u.ravel())
        return np.concatenate(out)

    def target(self) -> ModelTarget:
        return ModelTarget(
            dim=self.dim,
            logp_grad=self.logp_grad,
            names=self.names,
            constrain=self.constrain,
            diagnose=self.diagnose,
        )


def fit_plmm(table: CellTable, config: SamplerConfig, workers: int = 1,
             parameterization: str = "noncentered", checkpoint_path=None,
             checkpoint_every: int = 0):
    """Fit the model to a validated cell table; returns (draws, diagnostics)."""
    model = PlmmModel.from_cell_table(table, parameterization=parameterization)
    inits = model.initial_vectors(config.chains, config.seed)
    draws, diag = run_chains(model.target(), config, inits, workers=workers,
                             checkpoint_path=checkpoint_path,
                             checkpoint_every=checkpoint_every)
    draws.metadata.update(
        model="plmm",
        marker_names=model.marker_names,
        donor_names=model.donor_names,
        condition_levels=model.condition_levels,
    )
    return draws, diag


# ---------------------------------------------------------------------------
# Draws-based summaries
# ---------------------------------------------------------------------------

def _marker_names_from_draws(draws: PosteriorDraws) -> list[str]:
    if "marker_names" in draws.metadata:
        return list(draws.metadata["marker_names"])
    prefix = "beta_cond1."
    return [n[len(prefix):] for n in draws.names if n.startswith(prefix)]


def _quantiles(x: np.ndarray):
    return (float(np.median(x)),
            float(np.quantile(x, 0.025)),
            float(np.quantile(x, 0.975)))


def fixed_effect_summary(draws: PosteriorDraws) -> pd.DataFrame:
    """Median and equal-tailed 95% interval for each condition's fixed
    effects and their difference (second minus reference)."""
    markers = _marker_names_from_draws(draws)
    rows = []
    for m in markers:
        b1 = draws.column(f"beta_cond1.{m}")
        b2 = draws.column(f"beta_cond2.{m}")
        for quantity, series in (("beta_cond1", b1), ("beta_cond2", b2),
                                 ("beta_diff", b2 - b1)):
            med, lo, hi = _quantiles(series)
            rows.append({"marker": m, "quantity": quantity,
                         "median": med, "q025": lo, "q975": hi})
    return pd.DataFrame(rows)


def corr_increase_probability(draws: PosteriorDraws, bins: int = 20) -> CorrIncreaseSummary:
    """Fraction of draws in which each pairwise correlation is strictly
    larger in the second condition; ties count as no increase."""
    markers = _marker_names_from_draws(draws)
    j = len(markers)
    p_hat = np.full((j, j), np.nan)
    records = []
    for a in range(j):
        for b in range(a + 1, j):
            name1 = f"omega_cond1[{markers[a]},{markers[b]}]"
            name2 = f"omega_cond2[{markers[a]},{markers[b]}]"
            ind = draws.column(name2) > draws.column(name1)
            p = float(ind.mean())
            p_hat[a, b] = p_hat[b, a] = p
            records.append({"marker_i": markers[a], "marker_j": markers[b], "p_hat": p})
    pairs = pd.DataFrame(records)
    counts, edges = np.histogram(pairs["p_hat"].to_numpy(), bins=bins, range=(0.0, 1.0))
    return CorrIncreaseSummary(marker_names=markers, p_hat=p_hat, pairs=pairs,
                               hist_counts=counts, hist_edges=edges)


def correlation_median_summary(draws: PosteriorDraws) -> pd.DataFrame:
    """Posterior median of each pairwise correlation per condition block."""
    markers = _marker_names_from_draws(draws)
    rows = []
    for block in ("cond1", "cond2", "donor"):
        for a in range(len(markers)):
            for b in range(a + 1, len(markers)):
                name = f"omega_{block}[{markers[a]},{markers[b]}]"
                if name not in draws.names:
                    continue
                rows.append({
                    "block": block, "marker_i": markers[a], "marker_j": markers[b],
                    "median": float(np.median(draws.column(name))),
                })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Posterior predictive checks
# ---------------------------------------------------------------------------

def _draw_params(draws: PosteriorDraws, k: int, markers, donors):
    j = len(markers)
    beta = np.array([
        [draws.column(f"beta_cond{c}.{m}")[k] for m in markers] for c in (1, 2)
    ])
    sigma = []
    L = []
    for block in ("cond1", "cond2"):
        sig = np.array([draws.column(f"sigma_{block}.{m}")[k] for m in markers])
        omega = np.eye(j)
        for a in range(j):
            for b in range(a + 1, j):
                val = draws.column(f"omega_{block}[{markers[a]},{markers[b]}]")[k]
                omega[a, b] = omega[b, a] = val
        sigma.append(sig)
        L.append(np.linalg.cholesky(omega))
    u = np.array([[draws.column(f"u[{d},{m}]")[k] for m in markers] for d in donors])
    return beta, sigma, L, u


def posterior_predictive(draws: PosteriorDraws, table: CellTable,
                         spec: SubsetSpec, n_rep: int, seed: int = 0) -> PpcResult:
    """Replicate count tables from posterior draws and score the subset
    statistic on each.

    Cell-level effects are redrawn per replicate; donor effects are taken
    from the posterior draw, so the check targets within-study fit. The
    statistic (including its medians) is recomputed on every replicated
    table, mirroring how it is computed on the observed one.
    """
    if draws.n_draws == 0:
        raise ParameterError("no posterior draws supplied")
    markers = _marker_names_from_draws(draws)
    for marker, _ in spec.rules:
        if marker not in markers:
            raise NotFoundError(f"marker {marker!r} not in fitted panel")
    observed = spec.evaluate(table.counts, table.marker_names)

    cond = table.condition_index
    donor = table.donor_index
    donors = table.donor_names
    n, j = table.counts.shape
    rng_children = np.random.SeedSequence(seed).spawn(n_rep)
    picks = np.random.default_rng(seed).integers(0, draws.n_draws, size=n_rep)

    replicated = np.empty(n_rep)
    for rep in range(n_rep):
        rng = np.random.default_rng(rng_children[rep])
        beta, sigma, L, u = _draw_params(draws, int(picks[rep]), markers, donors)
        z = rng.standard_normal((n, j))
        b = np.empty((n, j))
        for c in (0, 1):
            rows = cond == c
            b[rows] = z[rows] @ (sigma[c][:, None] * L[c]).T
        log_mu = beta[cond] + b + u[donor]
        y_rep = rng.poisson(np.exp(np.clip(log_mu, None, 30.0)))
        replicated[rep] = spec.evaluate(y_rep, table.marker_names)
    return PpcResult(stat_name=spec.name, observed=observed, replicated=replicated)
