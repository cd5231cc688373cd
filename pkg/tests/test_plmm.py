"""Model density assembled from first principles, gradient checks against
finite differences, initialization rules, summaries, and predictive checks."""

import math

import numpy as np
import pandas as pd
import pytest

from cytomix import probability as prob
from cytomix.data import CellTable, Marker
from cytomix.errors import NotFoundError, ParameterError
from cytomix.hmc import PosteriorDraws, SamplerConfig, run_chains
from cytomix.plmm import (
    PlmmModel,
    SubsetSpec,
    corr_increase_probability,
    fit_plmm,
    fixed_effect_summary,
    posterior_predictive,
)

LOG_2PI = math.log(2 * math.pi)


def small_model(seed=0, n=20, j=3, d=2, parameterization="noncentered", mean=8.0):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(mean, size=(n, j))
    cond = np.tile([0, 1], n // 2)
    donor = rng.integers(0, d, size=n)
    donor[:d] = np.arange(d)  # every donor occupied
    return PlmmModel(counts, cond, donor, [f"m{k}" for k in range(j)],
                     parameterization=parameterization)


def make_table(n_per=40, j=3, d=3, seed=1, mean=8.0):
    rng = np.random.default_rng(seed)
    donors, conds = [], []
    for k in range(d):
        for c in ("early", "late"):
            donors += [f"d{k + 1}"] * n_per
            conds += [c] * n_per
    n = len(donors)
    return CellTable(
        counts=rng.poisson(mean, size=(n, j)),
        donor=np.array(donors, dtype=object),
        condition=np.array(conds, dtype=object),
        celltype=np.array(["NK"] * n, dtype=object),
        markers=tuple(Marker(f"m{k}") for k in range(j)),
        reference_level="early",
    )


class TestLogDensity:
    def test_single_cell_assembled_from_pieces(self):
        # J=1, N=1, D=1, y=0, every parameter at zero
        model = PlmmModel(np.array([[0]]), np.array([0]), np.array([0]), ["m"])
        v = np.zeros(model.dim)
        lp, _ = model.logp_grad(v)
        expected = (
            prob.poisson_log_pmf(0, 0.0)
            + 2 * (-0.5 * LOG_2PI)  # standard-normal cell and donor effects
            + 2 * prob.normal_log_density(0.0, 7.0)
            + 3 * prob.half_cauchy_log_density_t(0.0, 2.5)
        )
        assert lp == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("parameterization", ["noncentered", "centered"])
    def test_gradient_matches_finite_differences(self, parameterization):
        model = small_model(parameterization=parameterization)
        rng = np.random.default_rng(3)
        h = 1e-5
        for _ in range(25):
            v = rng.normal(0, 0.5, size=model.dim)
            _, g = model.logp_grad(v)
            fd = np.empty(model.dim)
            for i in range(model.dim):
                vp, vm = v.copy(), v.copy()
                vp[i] += h
                vm[i] -= h
                fd[i] = (model.logp_grad(vp)[0] - model.logp_grad(vm)[0]) / (2 * h)
            rel = np.linalg.norm(g - fd) / np.linalg.norm(fd)
            assert rel < 1e-5

    def test_doubling_counts_with_shifted_beta(self):
        # zero random effects: the likelihood change has a closed form
        model = small_model(n=12, j=2, d=1)
        doubled = PlmmModel(model.counts * 2, model.cond_idx, model.donor_idx,
                            model.marker_names)
        v = np.zeros(model.dim)
        beta = np.full((2, model.j), 1.1)
        v[model.slices["beta"]] = beta.ravel()
        v2 = np.zeros(doubled.dim)
        v2[doubled.slices["beta"]] = (beta + math.log(2)).ravel()
        lik1 = model.diagnose(v)["likelihood"]
        lik2 = doubled.diagnose(v2)["likelihood"]
        y = model.counts.astype(float)
        mu = np.exp(beta[model.cond_idx])
        from scipy.special import gammaln
        # lik2 - lik1 = sum[ 2y(beta+log2) - 2mu - lgamma(2y+1) ]
        #             - sum[ y beta - mu - lgamma(y+1) ]
        delta = float(
            np.sum(y * beta[model.cond_idx]) + np.sum(2 * y * math.log(2)) - np.sum(mu)
            - np.sum(gammaln(2 * y + 1) - gammaln(y + 1))
        )
        assert lik2 - lik1 == pytest.approx(delta, rel=1e-10)

    def test_nonfinite_parameters_flagged(self):
        model = small_model()
        v = np.zeros(model.dim)
        v[0] = 800.0  # exp overflows the rate
        lp, _ = model.logp_grad(v)
        assert lp == -np.inf
        v2 = np.zeros(model.dim)
        v2[model.slices["t_sigma_c1"]] = 900.0  # scale overflow
        lp2, _ = model.logp_grad(v2)
        assert lp2 == -np.inf

    def test_dimension_mismatch(self):
        model = small_model()
        with pytest.raises(ParameterError):
            model.logp_grad(np.zeros(model.dim + 1))


class TestInit:
    def test_beta_initialized_at_log_mean(self):
        counts = np.array([[10, 2]] * 6 + [[12, 4]] * 6)
        cond = np.array([0] * 6 + [1] * 6)
        donor = np.array([0, 1] * 6)
        model = PlmmModel(counts, cond, donor, ["a", "b"])
        v = model.initial_vectors(1, seed=0)[0]
        beta = v[model.slices["beta"]].reshape(2, 2)
        assert beta[0, 0] == pytest.approx(math.log(10))
        assert beta[1, 1] == pytest.approx(math.log(4))

    def test_all_zero_marker_uses_pseudocount(self):
        counts = np.array([[0, 3]] * 5 + [[2, 3]] * 5)
        cond = np.array([0] * 5 + [1] * 5)
        donor = np.array([0, 1] * 5)
        model = PlmmModel(counts, cond, donor, ["a", "b"])
        with pytest.warns(UserWarning, match="pseudo-count"):
            v = model.initial_vectors(1, seed=0)[0]
        beta = v[model.slices["beta"]].reshape(2, 2)
        assert beta[0, 0] == pytest.approx(math.log(0.5))

    def test_jitter_deterministic(self):
        model = small_model()
        a = model.initial_vectors(4, seed=9)
        b = model.initial_vectors(4, seed=9)
        for va, vb in zip(a, b):
            assert np.array_equal(va, vb)
        assert not np.array_equal(a[0], a[1])

    def test_initial_density_finite(self):
        model = small_model()
        for v in model.initial_vectors(3, seed=1):
            lp, g = model.logp_grad(v)
            assert np.isfinite(lp)
            assert np.all(np.isfinite(g))


class TestConstrain:
    def test_reported_values_match_direct_computation(self):
        model = small_model(j=3)
        rng = np.random.default_rng(4)
        v = rng.normal(0, 0.3, size=model.dim)
        out = model.constrain(v)
        named = dict(zip(model.names, out))
        t1 = v[model.slices["t_sigma_c1"]]
        assert named["sigma_cond1.m0"] == pytest.approx(math.exp(t1[0]))
        y1 = v[model.slices["y_corr_c1"]]
        L = prob.corr_from_unconstrained(y1, 3)
        omega = L @ L.T
        assert named["omega_cond1[m0,m1]"] == pytest.approx(omega[0, 1])

    def test_centered_reports_same_names(self):
        a = small_model(parameterization="noncentered")
        b = small_model(parameterization="centered")
        assert a.names == b.names


class TestParameterizationAgreement:
    def test_posteriors_match_across_parameterizations(self):
        table = make_table(n_per=30, j=2, d=2, seed=5, mean=10.0)
        cfg = SamplerConfig(chains=2, iterations=700, warmup=300, seed=3,
                            max_leapfrog_steps=24)
        summaries = {}
        for par in ("noncentered", "centered"):
            draws, _ = fit_plmm(table, cfg, parameterization=par)
            cols = [n for n in draws.names
                    if n.startswith(("beta_", "sigma_cond"))]
            summaries[par] = draws, cols
        d_nc, cols = summaries["noncentered"]
        d_ce, _ = summaries["centered"]
        from cytomix.diagnostics import compute_ess
        for name in cols:
            a = d_nc.by_chain()[:, :, d_nc.names.index(name)]
            b = d_ce.by_chain()[:, :, d_ce.names.index(name)]
            se = math.hypot(float(np.std(a)) / math.sqrt(compute_ess(a)),
                            float(np.std(b)) / math.sqrt(compute_ess(b)))
            assert abs(a.mean() - b.mean()) < 3 * max(se, 1e-3), name


def degenerate_draws(j=2, value=0.5, k=4):
    markers = [f"m{i}" for i in range(j)]
    names = []
    for c in (1, 2):
        names += [f"beta_cond{c}.{m}" for m in markers]
    for block in ("cond1", "cond2", "donor"):
        names += [f"sigma_{block}.{m}" for m in markers]
    pairs = [(a, b) for a in range(j) for b in range(a + 1, j)]
    for block in ("cond1", "cond2", "donor"):
        names += [f"omega_{block}[{markers[a]},{markers[b]}]" for a, b in pairs]
    names += [f"u[d1,{m}]" for m in markers]
    draws = np.full((k, len(names)), value)
    return PosteriorDraws(
        draws=draws, chain=np.ones(k, dtype=int), iteration=np.arange(1, k + 1),
        names=names, metadata={"marker_names": markers},
    )


class TestSummaries:
    def test_degenerate_quantiles_collapse(self):
        draws = degenerate_draws(value=0.7)
        summary = fixed_effect_summary(draws)
        assert np.allclose(summary["median"], summary["q025"])
        assert np.allclose(summary["median"], summary["q975"])
        diff = summary[summary["quantity"] == "beta_diff"]
        assert np.allclose(diff["median"], 0.0)

    def test_quantiles_are_empirical(self):
        draws = degenerate_draws(k=1000)
        rng = np.random.default_rng(6)
        col = draws.names.index("beta_cond2.m0")
        draws.draws[:, col] = rng.normal(2.0, 0.5, size=1000)
        summary = fixed_effect_summary(draws)
        row = summary[(summary.marker == "m0") & (summary.quantity == "beta_cond2")]
        assert row["median"].iloc[0] == pytest.approx(2.0, abs=0.08)
        assert row["q025"].iloc[0] == pytest.approx(2.0 - 1.96 * 0.5, abs=0.15)

    def test_corr_increase_arithmetic(self):
        draws = degenerate_draws(k=4)
        c1 = draws.names.index("omega_cond1[m0,m1]")
        c2 = draws.names.index("omega_cond2[m0,m1]")
        draws.draws[:, c1] = [0.1, 0.1, 0.1, 0.5]
        draws.draws[:, c2] = [0.2, 0.3, 0.4, 0.5]  # ties count as no increase
        summary = corr_increase_probability(draws)
        assert summary.pairs["p_hat"].iloc[0] == pytest.approx(0.75)

    def test_corr_increase_all_larger(self):
        draws = degenerate_draws(k=8)
        c1 = draws.names.index("omega_cond1[m0,m1]")
        c2 = draws.names.index("omega_cond2[m0,m1]")
        draws.draws[:, c1] = 0.1
        draws.draws[:, c2] = 0.6
        summary = corr_increase_probability(draws)
        assert summary.pairs["p_hat"].iloc[0] == 1.0
        assert summary.p_hat[0, 1] == 1.0
        assert np.isnan(summary.p_hat[0, 0])

    def test_corr_increase_permutation_invariant(self):
        draws = degenerate_draws(k=50)
        rng = np.random.default_rng(7)
        c1 = draws.names.index("omega_cond1[m0,m1]")
        c2 = draws.names.index("omega_cond2[m0,m1]")
        draws.draws[:, c1] = rng.uniform(-1, 1, 50)
        draws.draws[:, c2] = rng.uniform(-1, 1, 50)
        p = corr_increase_probability(draws).pairs["p_hat"].iloc[0]
        perm = rng.permutation(50)
        draws.draws = draws.draws[perm]
        assert corr_increase_probability(draws).pairs["p_hat"].iloc[0] == p

    def test_corr_increase_label_swap_equivariance(self):
        draws = degenerate_draws(k=50)
        rng = np.random.default_rng(8)
        c1 = draws.names.index("omega_cond1[m0,m1]")
        c2 = draws.names.index("omega_cond2[m0,m1]")
        a = rng.uniform(-1, 1, 50)
        b = rng.uniform(-1, 1, 50)
        draws.draws[:, c1] = a
        draws.draws[:, c2] = b
        p = corr_increase_probability(draws).pairs["p_hat"].iloc[0]
        draws.draws[:, c1] = b
        draws.draws[:, c2] = a
        q = corr_increase_probability(draws).pairs["p_hat"].iloc[0]
        # ties break toward zero, so equivariance holds up to tie mass
        ties = float(np.mean(a == b))
        assert q == pytest.approx(1.0 - p, abs=ties + 1e-12)


class TestSubsetSpec:
    def test_conjunction_and_medians(self):
        counts = np.array([[0, 10], [5, 1], [9, 8], [2, 3]])
        spec = SubsetSpec("A", (("x", "gt_median"), ("y", "gt_median")))
        # medians: x -> 3.5, y -> 5.5; both above only in row 2
        assert spec.evaluate(counts, ["x", "y"]) == pytest.approx(0.25)

    def test_zero_predicates(self):
        counts = np.array([[0, 1], [3, 0], [0, 2]])
        assert SubsetSpec("z", (("x", "eq_zero"),)).evaluate(counts, ["x", "y"]) == pytest.approx(2 / 3)
        assert SubsetSpec("nz", (("x", "gt_zero"),)).evaluate(counts, ["x", "y"]) == pytest.approx(1 / 3)

    def test_empty_rules_rejected(self):
        with pytest.raises(ParameterError):
            SubsetSpec("bad", ())

    def test_unknown_predicate_rejected(self):
        with pytest.raises(ParameterError):
            SubsetSpec("bad", (("x", "between"),))

    def test_absent_marker(self):
        spec = SubsetSpec("A", (("nope", "gt_median"),))
        with pytest.raises(NotFoundError):
            spec.evaluate(np.zeros((3, 1)), ["x"])


class TestPosteriorPredictive:
    def test_eq_zero_with_large_rate_is_near_zero(self):
        table = make_table(n_per=50, j=2, d=2, seed=9, mean=30.0)
        draws = degenerate_draws(j=2, value=0.0, k=3)
        for c in (1, 2):
            for m in ("m0", "m1"):
                draws.draws[:, draws.names.index(f"beta_cond{c}.{m}")] = math.log(40.0)
        for block in ("cond1", "cond2", "donor"):
            for m in ("m0", "m1"):
                draws.draws[:, draws.names.index(f"sigma_{block}.{m}")] = 0.05
        # donor effects for this table's two donors
        draws.names += ["u[d2,m0]", "u[d2,m1]"]
        draws.draws = np.hstack([draws.draws, np.zeros((3, 2))])
        out = posterior_predictive(
            draws, table, SubsetSpec("zero", (("m0", "eq_zero"),)), n_rep=40, seed=0)
        assert np.all(out.replicated < 0.01)

    def test_requires_known_marker(self):
        table = make_table(n_per=10, j=2, d=2)
        draws = degenerate_draws(j=2)
        with pytest.raises(NotFoundError):
            posterior_predictive(draws, table, SubsetSpec("A", (("zz", "gt_median"),)),
                                 n_rep=5, seed=0)

    def test_deterministic_given_seed(self):
        table = make_table(n_per=20, j=2, d=2, seed=10)
        draws = degenerate_draws(j=2, value=0.2, k=5)
        draws.names += ["u[d2,m0]", "u[d2,m1]"]
        draws.draws = np.hstack([draws.draws, np.zeros((5, 2))])
        spec = SubsetSpec("A", (("m0", "gt_median"),))
        a = posterior_predictive(draws, table, spec, n_rep=25, seed=3)
        b = posterior_predictive(draws, table, spec, n_rep=25, seed=3)
        assert np.array_equal(a.replicated, b.replicated)
        assert a.observed == b.observed

    def test_frame_schema(self):
        table = make_table(n_per=10, j=2, d=2)
        draws = degenerate_draws(j=2, value=0.1, k=2)
        draws.names += ["u[d2,m0]", "u[d2,m1]"]
        draws.draws = np.hstack([draws.draws, np.zeros((2, 2))])
        out = posterior_predictive(
            draws, table, SubsetSpec("A", (("m0", "gt_median"),)), n_rep=7, seed=1)
        frame = out.to_frame()
        assert list(frame.columns) == ["stat_name", "observed", "rep_index", "replicated"]
        assert len(frame) == 7
