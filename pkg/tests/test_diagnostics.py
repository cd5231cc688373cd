"""R-hat and ESS against constructions with known answers."""

import numpy as np
import pytest

from cytomix.diagnostics import compute_ess, compute_rhat, rank_normalize, split_chains
from cytomix.errors import ParameterError


def test_split_chains_shape():
    x = np.arange(20.0).reshape(2, 10)
    s = split_chains(x)
    assert s.shape == (4, 5)
    assert np.array_equal(s[0], x[0, :5])
    assert np.array_equal(s[2], x[0, 5:])


def test_rank_normalize_monotone():
    x = np.array([[3.0, 1.0, 2.0, 10.0]])
    z = rank_normalize(x)
    assert np.argsort(z.ravel()).tolist() == np.argsort(x.ravel()).tolist()


def test_iid_chains_rhat_near_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 10_000))
    r = compute_rhat(x)
    assert 1.0 <= r <= 1.01


def test_offset_chain_inflates_rhat():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 500))
    x[0] += 10.0
    assert compute_rhat(x) > 1.1


def test_single_chain_rhat_unavailable():
    with pytest.raises(ParameterError):
        compute_rhat(np.random.default_rng(2).standard_normal((1, 100)))


def test_too_few_draws_rejected():
    with pytest.raises(ParameterError):
        compute_rhat(np.zeros((2, 3)))


def test_iid_ess_close_to_total():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5_000))
    ess = compute_ess(x)
    assert ess > 0.8 * x.size
    assert ess <= x.size


def test_ar1_ess_matches_closed_form():
    # AR(1) with rho=0.9: ESS/K = (1-rho)/(1+rho) ~ 0.0526
    rho = 0.9
    rng = np.random.default_rng(4)
    n = 100_000
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = rho * x[i - 1] + math_sqrt1mrho2 * e[i]
    ess = compute_ess(x[None, :])
    expected = n * (1 - rho) / (1 + rho)
    assert abs(ess - expected) / expected < 0.3


math_sqrt1mrho2 = float(np.sqrt(1 - 0.9**2))


def test_ess_capped_at_total_draws():
    # strongly antithetic series would exceed the cap without clamping
    n = 1000
    x = np.tile([1.0, -1.0], n // 2) + 0.01 * np.random.default_rng(5).standard_normal(n)
    assert compute_ess(x[None, :]) <= n


def test_constant_series_gives_nan():
    assert np.isnan(compute_ess(np.ones((2, 100))))
