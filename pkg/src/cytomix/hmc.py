"""Hamiltonian Monte Carlo engine.

Plain HMC with a jittered leapfrog step count, dual-averaged step size,
and an optional diagonal mass matrix estimated during warmup. Chains are
independent given sub-seeds spawned deterministically from the master
seed, so results are bit-identical for a fixed (config, inits) regardless
of how many worker threads execute them.

A target is anything exposing ``dim``, ``logp_grad(v) -> (float, array)``,
parameter ``names``, and ``constrain(v)`` mapping the unconstrained vector
to the reported parameter vector.
"""

from __future__ import annotations

import hashlib
import math
import os
import pickle
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, ParameterError

DIVERGENCE_ENERGY = 1000.0
CHECKPOINT_VERSION = 1


@dataclass
class SamplerConfig:
    """Chain layout and adaptation settings."""

    chains: int = 8
    iterations: int = 325
    warmup: int = 200
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog_steps: int = 32
    mass_matrix: str = "diagonal-adapted"  # or "identity"

    def validate(self) -> "SamplerConfig":
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.warmup < 1 or self.warmup >= self.iterations:
            raise ConfigError("need 1 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must be in (0, 1)")
        if self.max_leapfrog_steps < 1:
            raise ConfigError("max_leapfrog_steps must be >= 1")
        if self.mass_matrix not in ("identity", "diagonal-adapted"):
            raise ConfigError("mass_matrix must be 'identity' or 'diagonal-adapted'")
        return self

    @property
    def kept_per_chain(self) -> int:
        return self.iterations - self.warmup


@dataclass
class ModelTarget:
    """Log density with gradient plus the reporting map for draws."""

    dim: int
    logp_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]
    names: list[str]
    constrain: Callable[[np.ndarray], np.ndarray]
    diagnose: Optional[Callable[[np.ndarray], dict]] = None


@dataclass
class PosteriorDraws:
    """Retained posterior draws with chain and iteration provenance.

    ``draws`` is K x P on the reported (constrained) scale; rows are
    ordered by chain, then iteration.
    """

    draws: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    names: list[str]
    metadata: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def by_chain(self) -> np.ndarray:
        """Reshape to (chains, draws_per_chain, params)."""
        chains = np.unique(self.chain)
        per = [np.sum(self.chain == c) for c in chains]
        if len(set(per)) != 1:
            raise ValueError("chains have unequal draw counts")
        out = np.empty((len(chains), per[0], self.draws.shape[1]))
        for i, c in enumerate(chains):
            rows = self.chain == c
            order = np.argsort(self.iteration[rows], kind="stable")
            out[i] = self.draws[rows][order]
        return out

    def to_long_frame(self) -> pd.DataFrame:
        k, p = self.draws.shape
        return pd.DataFrame(
            {
                "chain": np.repeat(self.chain, p),
                "iteration": np.repeat(self.iteration, p),
                "parameter": np.tile(np.asarray(self.names, dtype=object), k),
                "value": self.draws.ravel(),
            }
        )

    def to_long_csv(self, path) -> None:
        self.to_long_frame().to_csv(path, index=False)

    @classmethod
    def from_long_csv(cls, path) -> "PosteriorDraws":
        df = pd.read_csv(path)
        required = {"chain", "iteration", "parameter", "value"}
        if not required.issubset(df.columns):
            raise ConfigError(f"draws file must have columns {sorted(required)}")
        names = list(dict.fromkeys(df["parameter"]))
        name_pos = {n: i for i, n in enumerate(names)}
        keys = df[["chain", "iteration"]].drop_duplicates().to_numpy()
        row_pos = {(int(c), int(it)): i for i, (c, it) in enumerate(keys)}
        draws = np.full((len(keys), len(names)), np.nan)
        rows = [row_pos[(int(c), int(it))] for c, it in zip(df["chain"], df["iteration"])]
        cols = [name_pos[p] for p in df["parameter"]]
        draws[rows, cols] = df["value"].to_numpy()
        return cls(
            draws=draws,
            chain=keys[:, 0].astype(int),
            iteration=keys[:, 1].astype(int),
            names=names,
        )


@dataclass
class Diagnostics:
    """Per-parameter convergence summaries and per-chain sampler health."""

    names: list[str]
    rhat: np.ndarray
    ess: np.ndarray
    accept_rate: np.ndarray
    divergences: np.ndarray
    step_size: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"parameter": self.names, "rhat": self.rhat, "ess": self.ess})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(np.max(finite)) if finite.size else float("nan")

    def total_divergences(self) -> int:
        return int(np.sum(self.divergences))


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------

@dataclass
class LeapfrogResult:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray
    ok: bool
    n_grad_evals: int


def leapfrog(q, p, eps, n_steps, logp_grad, inv_mass=None, grad0=None) -> LeapfrogResult:
    """Run ``n_steps`` leapfrog steps of the Hamiltonian flow.

    ``inv_mass`` is the diagonal of the inverse mass matrix (identity when
    omitted). ``grad0`` lets callers reuse a cached gradient at ``q``.
    Returns with ``ok=False`` as soon as any quantity turns non-finite.
    """
    if eps <= 0 or n_steps < 1:
        raise ParameterError("leapfrog needs eps > 0 and n_steps >= 1")
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    if inv_mass is None:
        inv_mass = 1.0
    evals = 0
    if grad0 is None:
        _, grad0 = logp_grad(q)
        evals += 1
    grad = np.asarray(grad0, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        return LeapfrogResult(q, p, -np.inf, grad, False, evals)
    lp = -np.inf
    p = p + 0.5 * eps * grad
    for step in range(n_steps):
        q = q + eps * inv_mass * p
        lp, grad = logp_grad(q)
        evals += 1
        if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
            return LeapfrogResult(q, p, -np.inf, grad, False, evals)
        p = p + (eps if step < n_steps - 1 else 0.5 * eps) * grad
    return LeapfrogResult(q, p, float(lp), grad, True, evals)


@dataclass
class DualAveraging:
    """Nesterov dual averaging of the log step size toward an accept target."""

    target_accept: float
    log_eps: float
    mu: float = 0.0
    log_eps_bar: float = 0.0
    h_bar: float = 0.0
    t: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75

    def __post_init__(self):
        if self.mu == 0.0:
            self.mu = math.log(10.0) + self.log_eps
        if self.log_eps_bar == 0.0:
            self.log_eps_bar = self.log_eps

    def update(self, accept_prob: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target_accept - accept_prob)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        self.log_eps = min(max(self.log_eps, -15.0), 5.0)
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def current(self) -> float:
        return math.exp(self.log_eps)

    @property
    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


def find_reasonable_epsilon(logp_grad, q, lp, grad, rng, inv_mass) -> float:
    """Double or halve the step size until one-step accept crosses 1/2."""
    eps = 1.0
    sqrt_mass = 1.0 / np.sqrt(inv_mass) if np.ndim(inv_mass) else 1.0
    p = rng.standard_normal(q.size) * sqrt_mass
    h0 = -lp + 0.5 * np.sum(p * p * inv_mass)

    def step_delta(e):
        res = leapfrog(q, p, e, 1, logp_grad, inv_mass, grad0=grad)
        if not res.ok:
            return np.inf
        return (-res.logp + 0.5 * np.sum(res.p * res.p * inv_mass)) - h0

    dh = step_delta(eps)
    for _ in range(60):
        if np.isfinite(dh):
            break
        eps *= 0.5
        dh = step_delta(eps)
    direction = 1.0 if -dh > math.log(0.5) else -1.0
    for _ in range(60):
        eps_next = eps * (2.0 ** direction)
        if not 1e-10 < eps_next < 1e3:
            break
        dh = step_delta(eps_next)
        accept_gate = -dh if np.isfinite(dh) else -np.inf
        if direction * accept_gate < direction * math.log(0.5):
            break
        eps = eps_next
    return eps


@dataclass
class StepResult:
    q: np.ndarray
    logp: float
    grad: np.ndarray
    accept_prob: float
    accepted: bool
    divergent: bool


def hmc_step(q, lp, grad, eps, n_steps, logp_grad, rng, inv_mass=1.0) -> StepResult:
    """One HMC transition: momentum refresh, leapfrog, Metropolis test.

    Trajectories whose energy error exceeds ``DIVERGENCE_ENERGY`` (or turns
    non-finite) are rejected and flagged divergent.
    """
    sqrt_mass = 1.0 / np.sqrt(inv_mass) if np.ndim(inv_mass) else 1.0
    p0 = rng.standard_normal(q.size) * sqrt_mass
    h0 = -lp + 0.5 * np.sum(p0 * p0 * inv_mass)
    res = leapfrog(q, p0, eps, n_steps, logp_grad, inv_mass, grad0=grad)
    if not res.ok:
        return StepResult(q, lp, grad, 0.0, False, True)
    h1 = -res.logp + 0.5 * np.sum(res.p * res.p * inv_mass)
    dh = h1 - h0
    if not np.isfinite(dh) or abs(dh) > DIVERGENCE_ENERGY:
        return StepResult(q, lp, grad, 0.0, False, True)
    accept_prob = min(1.0, math.exp(-max(dh, -700.0)))
    if rng.uniform() < accept_prob:
        return StepResult(res.q, res.logp, res.grad, accept_prob, True, False)
    return StepResult(q, lp, grad, accept_prob, False, False)


# ---------------------------------------------------------------------------
# Single-chain loop with resumable state
# ---------------------------------------------------------------------------

@dataclass
class _ChainState:
    index: int
    it: int
    q: np.ndarray
    lp: float
    grad: np.ndarray
    rng_state: dict
    da: DualAveraging
    inv_mass: np.ndarray
    eps: float
    kept: list
    accept_sum: float
    divergences: int
    warmup_divergences: int
    welford_n: int
    welford_mean: np.ndarray
    welford_m2: np.ndarray


def _init_chain_state(target, config, q0, seed_child, index) -> _ChainState:
    rng = np.random.default_rng(seed_child)
    lp, grad = target.logp_grad(q0)
    if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
        raise ParameterError(_describe_bad_init(target, q0, index))
    inv_mass = np.ones(target.dim)
    eps0 = find_reasonable_epsilon(target.logp_grad, q0, lp, grad, rng, inv_mass)
    da = DualAveraging(target_accept=config.target_accept, log_eps=math.log(eps0))
    return _ChainState(
        index=index,
        it=0,
        q=np.array(q0, dtype=np.float64),
        lp=lp,
        grad=grad,
        rng_state=rng.bit_generator.state,
        da=da,
        inv_mass=inv_mass,
        eps=eps0,
        kept=[],
        accept_sum=0.0,
        divergences=0,
        warmup_divergences=0,
        welford_n=0,
        welford_mean=np.zeros(target.dim),
        welford_m2=np.zeros(target.dim),
    )


def _describe_bad_init(target, q0, index) -> str:
    msg = f"chain {index + 1}: log density not finite at the initial point"
    if target.diagnose is not None:
        for term, value in target.diagnose(q0).items():
            if not np.all(np.isfinite(value)):
                return msg + f" (first non-finite term: {term})"
    return msg


def _run_chain(target, config: SamplerConfig, state: _ChainState,
               checkpoint_cb=None, checkpoint_every=0) -> _ChainState:
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    warmup = config.warmup
    adapt_metric = config.mass_matrix == "diagonal-adapted" and warmup >= 40
    window_start = warmup // 4
    metric_at = (3 * warmup) // 4

    while state.it < config.iterations:
        it = state.it
        in_warmup = it < warmup
        if adapt_metric and it == metric_at and state.welford_n >= 10:
            var = state.welford_m2 / (state.welford_n - 1)
            n = state.welford_n
            var = (n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3
            state.inv_mass = np.maximum(var, 1e-10)
            eps_now = max(state.da.adapted, 1e-10)
            state.da = DualAveraging(
                target_accept=config.target_accept, log_eps=math.log(eps_now)
            )
        if it == warmup:
            state.eps = max(state.da.adapted, 1e-10)
        # jitter the step count over the upper half of the budget: breaks
        # periodic orbits without collapsing the trajectory length
        lo = max(1, config.max_leapfrog_steps // 2)
        n_steps = int(rng.integers(lo, config.max_leapfrog_steps + 1))
        step = hmc_step(
            state.q, state.lp, state.grad, state.eps, n_steps,
            target.logp_grad, rng, state.inv_mass,
        )
        state.q, state.lp, state.grad = step.q, step.logp, step.grad
        if in_warmup:
            state.da.update(step.accept_prob)
            state.eps = state.da.current
            if step.divergent:
                state.warmup_divergences += 1
            if adapt_metric and window_start <= it < metric_at:
                state.welford_n += 1
                delta = state.q - state.welford_mean
                state.welford_mean = state.welford_mean + delta / state.welford_n
                state.welford_m2 = state.welford_m2 + delta * (state.q - state.welford_mean)
        else:
            state.accept_sum += step.accept_prob
            if step.divergent:
                state.divergences += 1
            state.kept.append(np.asarray(target.constrain(state.q), dtype=np.float64))
        state.it += 1
        state.rng_state = rng.bit_generator.state
        if checkpoint_cb is not None and checkpoint_every > 0 and state.it % checkpoint_every == 0:
            checkpoint_cb(state)
    return state


# ---------------------------------------------------------------------------
# Multi-chain orchestration
# ---------------------------------------------------------------------------

def _config_key(config: SamplerConfig, target: ModelTarget, inits) -> str:
    h = hashlib.sha256()
    h.update(repr(config).encode())
    h.update(str(target.dim).encode())
    h.update("|".join(target.names).encode())
    for q0 in inits:
        h.update(np.ascontiguousarray(q0, dtype=np.float64).tobytes())
    return h.hexdigest()


def _save_checkpoint(path, key, states):
    payload = {"magic": "cytomix-checkpoint", "version": CHECKPOINT_VERSION,
               "key": key, "states": states}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh)
    os.replace(tmp, path)


def _load_checkpoint(path, key):
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("magic") != "cytomix-checkpoint":
        raise ConfigError(f"{path} is not a checkpoint file")
    if payload["key"] != key:
        raise ConfigError("checkpoint does not match this config/init; refusing to resume")
    return payload["states"]


def run_chains(target: ModelTarget, config: SamplerConfig, inits,
               workers: int = 1, checkpoint_path=None,
               checkpoint_every: int = 0) -> tuple[PosteriorDraws, Diagnostics]:
    """Run all chains and assemble draws plus diagnostics.

    ``inits`` must supply one unconstrained vector per chain. Per-chain RNG
    streams are children of ``SeedSequence(config.seed)`` indexed by chain,
    so adding chains never perturbs existing ones. With ``checkpoint_path``
    set (sequential mode only), per-chain state is saved every
    ``checkpoint_every`` iterations and a later call resumes bit-identically.
    """
    config = config.validate()
    if len(inits) != config.chains:
        raise ConfigError(f"expected {config.chains} initial vectors, got {len(inits)}")
    if checkpoint_path is not None and workers != 1:
        raise ConfigError("checkpointing requires sequential execution (workers=1)")

    seed_children = np.random.SeedSequence(config.seed).spawn(config.chains)
    key = _config_key(config, target, inits)

    states: dict[int, _ChainState] = {}
    if checkpoint_path is not None and os.path.exists(checkpoint_path):
        states = _load_checkpoint(checkpoint_path, key)

    def make_state(c):
        if c in states:
            return states[c]
        return _init_chain_state(target, config, np.asarray(inits[c], dtype=np.float64),
                                 seed_children[c], c)

    def checkpoint_cb(state):
        states[state.index] = state
        _save_checkpoint(checkpoint_path, key, states)

    results: list[_ChainState] = [None] * config.chains
    if workers == 1:
        for c in range(config.chains):
            state = make_state(c)
            if state.it < config.iterations:
                state = _run_chain(
                    target, config, state,
                    checkpoint_cb=checkpoint_cb if checkpoint_path else None,
                    checkpoint_every=checkpoint_every,
                )
                if checkpoint_path:
                    checkpoint_cb(state)
            results[c] = state
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chain, target, config, make_state(c))
                       for c in range(config.chains)]
            for c, fut in enumerate(futures):
                results[c] = fut.result()

    kept = config.kept_per_chain
    p = len(target.names)
    draws = np.empty((config.chains * kept, p))
    chain_ids = np.empty(config.chains * kept, dtype=int)
    iterations = np.empty(config.chains * kept, dtype=int)
    for c, state in enumerate(results):
        block = slice(c * kept, (c + 1) * kept)
        draws[block] = np.vstack(state.kept) if state.kept else np.empty((0, p))
        chain_ids[block] = c + 1
        iterations[block] = np.arange(config.warmup + 1, config.iterations + 1)

    posterior = PosteriorDraws(
        draws=draws, chain=chain_ids, iteration=iterations, names=list(target.names),
        metadata={"config": config, "kept_per_chain": kept},
    )

    from .diagnostics import compute_ess, compute_rhat

    by_chain = posterior.by_chain()
    rhat = np.full(p, np.nan)
    ess = np.full(p, np.nan)
    for j in range(p):
        series = by_chain[:, :, j]
        if config.chains >= 2 and kept >= 4:
            rhat[j] = compute_rhat(series)
        if kept >= 4:
            ess[j] = compute_ess(series)
    if np.any(rhat[np.isfinite(rhat)] > 1.05):
        worst = np.nanmax(rhat)
        warnings.warn(f"convergence warning: max R-hat {worst:.3f} exceeds 1.05", stacklevel=2)

    diagnostics = Diagnostics(
        names=list(target.names),
        rhat=rhat,
        ess=ess,
        accept_rate=np.array([s.accept_sum / max(kept, 1) for s in results]),
        divergences=np.array([s.divergences for s in results], dtype=int),
        step_size=np.array([s.eps for s in results]),
    )
    return posterior, diagnostics
