"""Hamiltonian Monte Carlo with dual-averaging step size and diagonal mass
adaptation, plus multi-chain orchestration.

Trajectories use a jittered fixed length: L is drawn uniformly from
{max(1, max_leapfrog/2), ..., max_leapfrog} each iteration, which breaks the
resonances fixed-length HMC is prone to without the bookkeeping of dynamic
termination. Warmup follows the standard three-phase schedule: a fast
step-size buffer, doubling mass-matrix windows, then a final step-size buffer.

Chains are reproducible by construction: chain c uses the RNG stream spawned
from (seed, spawn_key=(c,)), so results are identical however chains are
scheduled.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SamplerError, ValidationError

DIVERGENCE_NATS = 1000.0
INIT_ATTEMPTS = 100

# dual-averaging constants (standard choices)
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 2
    iterations: int = 5000
    warmup: int = 2000
    target_accept: float = 0.8
    max_leapfrog: int = 16
    seed: int = 0
    init_radius: float = 2.0

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("at least one chain is required")
        if self.iterations <= 0:
            raise ValidationError("iterations must be positive")
        if not 0 <= self.warmup < self.iterations:
            raise ValidationError("warmup must satisfy 0 <= warmup < iterations")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 1:
            raise ValidationError("max_leapfrog must be at least 1")
        if self.init_radius <= 0:
            raise ValidationError("init_radius must be positive")


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Post-warmup draws on the constrained scale, one block per chain."""

    draws: np.ndarray          # (chains, kept, dim)
    names: tuple[str, ...]
    accept_rate: np.ndarray    # (chains,) mean acceptance probability
    divergences: np.ndarray    # (chains,) post-warmup divergent transitions
    step_size: np.ndarray      # (chains,) adapted step sizes

    def __post_init__(self):
        if self.draws.ndim != 3:
            raise ValidationError("draws must have shape (chains, iterations, params)")
        if self.draws.shape[2] != len(self.names):
            raise ValidationError("one name per parameter column is required")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    @property
    def divergence_flagged(self) -> bool:
        """True when any chain diverged on more than 20% of kept iterations."""
        return bool((self.divergences / max(1, self.n_kept) > 0.2).any())

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown parameter {name!r}") from None

    def param(self, name: str) -> np.ndarray:
        """(chains, kept) draws of one parameter."""
        return self.draws[:, :, self.index_of(name)]

    def pooled(self, name: str) -> np.ndarray:
        return self.param(name).reshape(-1)


def leapfrog(target, v, p, grad, eps, n_steps, inv_mass):
    """n_steps leapfrog updates; returns (v, p, logp, grad, n_evals)."""
    v = v.copy()
    p = p + 0.5 * eps * grad
    for step in range(n_steps):
        v += eps * (inv_mass * p)
        logp, grad = target(v)
        if not np.isfinite(logp):
            return v, p, -np.inf, grad, step + 1
        p += (eps if step < n_steps - 1 else 0.5 * eps) * grad
    return v, p, logp, grad, n_steps


def _kinetic(p, inv_mass):
    return 0.5 * float(p @ (inv_mass * p))


def _hmc_transition(target, v, logp, grad, eps, n_steps, inv_mass, rng):
    """One jittered-trajectory transition.

    Returns (v, logp, grad, accept_prob, divergent).
    """
    p0 = rng.standard_normal(len(v)) / np.sqrt(inv_mass)
    h0 = logp - _kinetic(p0, inv_mass)
    v1, p1, logp1, grad1, _ = leapfrog(target, v, p0, grad, eps, n_steps, inv_mass)
    h1 = logp1 - _kinetic(p1, inv_mass) if np.isfinite(logp1) else -np.inf
    delta = h1 - h0
    divergent = not np.isfinite(delta) or -delta > DIVERGENCE_NATS
    alpha = 0.0 if divergent else min(1.0, float(np.exp(min(0.0, delta))))
    if not divergent and np.log(rng.random()) < delta:
        return v1, logp1, grad1, alpha, False
    return v, logp, grad, alpha, divergent


def _find_step_size(target, v, logp, grad, inv_mass, rng):
    """Crude bracketing of a step size with acceptance near 1/2."""
    eps = 1.0
    p0 = rng.standard_normal(len(v)) / np.sqrt(inv_mass)
    h0 = logp - _kinetic(p0, inv_mass)

    def accept_ratio(eps):
        v1, p1, logp1, _, _ = leapfrog(target, v, p0, grad, eps, 1, inv_mass)
        if not np.isfinite(logp1):
            return 0.0
        return float(np.exp(min(0.0, (logp1 - _kinetic(p1, inv_mass)) - h0)))

    a = accept_ratio(eps)
    direction = 1.0 if a > 0.5 else -1.0
    for _ in range(100):
        eps *= 2.0 ** direction
        if not 1e-10 < eps < 1e3:
            eps = min(max(eps, 1e-10), 1e3)
            break
        a = accept_ratio(eps)
        if (direction > 0 and a <= 0.5) or (direction < 0 and a >= 0.5):
            break
    return eps


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, eps0: float, target: float):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, alpha: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + _DA_T0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - alpha)
        self.log_eps = self.mu - np.sqrt(self.t) / _DA_GAMMA * self.h_bar
        w = self.t ** (-_DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def adapted(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _mass_window_spans(warmup: int) -> tuple[int, int, list[tuple[int, int]]]:
    """(init_buffer_end, terminal_buffer_start, mass window spans)."""
    if warmup < 20:
        return warmup, warmup, []
    if warmup < 150:
        init = max(1, round(0.15 * warmup))
        term_start = warmup - max(1, round(0.10 * warmup))
        return init, term_start, [(init, term_start)]
    init, term_start = 75, warmup - 50
    spans = []
    start, size = init, 25
    while start < term_start:
        if start + 2 * size > term_start:
            size = term_start - start
        spans.append((start, start + size))
        start += size
        size *= 2
    return init, term_start, spans


def _regularized_variance(window: np.ndarray) -> np.ndarray:
    n = len(window)
    var = window.var(axis=0, ddof=1) if n > 1 else np.ones(window.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def _run_chain(target, dim, cfg: SamplerConfig, chain: int):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(chain,)))
    v = None
    for _ in range(INIT_ATTEMPTS):
        cand = rng.uniform(-cfg.init_radius, cfg.init_radius, dim)
        logp, grad = target(cand)
        if np.isfinite(logp):
            v = cand
            break
    if v is None:
        raise SamplerError(
            f"chain {chain}: no finite log density in {INIT_ATTEMPTS} draws from "
            f"uniform(-{cfg.init_radius}, {cfg.init_radius}) initialization"
        )

    inv_mass = np.ones(dim)
    eps = _find_step_size(target, v, logp, grad, inv_mass, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    init_end, term_start, spans = _mass_window_spans(cfg.warmup)
    span_starts = {s for s, _ in spans}
    span_ends = {e for _, e in spans}
    window: list[np.ndarray] = []

    kept = np.empty((cfg.iterations - cfg.warmup, dim))
    lo = max(1, cfg.max_leapfrog // 2)
    accept_sum = 0.0
    divergences = 0
    for it in range(cfg.iterations):
        n_steps = int(rng.integers(lo, cfg.max_leapfrog + 1))
        v, logp, grad, alpha, divergent = _hmc_transition(
            target, v, logp, grad, eps, n_steps, inv_mass, rng
        )
        if it < cfg.warmup:
            eps = da.update(alpha)
            if it in span_starts:
                window = []
            if spans and spans[0][0] <= it:
                window.append(v)
            if it + 1 in span_ends:
                inv_mass = _regularized_variance(np.asarray(window))
                spans.pop(0)
                window = []
                eps = _find_step_size(target, v, logp, grad, inv_mass, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if it + 1 == cfg.warmup:
                eps = da.adapted
        else:
            kept[it - cfg.warmup] = v
            accept_sum += alpha
            divergences += divergent
    n_kept = len(kept)
    return kept, accept_sum / max(1, n_kept), divergences, eps


def run_chains(target, dim: int, cfg: SamplerConfig | None = None, *,
               names: tuple[str, ...] | None = None,
               constrain=None, workers: int = 1) -> PosteriorDraws:
    """Run cfg.chains independent HMC chains over a (logp, grad) target.

    constrain, when given, maps a matrix of raw draws to the reporting scale
    (e.g. exponentiating log-scale coordinates). Results are bit-identical for
    any worker count because each chain owns a pre-split RNG stream.
    """
    cfg = cfg if cfg is not None else SamplerConfig()
    if dim <= 0:
        raise ValidationError("dim must be positive")
    if names is not None and len(names) != dim:
        raise ValidationError(f"{len(names)} names for {dim} parameters")
    if names is None:
        names = tuple(f"v[{i + 1}]" for i in range(dim))
    if workers > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.chains)) as pool:
            futures = [pool.submit(_run_chain, target, dim, cfg, c) for c in range(cfg.chains)]
            results = [f.result() for f in futures]
    else:
        results = [_run_chain(target, dim, cfg, c) for c in range(cfg.chains)]
    raw = np.stack([r[0] for r in results])
    out = np.stack([constrain(chain) for chain in raw]) if constrain is not None else raw
    if not np.all(np.isfinite(out)):
        raise SamplerError("non-finite values in stored draws")
    return PosteriorDraws(
        draws=out,
        names=tuple(names),
        accept_rate=np.array([r[1] for r in results]),
        divergences=np.array([r[2] for r in results], dtype=np.int64),
        step_size=np.array([r[3] for r in results]),
    )


def fit(posterior, cfg: SamplerConfig | None = None, workers: int = 1) -> PosteriorDraws:
    """Fit a Posterior object, reporting draws on the constrained scale."""
    return run_chains(
        posterior, posterior.dim, cfg,
        names=tuple(posterior.names),
        constrain=posterior.constrain_draws,
        workers=workers,
    )
