"""Convergence diagnostics and posterior summaries.

R-hat is the split-chain Gelman-Rubin statistic: each chain is halved before
comparing between- and within-sequence variance, which also catches trends
inside single chains. Effective sample size uses FFT autocovariances combined
across split chains with Geyer's initial-monotone truncation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .sampler import PosteriorDraws


def _split_chains(x: np.ndarray) -> np.ndarray:
    """(chains, n) -> (2*chains, n//2), dropping one draw from odd-length chains."""
    c, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def _check_rhat_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("expected draws with shape (chains, iterations)")
    if x.shape[0] < 2:
        raise ValidationError("R-hat requires at least two chains")
    if x.shape[1] < 4:
        raise ValidationError("R-hat requires at least four draws per chain")
    return x


def rhat_array(x: np.ndarray) -> float:
    """Split-chain R-hat of one parameter's (chains, iterations) draws.

    NaN when the draws carry no variance at all (constant chains).
    """
    s = _split_chains(_check_rhat_input(x))
    n = s.shape[1]
    within = s.var(axis=1, ddof=1).mean()
    between = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    if var_plus == 0:
        return float("nan")
    with np.errstate(divide="ignore"):
        return float(np.sqrt(var_plus / within))


def rhat(draws: PosteriorDraws, param: str) -> float:
    return rhat_array(draws.param(param))


def rhat_all(draws: PosteriorDraws) -> dict[str, float]:
    return {name: rhat_array(draws.draws[:, :, i]) for i, name in enumerate(draws.names)}


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row via FFT, biased normalization (divide by n)."""
    n = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def ess_array(x: np.ndarray) -> float:
    """Effective sample size of (chains, iterations) draws for the mean."""
    s = _split_chains(_check_rhat_input(x))
    m, n = s.shape
    if np.allclose(s, s.ravel()[0]):
        return float("nan")
    acov = _autocov(s)
    within = (acov[:, 0] * n / (n - 1.0)).mean()
    between = s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * within + between
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs, truncate at first negative, force monotone
    n_pairs = len(rho) // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    cap = np.inf
    total = 0.0
    for p in pairs:
        if p <= 0:
            break
        cap = min(cap, p)
        total += cap
    tau = max(-rho[0] + 2.0 * total, 1.0 / np.log10(m * n + 10.0))
    return float(m * n / tau)


def ess(draws: PosteriorDraws, param: str) -> float:
    return ess_array(draws.param(param))


def mcse_mean(draws: PosteriorDraws, param: str) -> float:
    """Monte Carlo standard error of the posterior mean estimate."""
    x = draws.param(param)
    n_eff = ess_array(x)
    if not np.isfinite(n_eff):
        return 0.0 if np.allclose(x, x.ravel()[0]) else float("nan")
    return float(x.std(ddof=1) / np.sqrt(n_eff))


@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    sd: float
    q2_5: float
    q97_5: float
    rhat: float
    ess: float
    mcse: float


def summarize(draws: PosteriorDraws) -> dict[str, ParamSummary]:
    """Pooled mean/sd and type-7 interval quantiles, with per-parameter R-hat.

    With a single chain the R-hat and ESS columns are NaN (they need at least
    two chains) while the moment and quantile columns remain valid.
    """
    if draws.n_kept == 0:
        raise ValidationError("cannot summarize empty draws")
    out = {}
    multi = draws.n_chains >= 2 and draws.n_kept >= 4
    for i, name in enumerate(draws.names):
        x = draws.draws[:, :, i]
        pooled = x.reshape(-1)
        q_lo, q_hi = np.quantile(pooled, [0.025, 0.975])
        if multi:
            r = rhat_array(x)
            n_eff = ess_array(x)
            se = mcse_mean(draws, name)
        else:
            r = n_eff = se = float("nan")
        out[name] = ParamSummary(
            name=name,
            mean=float(pooled.mean()),
            sd=float(pooled.std(ddof=1)) if len(pooled) > 1 else 0.0,
            q2_5=float(q_lo),
            q97_5=float(q_hi),
            rhat=r,
            ess=n_eff,
            mcse=se,
        )
    return out
