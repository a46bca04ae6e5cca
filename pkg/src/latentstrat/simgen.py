"""Synthetic trial generation.

The design is fixed up to scenario knobs: two covariates (X1 standard normal,
X2 Bernoulli(1/2)), balanced complete randomization, trait and outcome
regressions with residual variances calibrated to hit target R-squared
values, item responses for the treated arm only, and per-subject missingness.

Draw order within a scenario seed is part of the contract (changing it would
silently change every seeded dataset): covariates, treatment permutation,
item parameters (slopes first, then intercepts item by item), structural
draws (omega, tau1, tau0), trait noise, outcome noise, response uniforms,
missingness uniforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import MeasurementSpec, TrialDataset
from .errors import ValidationError
from .measurement import MISSING, ItemKind, ItemParams, ResponseMatrix, _sigmoid
from .structural import StructuralParams, outcome_mean
from .transforms import ParameterSet

# covariate covariance: var(X1) = 1, var(X2) = 1/4, independent
_COV_DIAG = np.array([1.0, 0.25])


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation condition: measurement model, sizes, and design constants."""

    kind: ItemKind
    n_subjects: int
    n_items: int
    seed: int
    n_categories: int = 4              # polytomous kinds only; binary kinds use 2
    missing_fraction: float = 0.4
    r2_eta: float = 0.5
    r2_y: float = 0.2
    omega_range: tuple[float, float] = (0.1, 0.3)
    tau1_range: tuple[float, float] = (-0.2, -0.1)
    tau0_range: tuple[float, float] = (0.2, 0.4)
    beta: tuple[float, float] = (-1.0, 0.5)
    gamma: tuple[float, float] = (1.0, 0.5)
    beta0: float = 0.0
    gamma0: float = 0.0
    slope_mu: float = 0.1
    slope_sigma: float = 0.3
    bernoulli_missing: bool = False    # per-cell Bernoulli instead of fixed count

    def __post_init__(self):
        if self.n_subjects <= 0 or self.n_subjects % 2:
            raise ValidationError("n_subjects must be a positive even number (balanced arms)")
        if self.n_items < 1:
            raise ValidationError("n_items must be at least 1")
        if not 0 < self.r2_eta < 1 or not 0 < self.r2_y < 1:
            raise ValidationError("R-squared targets must lie strictly in (0, 1)")
        if not 0 <= self.missing_fraction < 1:
            raise ValidationError("missing_fraction must lie in [0, 1)")
        if self.categories < 2:
            raise ValidationError("n_categories must be at least 2")
        for name, (lo, hi) in (("omega_range", self.omega_range),
                               ("tau1_range", self.tau1_range),
                               ("tau0_range", self.tau0_range)):
            if not lo < hi:
                raise ValidationError(f"{name} must be an increasing interval")

    @property
    def categories(self) -> int:
        return 2 if self.kind.is_binary else self.n_categories


@dataclass(frozen=True)
class GroundTruth:
    """The exact ParameterSet a dataset was generated from."""

    params: ParameterSet


def calibrate_residual_variance(r2_target: float, var_linear_predictor: float) -> float:
    """Residual variance making the linear predictor explain r2_target of the total."""
    if not 0 < r2_target < 1:
        raise ValidationError(f"R-squared target must lie in (0, 1), got {r2_target}")
    if var_linear_predictor <= 0:
        raise ValidationError("linear predictor variance must be positive")
    return var_linear_predictor * (1.0 - r2_target) / r2_target


def _polytomous_values(n_intercepts: int, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero ascending values with consecutive gaps uniform on (0.5, 1)."""
    gaps = rng.uniform(0.5, 1.0, n_intercepts - 1)
    vals = np.concatenate([[0.0], np.cumsum(gaps)])
    return vals - vals.mean()


def generate_item_params(kind: ItemKind, J: int, rng: np.random.Generator,
                         n_categories: int = 4, slope_mu: float = 0.1,
                         slope_sigma: float = 0.3) -> list[ItemParams]:
    """Item parameters per the simulation design.

    Item 1 is forced to the fitted identification values for its kind (slope 1
    and first intercept 0 for sloped kinds) so that generated truth lives in
    the same parameterization the fit reports. For the graded response model
    the mean-zero gapped values are assigned in decreasing order.
    """
    if J < 1:
        raise ValidationError("J must be at least 1")
    if kind.is_binary:
        n_categories = 2
    slopes = None
    if kind.has_slope:
        slopes = np.exp(rng.normal(slope_mu, slope_sigma, J))
        slopes[0] = 1.0
    items = []
    for j in range(J):
        if n_categories == 2:
            d = np.array([rng.normal(0.0, 1.0)])
            if j == 0 and kind.has_slope:
                d[0] = 0.0
        else:
            d = _polytomous_values(n_categories - 1, rng)
            if kind is ItemKind.GRM:
                d = d[::-1]
            if j == 0 and kind.has_slope:
                d = d - d[0]
        items.append(ItemParams(kind, tuple(d), None if slopes is None else float(slopes[j])))
    return items


def _sample_categories(items: list[ItemParams], eta: np.ndarray,
                       u: np.ndarray) -> np.ndarray:
    """Inverse-CDF category draws; u is one uniform per (subject, item) cell."""
    n = len(eta)
    J = len(items)
    M = np.zeros((n, J), dtype=np.int64)
    for j, item in enumerate(items):
        a = 1.0 if item.slope is None else item.slope
        d = np.asarray(item.intercepts)
        if item.kind.is_binary:
            p1 = _sigmoid(a * eta + d[0])
            M[:, j] = (u[:, j] < p1).astype(np.int64)
            continue
        x = np.add.outer(a * eta, d)
        if item.kind is ItemKind.GPCM:
            s = np.concatenate([np.zeros((n, 1)), np.cumsum(x, axis=1)], axis=1)
            s -= s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
        else:
            pstar = np.concatenate([np.ones((n, 1)), _sigmoid(x), np.zeros((n, 1))], axis=1)
            p = -np.diff(pstar, axis=1)
        cum = np.cumsum(p, axis=1)
        M[:, j] = (u[:, j, None] > cum).sum(axis=1)
    return M


def generate_dataset(cfg: ScenarioConfig) -> tuple[TrialDataset, GroundTruth]:
    """Generate one synthetic trial and the truth that produced it."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    N, J = cfg.n_subjects, cfg.n_items
    beta = np.asarray(cfg.beta)
    gamma = np.asarray(cfg.gamma)

    x = np.column_stack([
        rng.normal(0.0, 1.0, N),
        rng.integers(0, 2, N).astype(float),
    ])
    z = np.zeros(N, dtype=np.int8)
    z[rng.permutation(N)[: N // 2]] = 1

    items = generate_item_params(cfg.kind, J, rng, cfg.categories,
                                 cfg.slope_mu, cfg.slope_sigma)

    omega = rng.uniform(*cfg.omega_range)
    tau1 = rng.uniform(*cfg.tau1_range)
    tau0 = rng.uniform(*cfg.tau0_range)

    var_lp_eta = float(beta @ (_COV_DIAG * beta))
    sigma_eta = float(np.sqrt(calibrate_residual_variance(cfg.r2_eta, var_lp_eta)))
    # outcome R-squared is conditional on (Z, eta): only the covariate signal
    # orthogonal to the trait counts toward the linear predictor variance
    cross = float(gamma @ (_COV_DIAG * beta))
    var_lp_y = float(gamma @ (_COV_DIAG * gamma)) - cross ** 2 / (var_lp_eta + sigma_eta ** 2)
    sigma_y = float(np.sqrt(calibrate_residual_variance(cfg.r2_y, var_lp_y)))

    sp = StructuralParams(
        beta0=cfg.beta0, beta=tuple(beta), sigma_eta=sigma_eta,
        gamma0=cfg.gamma0, gamma=tuple(gamma), omega=float(omega),
        tau0=float(tau0), tau1=float(tau1), sigma_y=sigma_y,
    )

    eta = cfg.beta0 + x @ beta + sigma_eta * rng.normal(0.0, 1.0, N)
    y = outcome_mean(z, eta, x, sp) + sigma_y * rng.normal(0.0, 1.0, N)

    tidx = np.flatnonzero(z == 1)
    nT = len(tidx)
    M = _sample_categories(items, eta[tidx], rng.uniform(0.0, 1.0, (nT, J)))
    u_miss = rng.uniform(0.0, 1.0, (nT, J))
    if cfg.bernoulli_missing:
        M[u_miss < cfg.missing_fraction] = MISSING
    else:
        k = round(cfg.missing_fraction * J)
        if k > 0:
            drop = np.argsort(u_miss, axis=1)[:, :k]
            np.put_along_axis(M, drop, MISSING, axis=1)

    spec = MeasurementSpec(kind=cfg.kind, cats=(cfg.categories,) * J)
    data = TrialDataset(z=z, y=y, x=x, responses=ResponseMatrix(M), spec=spec)
    truth = GroundTruth(params=ParameterSet(items=tuple(items), structural=sp, eta=eta))
    return data, truth
