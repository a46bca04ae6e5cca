"""Joint unnormalized log posterior with analytic gradient.

The model augments the latent traits as sampled parameters: every subject
contributes a trait density term and an outcome term, and treated subjects
additionally contribute response terms. Evaluation happens on the
unconstrained scale, so the log-Jacobian of the constraining map is always
part of the value (and its gradient contributes +1 per log-scale coordinate).

Out-of-support points return a -inf value with a zero gradient rather than
raising, so samplers can reject and move on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import TrialDataset
from .errors import ValidationError
from .measurement import ItemKind, ItemParams, PackedItems, matrix_terms, pack_items, prepare_responses
from .structural import LOG_2PI
from .transforms import ParameterLayout, ParameterSet, layout_for

# ---------------------------------------------------------------------------
# Priors. Each prior evaluates elementwise on the constrained scale;
# log_density returns -inf outside the support and grad is d(log density)/dx.


@dataclass(frozen=True)
class NormalPrior:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"Normal prior sigma must be positive, got {self.sigma}")

    def log_density(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return -0.5 * LOG_2PI - np.log(self.sigma) - 0.5 * z * z

    def grad(self, x):
        return -(np.asarray(x, dtype=float) - self.mu) / (self.sigma ** 2)


@dataclass(frozen=True)
class LogNormalPrior:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"LogNormal prior sigma must be positive, got {self.sigma}")

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(x)
            z = (lx - self.mu) / self.sigma
            out = -lx - 0.5 * LOG_2PI - np.log(self.sigma) - 0.5 * z * z
        return np.where(x > 0, out, -np.inf)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = -(1.0 + (np.log(x) - self.mu) / (self.sigma ** 2)) / x
        return np.where(x > 0, g, 0.0)


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"Uniform prior needs lo < hi, got ({self.lo}, {self.hi})")

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), -np.log(self.hi - self.lo), -np.inf)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class FlatPrior:
    """Improper constant prior: contributes nothing beyond the transform Jacobian."""

    def log_density(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class HalfNormalPrior:
    sigma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"HalfNormal prior sigma must be positive, got {self.sigma}")

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        z = x / self.sigma
        out = 0.5 * np.log(2.0 / np.pi) - np.log(self.sigma) - 0.5 * z * z
        return np.where(x > 0, out, -np.inf)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, -x / (self.sigma ** 2), 0.0)


_SLOPE_PRIORS = (LogNormalPrior, NormalPrior, UniformPrior, FlatPrior)
_INTERCEPT_PRIORS = (NormalPrior, UniformPrior, FlatPrior)
_STRUCTURAL_PRIORS = (FlatPrior, NormalPrior, UniformPrior)
_SCALE_PRIORS = (FlatPrior, HalfNormalPrior, LogNormalPrior, UniformPrior)


@dataclass(frozen=True)
class PriorConfig:
    """Prior choices per parameter block.

    Defaults follow common practice for this model family: log-normal slopes
    with location 0.1 and scale 0.3, standard normal intercepts, flat
    (improper) priors on the structural coefficients, and flat priors on the
    positive half-line for both residual scales. The scale prior applies to
    sigma_eta and sigma_y alike.
    """

    slope: LogNormalPrior | NormalPrior | UniformPrior | FlatPrior = field(
        default_factory=lambda: LogNormalPrior(0.1, 0.3)
    )
    intercept: NormalPrior | UniformPrior | FlatPrior = field(
        default_factory=lambda: NormalPrior(0.0, 1.0)
    )
    structural: FlatPrior | NormalPrior | UniformPrior = field(default_factory=FlatPrior)
    scale: FlatPrior | HalfNormalPrior | LogNormalPrior | UniformPrior = field(
        default_factory=FlatPrior
    )

    def __post_init__(self):
        for name, value, allowed in (
            ("slope", self.slope, _SLOPE_PRIORS),
            ("intercept", self.intercept, _INTERCEPT_PRIORS),
            ("structural", self.structural, _STRUCTURAL_PRIORS),
            ("scale", self.scale, _SCALE_PRIORS),
        ):
            if not isinstance(value, allowed):
                raise ValidationError(
                    f"{name} prior must be one of "
                    f"{[t.__name__ for t in allowed]}, got {type(value).__name__}"
                )
        if isinstance(self.scale, UniformPrior) and self.scale.lo < 0:
            raise ValidationError("scale priors must have support on the positive reals")


class Posterior:
    """Callable joint log posterior: posterior(v) -> (log density, gradient).

    v lives on the unconstrained scale defined by the dataset's measurement
    spec. Pass fixed_items to condition on known item parameters, which drops
    the item blocks from the vector (used by the quadrature reference and by
    small calibration fits).
    """

    def __init__(self, data: TrialDataset, prior: PriorConfig | None = None,
                 fixed_items: tuple[ItemParams, ...] | None = None):
        self.data = data
        self.prior = prior if prior is not None else PriorConfig()
        spec = data.spec
        if fixed_items is not None:
            fixed_items = tuple(fixed_items)
            if len(fixed_items) != spec.n_items:
                raise ValidationError(
                    f"{len(fixed_items)} fixed items but spec has {spec.n_items}"
                )
            for j, item in enumerate(fixed_items):
                if item.kind is not spec.kind or item.n_categories != spec.cats[j]:
                    raise ValidationError(f"fixed item {j + 1} does not match the spec")
        self.layout = ParameterLayout(
            spec, data.n_subjects, data.n_covariates,
            include_items=fixed_items is None, fixed_items=fixed_items,
        )
        self._packed_fixed = pack_items(list(fixed_items)) if fixed_items is not None else None
        self._cats = np.asarray(spec.cats, dtype=np.int64)
        self._X = data.x
        self._y = data.y
        self._zf = data.z.astype(float)
        self._tidx = data.treated_idx
        self._prep = prepare_responses(spec.kind, data.responses.data, self._cats)
        lay = self.layout
        p = data.n_covariates
        s0 = lay._s0
        # structural location coordinates (everything but the two log-scales)
        self._loc_idx = np.concatenate([
            np.arange(s0, s0 + 1 + p),
            np.arange(lay._idx_gamma0, lay._idx_gamma0 + 1 + p),
            np.arange(lay._idx_omega, lay._idx_omega + 3),
        ])

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def names(self) -> list[str]:
        return self.layout.names

    def constrain_draws(self, draws: np.ndarray) -> np.ndarray:
        return self.layout.constrain_draws(draws)

    def parameter_set(self, v: np.ndarray) -> ParameterSet:
        return self.layout.parameter_set(np.asarray(v, dtype=float))

    def __call__(self, v: np.ndarray):
        lay = self.layout
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            return -np.inf, np.zeros(lay.dim)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value, grad = self._eval(v)
        if not np.isfinite(value):
            return -np.inf, np.zeros(lay.dim)
        return value, grad

    def _eval(self, v):
        lay = self.layout
        pr = self.prior
        up = lay.unpack(v)
        g = np.zeros(lay.dim)
        # guard the squares, not the scales: exp of a deep-negative coordinate
        # is a positive denormal whose square underflows to exactly zero, and
        # the density limit there is -inf anyway
        e2 = up.sigma_eta * up.sigma_eta
        y2 = up.sigma_y * up.sigma_y
        if not (0.0 < e2 < np.inf and 0.0 < y2 < np.inf):
            return -np.inf, g
        if lay.include_items:
            if not (np.all(np.isfinite(up.slopes)) and np.all(np.isfinite(up.intercepts))):
                return -np.inf, g
            packed = PackedItems(self.data.spec.kind, up.slopes, up.intercepts, self._cats)
        else:
            packed = self._packed_fixed

        eta = up.eta
        N = lay.n_subjects
        X, y, zf = self._X, self._y, self._zf

        re = eta - up.beta0 - X @ up.beta
        inv_e2 = 1.0 / e2
        sse = re @ re
        ll = -N * (0.5 * LOG_2PI + np.log(up.sigma_eta)) - 0.5 * inv_e2 * sse

        w = up.omega + zf * up.tau1
        ry = y - up.gamma0 - X @ up.gamma - w * eta - zf * up.tau0
        inv_y2 = 1.0 / y2
        ssy = ry @ ry
        ll += -N * (0.5 * LOG_2PI + np.log(up.sigma_y)) - 0.5 * inv_y2 * ssy

        ll_m, d_etaT, d_a, d_D = matrix_terms(packed, self._prep, eta[self._tidx])
        ll += ll_m

        # trait gradients: trait density + outcome regression + response terms
        g_eta = -re * inv_e2 + (ry * inv_y2) * w
        g_eta[self._tidx] += d_etaT
        g[lay._eta0:] = g_eta

        g[lay._idx_beta0] = re.sum() * inv_e2
        g[lay._idx_beta0 + 1: lay._idx_sigma_eta] = (re @ X) * inv_e2
        g[lay._idx_sigma_eta] = -N + inv_e2 * sse
        g[lay._idx_gamma0] = ry.sum() * inv_y2
        g[lay._idx_gamma0 + 1: lay._idx_omega] = (ry @ X) * inv_y2
        g[lay._idx_omega] = (eta @ ry) * inv_y2
        g[lay._idx_omega + 1] = (zf @ ry) * inv_y2
        g[lay._idx_omega + 2] = ((zf * eta) @ ry) * inv_y2
        g[lay._idx_sigma_y] = -N + inv_y2 * ssy

        # structural location priors (identity transform)
        loc = v[self._loc_idx]
        pv = pr.structural.log_density(loc)
        if np.isneginf(pv).any():
            return -np.inf, g
        ll += pv.sum()
        g[self._loc_idx] += pr.structural.grad(loc)

        # scale priors, chained through the log transform
        for sigma, idx in ((up.sigma_eta, lay._idx_sigma_eta), (up.sigma_y, lay._idx_sigma_y)):
            pv = pr.scale.log_density(sigma)
            if np.isneginf(pv):
                return -np.inf, g
            ll += float(pv)
            g[idx] += sigma * float(pr.scale.grad(sigma))

        if lay.include_items:
            ll2 = self._item_terms(v, up, g, d_a, d_D)
            if not np.isfinite(ll2):
                return -np.inf, g
            ll += ll2

        ll += up.log_jac
        g[lay._jac_idx] += 1.0
        return ll, g

    def _item_terms(self, v, up, g, d_a, d_D):
        """Item priors added to the kernel gradients, chained to v-coordinates."""
        lay = self.layout
        pr = self.prior
        val = 0.0
        free_s = lay._free_slope
        if free_s.any():
            a = up.slopes[free_s]
            pv = pr.slope.log_density(a)
            if np.isneginf(pv).any():
                return -np.inf
            val += pv.sum()
            g[lay._slope_idx[free_s]] = a * (d_a[free_s] + pr.slope.grad(a))
        free_d = lay._free_int
        D = up.intercepts
        pv = pr.intercept.log_density(D[free_d])
        if np.isneginf(pv).any():
            return -np.inf
        val += pv.sum()
        dD = d_D.copy()
        dD[free_d] += pr.intercept.grad(D[free_d])
        if lay.spec.kind is ItemKind.GRM:
            # d_k = d_1 - sum of decrements, so each coordinate collects the
            # tail sum of intercept gradients at and beyond its column
            revcum = np.cumsum(dD[:, ::-1], axis=1)[:, ::-1]
            first = free_d[:, 0]
            g[lay._int_idx[first, 0]] = revcum[first, 0]
            dec = np.exp(v[lay._grm_dec_src])
            g[lay._grm_dec_src] = -dec * revcum[lay._grm_dec_mask]
        else:
            g[lay._int_direct_src] = dD.ravel()[lay._int_direct_dst]
        return val


def log_prior(ps: ParameterSet, cfg: PriorConfig, **layout_kwargs) -> float:
    """Joint log prior of a constrained ParameterSet, Jacobian included.

    The value is the prior density of the free coordinates on the
    unconstrained scale (the density the sampler actually targets), expressed
    through the constrained values. Out-of-support parameters give -inf.
    """
    lay = layout_for(ps, **layout_kwargs)
    v = lay.pack(ps)
    up = lay.unpack(v)
    total = lay.log_jacobian(v)
    blocks = []
    if lay._free_slope.any():
        blocks.append(cfg.slope.log_density(up.slopes[lay._free_slope]))
    blocks.append(cfg.intercept.log_density(up.intercepts[lay._free_int]))
    p = lay.n_covariates
    loc_idx = np.concatenate([
        np.arange(lay._s0, lay._s0 + 1 + p),
        np.arange(lay._idx_gamma0, lay._idx_gamma0 + 1 + p),
        np.arange(lay._idx_omega, lay._idx_omega + 3),
    ])
    blocks.append(cfg.structural.log_density(v[loc_idx]))
    blocks.append(cfg.scale.log_density(np.array([ps.structural.sigma_eta,
                                                  ps.structural.sigma_y])))
    for b in blocks:
        b = np.asarray(b, dtype=float)
        if np.isneginf(b).any():
            return -np.inf
        total += float(b.sum())
    return float(total)


def log_posterior(v: np.ndarray, data: TrialDataset, cfg: PriorConfig | None = None) -> float:
    value, _ = Posterior(data, cfg)(v)
    return value


def grad_log_posterior(v: np.ndarray, data: TrialDataset,
                       cfg: PriorConfig | None = None) -> np.ndarray:
    _, grad = Posterior(data, cfg)(v)
    return grad
