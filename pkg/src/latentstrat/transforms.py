"""Bijection between constrained parameters and the sampler's unconstrained space.

Positive quantities (slopes, residual scales) map through log. Graded-response
intercepts, which must decrease strictly, map to (first intercept, log of each
successive decrement). Coordinates pinned by the identification scheme are
excluded from the vector entirely.

ParameterLayout owns the coordinate bookkeeping: names, index arrays, packing,
unpacking, and the log-Jacobian of the unconstraining map's inverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dataset import Constraint, MeasurementSpec
from .errors import ValidationError
from .measurement import ItemKind, ItemParams
from .structural import StructuralParams

N_STRUCTURAL_SCALARS = 7  # beta0, sigma_eta, gamma0, omega, tau0, tau1, sigma_y


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Every model parameter on the constrained scale, traits included."""

    items: tuple[ItemParams, ...]
    structural: StructuralParams
    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim != 1:
            raise ValidationError("eta must be a 1-d vector (one trait per subject)")
        if not np.all(np.isfinite(eta)):
            raise ValidationError("eta values must be finite")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    @property
    def n_subjects(self) -> int:
        return len(self.eta)

    def __eq__(self, other):
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return (
            self.items == other.items
            and self.structural == other.structural
            and self.eta.shape == other.eta.shape
            and bool(np.all(self.eta == other.eta))
        )


class Unpacked(NamedTuple):
    """Constrained values pulled out of an unconstrained vector (hot path)."""

    slopes: np.ndarray | None      # (J,) incl. fixed entries; None if items excluded
    intercepts: np.ndarray | None  # (J, max K-1), padded with 0
    beta0: float
    beta: np.ndarray
    sigma_eta: float
    gamma0: float
    gamma: np.ndarray
    omega: float
    tau0: float
    tau1: float
    sigma_y: float
    eta: np.ndarray
    log_jac: float


class ParameterLayout:
    """Index map between a ParameterSet and the flat unconstrained vector.

    Coordinate order: free slopes (a[2..J] under FixFirstItem), free
    intercepts row-major by item, the structural block, then one trait per
    subject. include_items=False drops the item blocks (used when item
    parameters are held fixed); fixed_items then supplies them for
    reconstruction.
    """

    def __init__(self, spec: MeasurementSpec, n_subjects: int, n_covariates: int,
                 include_items: bool = True,
                 fixed_items: tuple[ItemParams, ...] | None = None):
        if n_subjects < 0 or n_covariates < 0:
            raise ValidationError("subject and covariate counts must be non-negative")
        self.spec = spec
        self.n_subjects = int(n_subjects)
        self.n_covariates = int(n_covariates)
        self.include_items = include_items
        self.fixed_items = tuple(fixed_items) if fixed_items is not None else None

        J = spec.n_items
        cats = np.asarray(spec.cats)
        kc = int(cats.max()) - 1
        names: list[str] = []
        pos = 0

        slope_idx = np.full(J, -1, dtype=np.int64)
        int_idx = np.full((J, kc), -1, dtype=np.int64)
        if include_items:
            if spec.kind.has_slope:
                for j in range(J):
                    if not spec.slope_fixed(j):
                        slope_idx[j] = pos
                        names.append(f"a[{j + 1}]")
                        pos += 1
            for j in range(J):
                for k in range(cats[j] - 1):
                    if k == 0 and spec.first_intercept_fixed(j):
                        continue
                    int_idx[j, k] = pos
                    names.append(f"d[{j + 1},{k + 1}]")
                    pos += 1
        self._slope_idx = slope_idx
        self._int_idx = int_idx
        self._free_slope = slope_idx >= 0
        self._free_int = int_idx >= 0
        self._kc = kc
        self._cats = cats

        self._s0 = pos
        p = self.n_covariates
        names.append("beta0")
        names.extend(f"beta[{i + 1}]" for i in range(p))
        names.append("sigma_eta")
        names.append("gamma0")
        names.extend(f"gamma[{i + 1}]" for i in range(p))
        names.extend(["omega", "tau0", "tau1", "sigma_y"])
        pos += 2 * p + N_STRUCTURAL_SCALARS
        self._eta0 = pos
        names.extend(f"eta[{i + 1}]" for i in range(self.n_subjects))
        pos += self.n_subjects
        self.dim = pos
        self.names = names

        # log-scale coordinates: free slopes, both sigmas, and (for the graded
        # response model) every decrement coordinate (intercept columns >= 1)
        jac = list(slope_idx[self._free_slope])
        if spec.kind is ItemKind.GRM and include_items:
            jac.extend(int_idx[:, 1:][int_idx[:, 1:] >= 0])
        jac.extend([self._s0 + p + 1, self._s0 + 2 * p + N_STRUCTURAL_SCALARS - 1])
        self._jac_idx = np.sort(np.array(jac, dtype=np.int64))

        # flat copy maps for the direct-coded intercepts (everything except
        # the graded model's decrement columns)
        if spec.kind is ItemKind.GRM:
            direct = self._free_int.copy()
            direct[:, 1:] = False
        else:
            direct = self._free_int
        self._int_direct_src = int_idx[direct]
        self._int_direct_dst = np.flatnonzero(direct.ravel())
        if spec.kind is ItemKind.GRM:
            dec = self._free_int.copy()
            dec[:, 0] = False
            self._grm_dec_mask = dec
            self._grm_dec_src = int_idx[dec]

    # -- structural slice offsets -------------------------------------------
    @property
    def _idx_beta0(self):
        return self._s0

    @property
    def _idx_sigma_eta(self):
        return self._s0 + self.n_covariates + 1

    @property
    def _idx_gamma0(self):
        return self._s0 + self.n_covariates + 2

    @property
    def _idx_omega(self):
        return self._s0 + 2 * self.n_covariates + 3

    @property
    def _idx_sigma_y(self):
        return self._s0 + 2 * self.n_covariates + N_STRUCTURAL_SCALARS - 1

    def unpack(self, v: np.ndarray) -> Unpacked:
        if v.shape != (self.dim,):
            raise ValidationError(f"expected vector of length {self.dim}, got {v.shape}")
        p = self.n_covariates
        s0 = self._s0
        with np.errstate(over="ignore", invalid="ignore"):
            if self.include_items:
                slopes = np.ones(self.spec.n_items)
                slopes[self._free_slope] = np.exp(v[self._slope_idx[self._free_slope]])
                intercepts = np.zeros((self.spec.n_items, self._kc))
                intercepts.ravel()[self._int_direct_dst] = v[self._int_direct_src]
                if self.spec.kind is ItemKind.GRM:
                    dec = np.zeros((self.spec.n_items, self._kc))
                    dec[self._grm_dec_mask] = np.exp(v[self._grm_dec_src])
                    intercepts[:, 1:] = intercepts[:, :1] - np.cumsum(dec[:, 1:], axis=1)
            else:
                slopes = None
                intercepts = None
            sigma_eta = float(np.exp(v[self._idx_sigma_eta]))
            sigma_y = float(np.exp(v[self._idx_sigma_y]))
        return Unpacked(
            slopes=slopes,
            intercepts=intercepts,
            beta0=float(v[s0]),
            beta=v[s0 + 1: s0 + 1 + p],
            sigma_eta=sigma_eta,
            gamma0=float(v[self._idx_gamma0]),
            gamma=v[self._idx_gamma0 + 1: self._idx_gamma0 + 1 + p],
            omega=float(v[self._idx_omega]),
            tau0=float(v[self._idx_omega + 1]),
            tau1=float(v[self._idx_omega + 2]),
            sigma_y=sigma_y,
            eta=v[self._eta0: self._eta0 + self.n_subjects],
            log_jac=float(v[self._jac_idx].sum()),
        )

    def pack(self, ps: ParameterSet) -> np.ndarray:
        """Map a valid ParameterSet to its unconstrained vector."""
        self._check_consistent(ps)
        v = np.empty(self.dim)
        if self.include_items:
            for j, item in enumerate(ps.items):
                if self._slope_idx[j] >= 0:
                    v[self._slope_idx[j]] = np.log(item.slope)
                d = np.asarray(item.intercepts)
                for k in range(len(d)):
                    idx = self._int_idx[j, k]
                    if idx < 0:
                        continue
                    if self.spec.kind is ItemKind.GRM and k >= 1:
                        v[idx] = np.log(d[k - 1] - d[k])
                    else:
                        v[idx] = d[k]
        sp = ps.structural
        p = self.n_covariates
        s0 = self._s0
        v[s0] = sp.beta0
        v[s0 + 1: s0 + 1 + p] = sp.beta
        v[self._idx_sigma_eta] = np.log(sp.sigma_eta)
        v[self._idx_gamma0] = sp.gamma0
        v[self._idx_gamma0 + 1: self._idx_gamma0 + 1 + p] = sp.gamma
        v[self._idx_omega] = sp.omega
        v[self._idx_omega + 1] = sp.tau0
        v[self._idx_omega + 2] = sp.tau1
        v[self._idx_sigma_y] = np.log(sp.sigma_y)
        v[self._eta0:] = ps.eta
        return v

    def parameter_set(self, v: np.ndarray) -> ParameterSet:
        """Rebuild the full constrained ParameterSet from a vector."""
        up = self.unpack(v)
        if self.include_items:
            items = []
            for j in range(self.spec.n_items):
                k = self._cats[j] - 1
                slope = up.slopes[j] if self.spec.kind.has_slope else None
                items.append(ItemParams(self.spec.kind, tuple(up.intercepts[j, :k]), slope))
            items = tuple(items)
        else:
            items = self.fixed_items if self.fixed_items is not None else ()
        structural = StructuralParams(
            beta0=up.beta0, beta=tuple(up.beta), sigma_eta=up.sigma_eta,
            gamma0=up.gamma0, gamma=tuple(up.gamma), omega=up.omega,
            tau0=up.tau0, tau1=up.tau1, sigma_y=up.sigma_y,
        )
        return ParameterSet(items=items, structural=structural, eta=up.eta.copy())

    def constrain(self, v: np.ndarray) -> np.ndarray:
        """Constrained-scale value of each coordinate, aligned with names."""
        return self.constrain_draws(v[None, :])[0]

    def constrain_draws(self, draws: np.ndarray) -> np.ndarray:
        """Vectorized constrain over rows of unconstrained draws."""
        draws = np.asarray(draws, dtype=float)
        out = draws.copy()
        out[:, self._jac_idx] = np.exp(draws[:, self._jac_idx])
        if self.include_items and self.spec.kind is ItemKind.GRM:
            # rebuild actual intercepts: d_k = d_1 - sum of decrements so far
            J, kc = self.spec.n_items, self._kc
            d = np.zeros((len(draws), J, kc))
            free0 = self._free_int[:, 0]
            d[:, free0, 0] = draws[:, self._int_idx[free0, 0]]
            dec = np.zeros((len(draws), J, kc))
            dec[:, self._grm_dec_mask] = np.exp(draws[:, self._grm_dec_src])
            d[:, :, 1:] = d[:, :, :1] - np.cumsum(dec[:, :, 1:], axis=2)
            out[:, self._int_idx[self._free_int]] = d[:, self._free_int]
        return out

    def log_jacobian(self, v: np.ndarray) -> float:
        """log |d(constrained)/d(unconstrained)| at v."""
        return float(v[self._jac_idx].sum())

    def _check_consistent(self, ps: ParameterSet):
        if self.include_items:
            if len(ps.items) != self.spec.n_items:
                raise ValidationError(
                    f"{len(ps.items)} items but layout expects {self.spec.n_items}"
                )
            for j, item in enumerate(ps.items):
                if item.kind is not self.spec.kind:
                    raise ValidationError(f"item {j + 1} kind {item.kind} != {self.spec.kind}")
                if item.n_categories != self._cats[j]:
                    raise ValidationError(
                        f"item {j + 1} has {item.n_categories} categories, "
                        f"spec says {self._cats[j]}"
                    )
                if self.spec.slope_fixed(j) and abs(item.slope - 1.0) > 1e-12:
                    raise ValidationError(
                        f"identification requires a[{j + 1}] = 1, got {item.slope}"
                    )
                if self.spec.first_intercept_fixed(j) and abs(item.intercepts[0]) > 1e-12:
                    raise ValidationError(
                        f"identification requires d[{j + 1},1] = 0, got {item.intercepts[0]}"
                    )
        if ps.structural.n_covariates != self.n_covariates:
            raise ValidationError(
                f"structural parameters have {ps.structural.n_covariates} covariate "
                f"coefficients, layout expects {self.n_covariates}"
            )
        if ps.n_subjects != self.n_subjects:
            raise ValidationError(
                f"{ps.n_subjects} trait values but layout expects {self.n_subjects}"
            )


def layout_for(ps: ParameterSet, constraint: Constraint = Constraint.FIX_FIRST_ITEM,
               fix_rasch_first_intercept: bool = False) -> ParameterLayout:
    """Infer the layout (kind, category counts, sizes) from a ParameterSet."""
    if not ps.items:
        raise ValidationError("cannot infer a layout from a ParameterSet with no items")
    spec = MeasurementSpec(
        kind=ps.items[0].kind,
        cats=tuple(item.n_categories for item in ps.items),
        constraint=constraint,
        fix_rasch_first_intercept=fix_rasch_first_intercept,
    )
    return ParameterLayout(spec, ps.n_subjects, ps.structural.n_covariates)


def to_unconstrained(ps: ParameterSet,
                     constraint: Constraint = Constraint.FIX_FIRST_ITEM,
                     fix_rasch_first_intercept: bool = False) -> np.ndarray:
    return layout_for(ps, constraint, fix_rasch_first_intercept).pack(ps)


def from_unconstrained(v: np.ndarray, layout: ParameterLayout) -> ParameterSet:
    return layout.parameter_set(np.asarray(v, dtype=float))
