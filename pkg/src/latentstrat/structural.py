"""Linear-normal submodels for the latent trait and the outcome.

The trait is normal given covariates; the outcome is normal given treatment,
trait, and covariates, with the treatment effect linear in the trait:
tau(eta) = tau0 + tau1 * eta.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class StructuralParams:
    beta0: float
    beta: tuple[float, ...]
    sigma_eta: float
    gamma0: float
    gamma: tuple[float, ...]
    omega: float
    tau0: float
    tau1: float
    sigma_y: float

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        for name in ("beta0", "sigma_eta", "gamma0", "omega", "tau0", "tau1", "sigma_y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if len(self.beta) != len(self.gamma):
            raise ValidationError(
                f"beta and gamma must have the same length, got "
                f"{len(self.beta)} and {len(self.gamma)}"
            )
        scalars = [self.beta0, self.gamma0, self.omega, self.tau0, self.tau1,
                   self.sigma_eta, self.sigma_y, *self.beta, *self.gamma]
        if not all(np.isfinite(v) for v in scalars):
            raise ValidationError("structural parameters must be finite")
        if self.sigma_eta <= 0:
            raise ValidationError(f"sigma_eta must be positive, got {self.sigma_eta}")
        if self.sigma_y <= 0:
            raise ValidationError(f"sigma_y must be positive, got {self.sigma_y}")

    @property
    def n_covariates(self) -> int:
        return len(self.beta)


def _check_x(x, sp: StructuralParams) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[-1] != sp.n_covariates:
        raise ValidationError(
            f"covariate vector has length {x.shape[-1]}, expected {sp.n_covariates}"
        )
    return x


def eta_mean(x, sp: StructuralParams):
    x = _check_x(x, sp)
    return sp.beta0 + x @ np.asarray(sp.beta)


def eta_log_density(eta, x, sp: StructuralParams):
    """log Normal(eta; beta0 + beta'x, sigma_eta^2); vectorized over rows."""
    resid = np.asarray(eta, dtype=float) - eta_mean(x, sp)
    return -0.5 * LOG_2PI - np.log(sp.sigma_eta) - resid**2 / (2.0 * sp.sigma_eta**2)


def outcome_mean(z, eta, x, sp: StructuralParams):
    """gamma0 + gamma'x + omega*eta + z*(tau0 + tau1*eta)."""
    x = _check_x(x, sp)
    z = np.asarray(z, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return sp.gamma0 + x @ np.asarray(sp.gamma) + sp.omega * eta + z * (sp.tau0 + sp.tau1 * eta)


def outcome_log_density(y, z, eta, x, sp: StructuralParams):
    resid = np.asarray(y, dtype=float) - outcome_mean(z, eta, x, sp)
    return -0.5 * LOG_2PI - np.log(sp.sigma_y) - resid**2 / (2.0 * sp.sigma_y**2)


def principal_effect(eta, sp: StructuralParams):
    """Expected treatment effect at trait value eta."""
    return sp.tau0 + sp.tau1 * np.asarray(eta, dtype=float)
