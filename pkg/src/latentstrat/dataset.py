"""Trial data container and measurement-instrument description."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .measurement import ItemKind, ResponseMatrix


class Constraint(enum.Enum):
    """Identification scheme for the latent scale."""

    FIX_FIRST_ITEM = "fix_first_item"
    NONE = "none"


@dataclass(frozen=True)
class MeasurementSpec:
    """Instrument shape: model kind, per-item category counts, identification.

    Under FIX_FIRST_ITEM, item 1's slope is fixed at 1 and its first intercept
    at 0 for the sloped kinds. Rasch has no slope, and its intercept is left
    free by default (the trait location is identified through the covariate
    model); fix_rasch_first_intercept opts into fixing it anyway.
    """

    kind: ItemKind
    cats: tuple[int, ...]
    constraint: Constraint = Constraint.FIX_FIRST_ITEM
    fix_rasch_first_intercept: bool = False

    def __post_init__(self):
        if not isinstance(self.kind, ItemKind):
            raise ValidationError(f"kind must be an ItemKind, got {self.kind!r}")
        if not isinstance(self.constraint, Constraint):
            raise ValidationError(f"constraint must be a Constraint, got {self.constraint!r}")
        object.__setattr__(self, "cats", tuple(int(k) for k in self.cats))
        if len(self.cats) < 1:
            raise ValidationError("at least one item is required")
        if any(k < 2 for k in self.cats):
            raise ValidationError("every item needs at least 2 categories")
        if self.kind.is_binary and any(k != 2 for k in self.cats):
            raise ValidationError(f"{self.kind.value} items must have exactly 2 categories")

    @classmethod
    def uniform(cls, kind: ItemKind, n_items: int, n_categories: int = 2,
                constraint: Constraint = Constraint.FIX_FIRST_ITEM,
                fix_rasch_first_intercept: bool = False) -> "MeasurementSpec":
        if kind.is_binary:
            n_categories = 2
        return cls(kind, (n_categories,) * n_items, constraint, fix_rasch_first_intercept)

    @property
    def n_items(self) -> int:
        return len(self.cats)

    def slope_fixed(self, j: int) -> bool:
        """Is item j's (0-based) slope pinned by the identification scheme?"""
        if not self.kind.has_slope:
            return False
        return self.constraint is Constraint.FIX_FIRST_ITEM and j == 0

    def first_intercept_fixed(self, j: int) -> bool:
        if self.constraint is not Constraint.FIX_FIRST_ITEM or j != 0:
            return False
        if self.kind is ItemKind.RASCH:
            return self.fix_rasch_first_intercept
        return True


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """One randomized trial: treatment flags, outcomes, covariates, responses.

    Response rows exist exactly for treated subjects, ordered by subject index.
    """

    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    responses: ResponseMatrix
    spec: MeasurementSpec

    def __post_init__(self):
        z = np.asarray(self.z)
        if not np.issubdtype(z.dtype, np.integer):
            if not np.all(np.isin(z, (0, 1))):
                raise ValidationError("treatment indicator must be 0/1")
        z = z.astype(np.int8)
        if z.ndim != 1 or not np.all((z == 0) | (z == 1)):
            raise ValidationError("treatment indicator must be a 1-d 0/1 vector")
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValidationError(f"covariates must be an N x p matrix, got shape {x.shape}")
        n = len(z)
        if y.shape != (n,) or x.shape[0] != n:
            raise ValidationError(
                f"inconsistent sizes: z has {n} subjects, y {y.shape}, x {x.shape}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValidationError("outcomes and covariates must be finite (no missing values)")
        if self.responses.n_subjects != int(z.sum()):
            raise ValidationError(
                f"{self.responses.n_subjects} response rows but {int(z.sum())} treated subjects"
            )
        if self.responses.n_items != self.spec.n_items:
            raise ValidationError(
                f"{self.responses.n_items} response columns but spec declares "
                f"{self.spec.n_items} items"
            )
        m = self.responses.data
        for j, k in enumerate(self.spec.cats):
            if m.shape[0] and m[:, j].max() >= k:
                raise ValidationError(
                    f"item {j + 1} has category {m[:, j].max()} outside its "
                    f"declared range 0..{k - 1}"
                )
        for name, arr in (("z", z), ("y", y), ("x", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_subjects(self) -> int:
        return len(self.z)

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.z == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.z == 0)

    def __eq__(self, other):
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.z.shape == other.z.shape
            and bool(np.all(self.z == other.z))
            and self.y.shape == other.y.shape
            and bool(np.all(self.y == other.y))
            and self.x.shape == other.x.shape
            and bool(np.all(self.x == other.x))
            and self.responses == other.responses
        )
