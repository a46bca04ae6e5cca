"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from latentstrat import ItemKind, ItemParams, ScenarioConfig, generate_dataset

KINDS = (ItemKind.RASCH, ItemKind.TWO_PL, ItemKind.GPCM, ItemKind.GRM)


def small_dataset(kind, n=20, j=4, seed=0, **overrides):
    cfg = ScenarioConfig(kind=kind, n_subjects=n, n_items=j, seed=seed, **overrides)
    return generate_dataset(cfg)


def random_item(kind, rng, n_categories=4):
    """One item with parameters drawn from comfortable ranges."""
    slope = None if kind is ItemKind.RASCH else float(rng.uniform(0.6, 1.8))
    k = 2 if kind.is_binary else n_categories
    if kind is ItemKind.GRM:
        start = rng.uniform(0.5, 1.5)
        gaps = rng.uniform(0.5, 1.0, size=k - 2)
        d = tuple(np.concatenate([[start], start - np.cumsum(gaps)]))
    else:
        d = tuple(rng.uniform(-1.5, 1.5, size=k - 1))
    return ItemParams(kind=kind, slope=slope, intercepts=d)


def random_items(kind, j, rng, n_categories=4):
    return tuple(random_item(kind, rng, n_categories) for _ in range(j))
