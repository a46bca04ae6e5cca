"""Unconstrained-vector transform tests: round trips, Jacobians, layouts."""
import numpy as np
import pytest

from helpers import KINDS, random_items
from latentstrat import (
    Constraint,
    ItemKind,
    ItemParams,
    ParameterLayout,
    ParameterSet,
    StructuralParams,
    ValidationError,
    from_unconstrained,
    to_unconstrained,
)
from latentstrat.dataset import MeasurementSpec
from latentstrat.transforms import N_STRUCTURAL_SCALARS, layout_for


def random_parameter_set(kind, rng, n=6, j=3, p=2):
    items = random_items(kind, j, rng)
    if kind.has_slope:
        # FixFirstItem pins a[1] = 1 and d[1,1] = 0
        first = items[0]
        d = np.array(first.intercepts)
        d = tuple(d - d[0])
        items = (ItemParams(kind, d, slope=1.0),) + items[1:]
    sp = StructuralParams(
        beta0=float(rng.normal()),
        beta=rng.normal(size=p),
        sigma_eta=float(rng.uniform(0.3, 2.0)),
        gamma0=float(rng.normal()),
        gamma=rng.normal(size=p),
        omega=float(rng.normal()),
        tau0=float(rng.normal()),
        tau1=float(rng.normal()),
        sigma_y=float(rng.uniform(0.3, 2.0)),
    )
    return ParameterSet(items=items, structural=sp, eta=rng.normal(size=n))


def assert_sets_close(a: ParameterSet, b: ParameterSet, tol=1e-12):
    assert len(a.items) == len(b.items)
    for ia, ib in zip(a.items, b.items):
        assert ia.kind is ib.kind
        if ia.slope is None:
            assert ib.slope is None
        else:
            assert ib.slope == pytest.approx(ia.slope, rel=tol, abs=tol)
        assert np.allclose(ib.intercepts, ia.intercepts, rtol=tol, atol=tol)
    for f in ("beta0", "sigma_eta", "gamma0", "omega", "tau0", "tau1", "sigma_y"):
        assert getattr(b.structural, f) == pytest.approx(
            getattr(a.structural, f), rel=tol, abs=tol
        )
    assert np.allclose(b.structural.beta, a.structural.beta, rtol=tol, atol=tol)
    assert np.allclose(b.structural.gamma, a.structural.gamma, rtol=tol, atol=tol)
    assert np.allclose(b.eta, a.eta, rtol=tol, atol=tol)


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_250_random_sets(kind):
    rng = np.random.default_rng(101)
    for _ in range(250):
        ps = random_parameter_set(kind, rng)
        layout = layout_for(ps)
        v = to_unconstrained(ps)
        back = from_unconstrained(v, layout)
        assert_sets_close(ps, back)
        # and the vector itself round-trips through pack
        assert np.allclose(layout.pack(back), v, rtol=1e-12, atol=1e-12)


def test_unit_slope_maps_to_zero():
    rng = np.random.default_rng(7)
    ps = random_parameter_set(ItemKind.TWO_PL, rng)
    items = list(ps.items)
    items[1] = ItemParams(ItemKind.TWO_PL, items[1].intercepts, slope=1.0)
    ps = ParameterSet(items=tuple(items), structural=ps.structural, eta=ps.eta)
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    assert v[layout.names.index("a[2]")] == pytest.approx(0.0, abs=1e-15)


def test_grm_intercepts_log_decrement_coordinates():
    # (1, -1): first coordinate stays 1, the gap of 2 becomes log 2
    items = (
        ItemParams(ItemKind.GRM, (0.0, -0.5), slope=1.0),  # d[1,1] fixed at 0
        ItemParams(ItemKind.GRM, (1.0, -1.0), slope=1.3),
    )
    sp = StructuralParams(0.0, np.zeros(1), 1.0, 0.0, np.zeros(1), 0.0, 0.0, 0.0, 1.0)
    ps = ParameterSet(items=items, structural=sp, eta=np.zeros(2))
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    assert v[layout.names.index("d[2,1]")] == pytest.approx(1.0, abs=1e-15)
    assert v[layout.names.index("d[2,2]")] == pytest.approx(np.log(2.0), abs=1e-15)
    # second intercept of item 1 sits 0.5 below its fixed first intercept
    assert v[layout.names.index("d[1,2]")] == pytest.approx(np.log(0.5), abs=1e-14)


def test_scales_map_through_log():
    rng = np.random.default_rng(13)
    ps = random_parameter_set(ItemKind.RASCH, rng)
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    assert v[layout.names.index("sigma_eta")] == pytest.approx(
        np.log(ps.structural.sigma_eta), rel=1e-14
    )
    assert v[layout.names.index("sigma_y")] == pytest.approx(
        np.log(ps.structural.sigma_y), rel=1e-14
    )
    # location coordinates pass through untouched
    assert v[layout.names.index("tau0")] == ps.structural.tau0
    assert v[layout.names.index("eta[3]")] == ps.eta[2]


def expected_dim(kind, j, cats, n, p):
    n_int = sum(k - 1 for k in cats)
    if kind.has_slope:
        item_coords = (j - 1) + (n_int - 1)  # a[1] = 1 and d[1,1] = 0 pinned
    else:
        item_coords = n_int
    return item_coords + 2 * p + N_STRUCTURAL_SCALARS + n


@pytest.mark.parametrize("kind,cats", [
    (ItemKind.RASCH, (2, 2, 2, 2)),
    (ItemKind.TWO_PL, (2, 2, 2, 2)),
    (ItemKind.GPCM, (4, 4, 3, 4)),
    (ItemKind.GRM, (4, 4, 4, 4)),
])
def test_dimension_formula(kind, cats):
    spec = MeasurementSpec(kind=kind, cats=cats)
    layout = ParameterLayout(spec, n_subjects=9, n_covariates=2)
    assert layout.dim == expected_dim(kind, len(cats), cats, 9, 2)
    assert len(layout.names) == layout.dim
    for nm in ("beta0", "sigma_eta", "tau0", "tau1", "eta[9]"):
        assert nm in layout.names


def test_fixed_item_coordinates_absent():
    spec = MeasurementSpec(kind=ItemKind.TWO_PL, cats=(2, 2, 2))
    layout = ParameterLayout(spec, n_subjects=4, n_covariates=1)
    assert "a[1]" not in layout.names and "d[1,1]" not in layout.names
    assert "a[2]" in layout.names and "d[2,1]" in layout.names


def test_rasch_free_constraint_switch():
    fixed = MeasurementSpec(kind=ItemKind.RASCH, cats=(2, 2),
                            fix_rasch_first_intercept=True)
    free = MeasurementSpec(kind=ItemKind.RASCH, cats=(2, 2))
    assert "d[1,1]" not in ParameterLayout(fixed, 3, 1).names
    assert "d[1,1]" in ParameterLayout(free, 3, 1).names


def test_items_excluded_layout():
    rng = np.random.default_rng(19)
    items = random_items(ItemKind.GRM, 3, rng)
    spec = MeasurementSpec(kind=ItemKind.GRM, cats=tuple(i.n_categories for i in items))
    layout = ParameterLayout(spec, n_subjects=5, n_covariates=2,
                             include_items=False, fixed_items=items)
    assert layout.dim == 2 * 2 + N_STRUCTURAL_SCALARS + 5
    assert layout.names[0] == "beta0"
    v = np.concatenate([np.array([0.1, 0.2, -0.3, 0.0, 0.4, 0.5, -0.1, 0.6, 0.7,
                                  -0.2, 0.3]),
                        np.linspace(-1, 1, 5)])
    ps = layout.parameter_set(v)
    assert ps.items == items  # reconstructed from the fixed tuple


def test_log_jacobian_sums_transformed_coordinates():
    rng = np.random.default_rng(23)
    ps = random_parameter_set(ItemKind.GRM, rng)
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    # one log coordinate per free slope, per GRM decrement, per scale
    want = sum(
        v[i] for i, nm in enumerate(layout.names)
        if nm.startswith("a[")
        or nm in ("sigma_eta", "sigma_y")
        or (nm.startswith("d[") and not nm.endswith(",1]"))
    )
    assert layout.log_jacobian(v) == pytest.approx(want, rel=1e-12)


def test_log_jacobian_matches_volume_change():
    # |d constrained / d unconstrained| via finite differences on one GRM item
    rng = np.random.default_rng(29)
    ps = random_parameter_set(ItemKind.GRM, rng, n=2, j=2, p=1)
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    h = 1e-6
    fd_log_det = 0.0
    for i in range(layout.dim):
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        deriv = (layout.constrain(up)[i] - layout.constrain(dn)[i]) / (2 * h)
        fd_log_det += np.log(abs(deriv))
    assert layout.log_jacobian(v) == pytest.approx(fd_log_det, abs=1e-6)


def test_constrain_draws_matches_single_constrain():
    rng = np.random.default_rng(31)
    ps = random_parameter_set(ItemKind.GPCM, rng)
    layout = layout_for(ps)
    draws = rng.normal(size=(8, layout.dim)) * 0.5
    batch = layout.constrain_draws(draws)
    for t in range(8):
        assert np.allclose(batch[t], layout.constrain(draws[t]), rtol=1e-14)


def test_constrain_is_identity_on_location_coordinates():
    rng = np.random.default_rng(37)
    ps = random_parameter_set(ItemKind.RASCH, rng)
    layout = layout_for(ps)
    v = to_unconstrained(ps)
    c = layout.constrain(v)
    for nm in ("beta0", "gamma0", "omega", "tau0", "tau1", "d[2,1]", "eta[1]"):
        i = layout.names.index(nm)
        assert c[i] == v[i]
    assert c[layout.names.index("sigma_eta")] == pytest.approx(
        np.exp(v[layout.names.index("sigma_eta")])
    )


def test_wrong_length_vector_rejected():
    spec = MeasurementSpec(kind=ItemKind.RASCH, cats=(2, 2))
    layout = ParameterLayout(spec, n_subjects=3, n_covariates=1)
    with pytest.raises(ValidationError):
        layout.unpack(np.zeros(layout.dim + 1))


def test_pack_rejects_mismatched_set():
    rng = np.random.default_rng(41)
    ps = random_parameter_set(ItemKind.RASCH, rng, n=6)
    other = random_parameter_set(ItemKind.RASCH, rng, n=7)
    layout = layout_for(ps)
    with pytest.raises(ValidationError):
        layout.pack(other)


def test_mixed_constraint_requires_matching_fixed_values():
    # a[1] must be exactly 1 when the layout pins it
    rng = np.random.default_rng(43)
    ps = random_parameter_set(ItemKind.TWO_PL, rng)
    bad_items = (ItemParams(ItemKind.TWO_PL, ps.items[0].intercepts, slope=1.4),
                 *ps.items[1:])
    bad = ParameterSet(items=bad_items, structural=ps.structural, eta=ps.eta)
    layout = layout_for(ps)
    with pytest.raises(ValidationError):
        layout.pack(bad)
