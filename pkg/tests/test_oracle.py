"""Quadrature oracle tests.

The per-subject marginal likelihood has a Gaussian closed form when every
response is missing, and scipy.integrate.quad gives an independent value when
responses are observed. Both pin the quadrature to its advertised accuracy.
"""
import numpy as np
import pytest
from scipy import integrate, stats

from helpers import small_dataset
from latentstrat import (
    ItemKind,
    MISSING,
    NormalPrior,
    OracleInfeasibleError,
    PriorConfig,
    QuadratureGrid,
    ResponseMatrix,
    TrialDataset,
    ValidationError,
    marginal_log_lik,
    oracle_posterior_summary,
)
from latentstrat.dataset import MeasurementSpec
from latentstrat.measurement import ItemParams, response_log_lik
from latentstrat.structural import StructuralParams, eta_log_density, outcome_log_density

SP = StructuralParams(
    beta0=0.2, beta=(0.5, -0.4), sigma_eta=0.9,
    gamma0=0.7, gamma=(0.3, 0.2), omega=0.6,
    tau0=0.25, tau1=-0.15, sigma_y=1.1,
)

ITEMS = (
    ItemParams(ItemKind.RASCH, (0.3,)),
    ItemParams(ItemKind.RASCH, (-0.6,)),
)


def tiny_dataset(n=6, seed=4, all_missing=False):
    rng = np.random.default_rng(seed)
    z = np.array([1, 1, 1, 0, 0, 0][:n])
    x = rng.normal(size=(n, 2))
    y = rng.normal(size=n)
    resp = rng.integers(0, 2, size=(int(z.sum()), 2))
    if all_missing:
        resp = np.full_like(resp, MISSING)
    spec = MeasurementSpec(kind=ItemKind.RASCH, cats=(2, 2))
    return TrialDataset(z=z, y=y, x=x, responses=ResponseMatrix(resp), spec=spec)


def test_all_missing_matches_gaussian_closed_form():
    data = tiny_dataset(all_missing=True)
    got = marginal_log_lik(data, ITEMS, SP)
    mu_eta = SP.beta0 + data.x @ np.asarray(SP.beta)
    w = SP.omega + data.z * SP.tau1
    mean = SP.gamma0 + data.x @ np.asarray(SP.gamma) + w * mu_eta + data.z * SP.tau0
    sd = np.sqrt(w**2 * SP.sigma_eta**2 + SP.sigma_y**2)
    want = stats.norm.logpdf(data.y, mean, sd)
    np.testing.assert_allclose(got, want, rtol=1e-13)


@pytest.mark.parametrize("rule", ["gauss_hermite", "trapezoid"])
def test_matches_adaptive_quadrature_with_responses(rule):
    data = tiny_dataset()
    # gauss_hermite caps at 185 nodes; its spectral accuracy needs far fewer
    grid = QuadratureGrid(rule=rule, n_nodes=151 if rule == "gauss_hermite" else 201)
    got = marginal_log_lik(data, ITEMS, SP, grid)

    def integrand(eta, i):
        val = eta_log_density(eta, data.x[i], SP)
        val += outcome_log_density(data.y[i], data.z[i], eta, data.x[i], SP)
        if data.z[i] == 1:
            row = np.flatnonzero(data.treated_idx == i)[0]
            for j, item in enumerate(ITEMS):
                m = data.responses.data[row, j]
                if m != MISSING:
                    val += response_log_lik(int(m), eta, item)
        return np.exp(val)

    for i in range(data.n_subjects):
        want, err = integrate.quad(integrand, -12, 12, args=(i,), limit=200)
        assert got[i] == pytest.approx(np.log(want), abs=max(1e-9, 2 * err / want))


def test_gauss_hermite_and_trapezoid_agree():
    data = tiny_dataset(seed=9)
    gh = marginal_log_lik(data, ITEMS, SP, QuadratureGrid(rule="gauss_hermite"))
    tz = marginal_log_lik(data, ITEMS, SP, QuadratureGrid(rule="trapezoid", n_nodes=401))
    np.testing.assert_allclose(gh, tz, atol=1e-10)


def test_node_doubling_is_converged():
    data = tiny_dataset(seed=13)
    grid = QuadratureGrid()
    base = marginal_log_lik(data, ITEMS, SP, grid)
    fine = marginal_log_lik(data, ITEMS, SP, grid, n_nodes=2 * grid.n_nodes)
    assert np.max(np.abs(base - fine)) < 1e-9


def test_grid_validation():
    with pytest.raises(ValidationError):
        QuadratureGrid(n_nodes=31)  # too coarse to trust
    with pytest.raises(ValidationError):
        QuadratureGrid(rule="simpson")
    with pytest.raises(ValidationError):
        QuadratureGrid(n_draws=10)
    # numpy's hermgauss weights overflow near 380 nodes; doubling for the
    # refinement check means 185 is the safe ceiling
    with pytest.raises(ValidationError, match="trapezoid"):
        QuadratureGrid(n_nodes=200)
    QuadratureGrid(n_nodes=200, rule="trapezoid")  # fine there


def test_refuses_large_instances():
    data, truth = small_dataset(ItemKind.RASCH, n=60, j=4, seed=1)
    with pytest.raises(OracleInfeasibleError):
        oracle_posterior_summary(data, items=truth.params.items)
    data, truth = small_dataset(ItemKind.RASCH, n=20, j=8, seed=1)
    with pytest.raises(OracleInfeasibleError):
        oracle_posterior_summary(data, items=truth.params.items)


@pytest.mark.slow
def test_posterior_summary_reasonable_on_tiny_instance():
    data, truth = small_dataset(ItemKind.RASCH, n=20, j=4, seed=2)
    cfg = PriorConfig(structural=NormalPrior(0.0, 5.0))
    grid = QuadratureGrid(n_draws=30_000, n_burn=8_000)
    s = oracle_posterior_summary(data, cfg, grid, items=truth.params.items)
    assert len(s.names) == 2 * 2 + 7
    assert set(s.names) >= {"tau0", "tau1", "omega", "sigma_eta", "sigma_y"}
    assert np.all(np.isfinite(s.mean))
    assert np.all(s.sd > 0)
    assert np.all(s.mcse_mean > 0)
    assert np.all(s.q2_5 < s.q97_5)
    assert 0.1 < s.acceptance_rate < 0.6
    assert s.integration_error < 1e-8
    # scale posteriors respect positivity
    assert s.mean_of("sigma_eta") > 0 and s.mean_of("sigma_y") > 0
    # interval orientation sanity for one named parameter
    i = s.names.index("tau0")
    assert s.q2_5[i] < s.mean_of("tau0") < s.q97_5[i]


def test_summary_lookup_rejects_unknown_name():
    data, truth = small_dataset(ItemKind.RASCH, n=10, j=2, seed=3)
    grid = QuadratureGrid(n_draws=1000, n_burn=200)
    s = oracle_posterior_summary(data, grid=grid, items=truth.params.items)
    with pytest.raises(ValidationError):
        s.mean_of("eta[1]")  # traits are integrated out, not summarized
