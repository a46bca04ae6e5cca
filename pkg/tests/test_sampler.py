"""Sampler and diagnostics tests on targets with known posteriors."""
import numpy as np
import pytest
from scipy import stats

from helpers import small_dataset
from latentstrat import (
    ItemKind,
    Posterior,
    PosteriorDraws,
    SamplerConfig,
    SamplerError,
    ValidationError,
    fit,
    mcse_mean,
    rhat,
    summarize,
)
from latentstrat.diagnostics import ess, ess_array, rhat_array
from latentstrat.sampler import _mass_window_spans, leapfrog, run_chains


class gaussian_target:
    """Multivariate normal log-density; a class so worker processes can pickle it."""

    def __init__(self, mean, cov_inv):
        self.mean = np.asarray(mean, dtype=float)
        self.cov_inv = np.asarray(cov_inv, dtype=float)

    def __call__(self, v):
        r = v - self.mean
        g = -self.cov_inv @ r
        return -0.5 * float(r @ self.cov_inv @ r), g


STD3 = gaussian_target(np.zeros(3), np.eye(3))


def test_standard_normal_recovered():
    cfg = SamplerConfig(chains=2, iterations=4000, warmup=1000, seed=42)
    draws = run_chains(STD3, 3, cfg)
    pooled = draws.draws.reshape(-1, 3)
    assert np.all(np.abs(pooled.mean(axis=0)) < 0.06)
    assert np.all(np.abs(pooled.std(axis=0) - 1.0) < 0.06)
    for i in range(3):
        assert rhat_array(draws.draws[:, :, i]) < 1.02
    # distributional agreement at a fixed seed
    ks = stats.kstest(pooled[::7, 0], "norm")
    assert ks.pvalue > 0.01
    assert np.all(draws.accept_rate > 0.6)
    assert np.all(draws.divergences == 0)


def test_correlated_gaussian_recovered():
    cov = np.array([[1.0, 0.7], [0.7, 1.5]])
    target = gaussian_target([1.0, -2.0], np.linalg.inv(cov))
    cfg = SamplerConfig(chains=2, iterations=5000, warmup=1500, seed=7)
    draws = run_chains(target, 2, cfg)
    pooled = draws.draws.reshape(-1, 2)
    np.testing.assert_allclose(pooled.mean(axis=0), [1.0, -2.0], atol=0.1)
    np.testing.assert_allclose(np.cov(pooled.T), cov, atol=0.2)


def test_same_seed_reproduces_exactly():
    cfg = SamplerConfig(chains=2, iterations=400, warmup=200, seed=5)
    a = run_chains(STD3, 3, cfg)
    b = run_chains(STD3, 3, cfg)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.step_size, b.step_size)
    c = run_chains(STD3, 3, SamplerConfig(chains=2, iterations=400, warmup=200, seed=6))
    assert not np.array_equal(a.draws, c.draws)


def test_workers_do_not_change_draws():
    cfg = SamplerConfig(chains=4, iterations=300, warmup=150, seed=11)
    serial = run_chains(STD3, 3, cfg, workers=1)
    parallel = run_chains(STD3, 3, cfg, workers=4)
    np.testing.assert_array_equal(serial.draws, parallel.draws)


def test_leapfrog_energy_error_is_second_order():
    cov_inv = np.linalg.inv(np.array([[1.0, 0.3], [0.3, 0.8]]))
    target = gaussian_target([0.0, 0.0], cov_inv)
    rng = np.random.default_rng(3)
    v = rng.normal(size=2)
    p = rng.normal(size=2)
    inv_mass = np.ones(2)
    logp0, grad0 = target(v)
    h0 = -logp0 + 0.5 * float(p @ p)

    def energy_error(eps):
        v1, p1, logp1, _, _ = leapfrog(target, v, p, grad0, eps, 8, inv_mass)
        return abs((-logp1 + 0.5 * float(p1 @ p1)) - h0)

    ratio = energy_error(0.02) / energy_error(0.01)
    assert ratio == pytest.approx(4.0, rel=0.5)  # O(eps^2) scaling


def test_leapfrog_exact_reversibility():
    target = STD3
    rng = np.random.default_rng(9)
    v, p = rng.normal(size=3), rng.normal(size=3)
    _, g = target(v)
    inv_mass = np.ones(3)
    v1, p1, _, g1, _ = leapfrog(target, v, p, g, 0.1, 5, inv_mass)
    v2, p2, _, _, _ = leapfrog(target, v1, -p1, g1, 0.1, 5, inv_mass)
    np.testing.assert_allclose(v2, v, atol=1e-12)
    np.testing.assert_allclose(-p2, p, atol=1e-12)


def test_constrain_callback_applied():
    # target is standard normal in v; constrain maps to exp(v) > 0
    cfg = SamplerConfig(chains=2, iterations=500, warmup=250, seed=13)
    draws = run_chains(gaussian_target([0.0], np.eye(1)), 1, cfg,
                       names=["s"], constrain=lambda d: np.exp(d))
    assert np.all(draws.draws > 0)
    assert draws.names == ("s",)


def test_unsamplable_target_raises():
    def hopeless(v):
        return -np.inf, np.zeros_like(v)

    with pytest.raises(SamplerError):
        run_chains(hopeless, 2, SamplerConfig(chains=1, iterations=50, warmup=20, seed=1))


def test_mass_window_spans_partition_warmup():
    for warmup in (20, 60, 100, 150, 500, 1000, 2000):
        init, term, spans = _mass_window_spans(warmup)
        assert 0 < init <= term <= warmup
        if spans:
            assert spans[0][0] == init and spans[-1][1] == term
            for (a, b), (c, d) in zip(spans, spans[1:]):
                assert b == c and b > a
    assert _mass_window_spans(10) == (10, 10, [])


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(chains=0)
    with pytest.raises(ValidationError):
        SamplerConfig(iterations=100, warmup=100)
    with pytest.raises(ValidationError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValidationError):
        SamplerConfig(max_leapfrog=0)


def test_posterior_draws_validation():
    with pytest.raises(ValidationError):
        PosteriorDraws(draws=np.zeros((2, 5, 3)), names=("a", "b"),
                       accept_rate=np.zeros(2), divergences=np.zeros(2),
                       step_size=np.zeros(2))
    d = PosteriorDraws(draws=np.arange(24, dtype=float).reshape(2, 4, 3),
                       names=("a", "b", "c"), accept_rate=np.zeros(2),
                       divergences=np.zeros(2), step_size=np.zeros(2))
    np.testing.assert_array_equal(d.param("b"), d.draws[:, :, 1])
    assert d.pooled("c").shape == (8,)
    with pytest.raises(ValidationError):
        d.param("nope")


def test_fit_runs_end_to_end_on_small_posterior():
    data, truth = small_dataset(ItemKind.TWO_PL, n=16, j=3, seed=8)
    post = Posterior(data)
    cfg = SamplerConfig(chains=2, iterations=400, warmup=200, seed=21)
    draws = fit(post, cfg)
    assert draws.draws.shape == (2, 200, post.dim)
    assert draws.names == tuple(post.names)
    # scale parameters come back on the constrained (positive) scale
    assert np.all(draws.param("sigma_y") > 0)
    assert np.all(draws.param("sigma_eta") > 0)
    assert np.all(draws.param("a[2]") > 0)


# ---------------------------------------------------------------------------
# diagnostics


def test_rhat_identical_chains_is_one():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2000))
    chains = np.vstack([x, x])  # same draws twice: no between-chain variance
    assert rhat_array(chains) == pytest.approx(1.0, abs=0.01)


def test_rhat_detects_shifted_chain():
    rng = np.random.default_rng(3)
    a = rng.normal(size=2000)
    b = rng.normal(size=2000) + 2.0
    assert rhat_array(np.vstack([a, b])) > 1.5


def test_rhat_zero_variance_is_nan():
    assert np.isnan(rhat_array(np.ones((2, 100))))


def test_rhat_input_validation():
    with pytest.raises(ValidationError):
        rhat_array(np.zeros((1, 100)))  # needs at least two chains
    with pytest.raises(ValidationError):
        rhat_array(np.zeros((2, 3)))  # too short to split


def test_ess_iid_close_to_sample_size():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2500))
    n = ess_array(x)
    assert 0.75 * 10000 < n < 1.3 * 10000


def test_ess_ar1_matches_theory():
    # AR(1) with coefficient 0.9: ESS/N = (1-rho)/(1+rho) ~ 0.0526
    rng = np.random.default_rng(7)
    rho, n = 0.9, 20000
    chains = []
    for _ in range(2):
        e = rng.normal(size=n)
        x = np.empty(n)
        x[0] = e[0]
        for t in range(1, n):
            x[t] = rho * x[t - 1] + np.sqrt(1 - rho**2) * e[t]
        chains.append(x)
    got = ess_array(np.vstack(chains))
    want = 2 * n * (1 - rho) / (1 + rho)
    assert want / 2 < got < want * 2


def test_summarize_known_values():
    draws = PosteriorDraws(
        draws=np.array([[[1.0], [2.0]], [[3.0], [4.0]]]),
        names=("m",), accept_rate=np.zeros(2),
        divergences=np.zeros(2), step_size=np.zeros(2),
    )
    s = summarize(draws)["m"]
    assert s.mean == pytest.approx(2.5)
    assert s.sd == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    assert np.isnan(s.rhat)  # 2 draws per chain is too short to split


def test_summarize_quantiles_match_normal():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 5000, 1))
    draws = PosteriorDraws(draws=x, names=("v",), accept_rate=np.zeros(2),
                           divergences=np.zeros(2), step_size=np.zeros(2))
    s = summarize(draws)["v"]
    assert s.q2_5 == pytest.approx(-1.9600, abs=0.08)
    assert s.q97_5 == pytest.approx(1.9600, abs=0.08)
    assert s.rhat < 1.01
    assert s.mcse == pytest.approx(s.sd / np.sqrt(s.ess), rel=1e-12)


def test_single_chain_summary_has_nan_diagnostics():
    x = np.random.default_rng(13).normal(size=(1, 500, 1))
    draws = PosteriorDraws(draws=x, names=("v",), accept_rate=np.zeros(1),
                           divergences=np.zeros(1), step_size=np.zeros(1))
    s = summarize(draws)["v"]
    assert np.isnan(s.rhat) and np.isnan(s.ess) and np.isnan(s.mcse)
    assert np.isfinite(s.mean)


def test_named_diagnostics_wrappers():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(2, 1000, 2))
    draws = PosteriorDraws(draws=x, names=("u", "w"), accept_rate=np.zeros(2),
                           divergences=np.zeros(2), step_size=np.zeros(2))
    assert rhat(draws, "u") == pytest.approx(rhat_array(x[:, :, 0]), rel=1e-12)
    assert ess(draws, "w") == pytest.approx(ess_array(x[:, :, 1]), rel=1e-12)
    assert mcse_mean(draws, "u") > 0
