import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from absorb.data import StudyRecord, partition
from absorb.diagnostics import DegenerateChainWarning, effective_sample_size, split_rhat
from absorb.likelihood import PARAM_NAMES, PriorSpec
from absorb.sampler import (Model, PosteriorDraws, SamplerConfig, run_mcmc,
                            sample_truncated_normal)
from absorb.simulation import design, generate_dataset

from conftest import make_dataset


def rng(seed=0):
    return np.random.default_rng(seed)


# --- truncated normal --------------------------------------------------------

def test_truncnorm_untruncated_mean():
    x = sample_truncated_normal(1.5, 2.0, -np.inf, np.inf, rng(1), size=100_000)
    assert abs(x.mean() - 1.5) < 4 * 2.0 / math.sqrt(1e5)


def test_truncnorm_half_normal_moments():
    x = sample_truncated_normal(0.0, 1.0, 0.0, np.inf, rng(2), size=100_000)
    assert abs(x.mean() - math.sqrt(2 / math.pi)) < 0.01
    assert abs(x.var() - (1 - 2 / math.pi)) < 0.01


def test_truncnorm_negligible_truncation():
    x = sample_truncated_normal(5.0, 1.0, 0.0, np.inf, rng(3), size=100_000)
    assert abs(x.mean() - 5.0) < 0.01


@pytest.mark.parametrize("mean, lo, hi", [(0.0, 8.0, np.inf), (0.0, -np.inf, -40.0),
                                          (0.0, 39.0, 39.5), (100.0, -1.0, 0.0)])
def test_truncnorm_far_tails(mean, lo, hi):
    x = sample_truncated_normal(mean, 1.0, lo, hi, rng(4), size=20_000)
    assert np.all((x >= lo) & (x <= hi))
    ref = stats.truncnorm((lo - mean), (hi - mean), loc=mean)
    assert abs(x.mean() - ref.mean()) < 5 * ref.std() / math.sqrt(x.size) + 1e-9


def test_truncnorm_errors():
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 1.0, 1.0, 1.0, rng())
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 0.0, 0.0, 1.0, rng())


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(0.05, 5), st.floats(-12, 12), st.floats(0.01, 6))
def test_truncnorm_matches_scipy_distribution(mean, sd, lo, width):
    hi = lo + width
    x = sample_truncated_normal(mean, sd, lo, hi, rng(5), size=4000)
    assert np.all((x >= lo) & (x <= hi))
    ref = stats.truncnorm((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd)
    assert stats.kstest(x, ref.cdf).pvalue > 1e-4


# --- diagnostics ---------------------------------------------------------------

def ar1(phi, n, seed):
    r = rng(seed)
    e = r.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_ess_oracles():
    assert 8000 <= effective_sample_size(rng(6).standard_normal(10_000)) <= 12_000
    n = 30_000
    assert effective_sample_size(ar1(0.5, n, 7)) == pytest.approx(n / 3, rel=0.15)
    with pytest.warns(DegenerateChainWarning):
        assert effective_sample_size(np.ones(50)) == 50
    with pytest.raises(ValueError):
        effective_sample_size(np.arange(5.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 500), st.integers(0, 10 ** 6))
def test_ess_within_bounds(n, seed):
    x = rng(seed).standard_normal(n).cumsum()
    ess = effective_sample_size(x)
    assert 0 < ess <= n


def test_split_rhat_examples():
    r = rng(8)
    v = split_rhat([r.standard_normal(5000), r.standard_normal(5000)])
    assert 0.99 <= v <= 1.02
    assert split_rhat([r.standard_normal(500), 10 + r.standard_normal(500)]) > 2
    c = r.standard_normal(1000)
    assert 0.99 <= split_rhat([c, c.copy()]) <= 1.01
    with pytest.raises(ValueError):
        split_rhat([np.zeros(20), np.zeros(21)])
    with pytest.raises(ValueError):
        split_rhat([np.zeros(20)])


# --- configuration -------------------------------------------------------------

def test_config_validation():
    SamplerConfig()
    for bad in (dict(burn_in=100, n_iter=100), dict(n_iter=150, burn_in=100),
                dict(thin=0), dict(target_accept=1.0), dict(n_chains=0), dict(seed=-1)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    assert SamplerConfig(n_iter=1000, burn_in=0, thin=3).retained_per_chain == 334


# --- sampler behaviour -------------------------------------------------------

FAST = SamplerConfig(n_chains=2, n_iter=3000, burn_in=1000, max_iter_doublings=0, seed=11)


@pytest.fixture(scope="module")
def sim_data():
    return generate_dataset(design(1, 30), 4).observed


def test_determinism_and_chain_streams(sim_data):
    a, _ = run_mcmc(Model.ABSORB, sim_data, config=FAST)
    b, _ = run_mcmc(Model.ABSORB, sim_data, config=FAST)
    for ca, cb in zip(a.chains, b.chains):
        assert np.array_equal(ca.draws, cb.draws)
    assert not np.array_equal(a.chains[0].draws, a.chains[1].draws)
    assert a.to_csv() == b.to_csv()
    assert a.n_draws == FAST.n_chains * FAST.retained_per_chain


def test_draws_respect_support(sim_data):
    draws, report = run_mcmc(Model.ABSORB, sim_data, config=FAST, debug=True)
    bounds = PriorSpec().resolve(sim_data)
    for c in draws.chains:
        d = c.draws
        get = lambda k: d[:, PARAM_NAMES.index(k)]
        assert np.all(get("tau1") > 0) and np.all(get("tau2") > 0)
        for k in ("rho1", "rho2", "rhoW", "rhoB"):
            assert np.all(np.abs(get(k)) < 1)
        assert np.all(np.abs(get("gamma01")) < 2) and np.all(np.abs(get("gamma02")) < 2)
        assert np.all((get("gamma11") > 0) & (get("gamma11") < bounds.gamma1_upper[0]))
        assert np.all(get("rhoW") ** 2 < (1 - get("rho1") ** 2) * (1 - get("rho2") ** 2))
        assert all(0 < v < 1 for v in c.accept_rates.values())
    assert set(report.ess) == set(PARAM_NAMES)
    assert all(0 < v <= draws.n_draws for v in report.ess.values())


def test_csv_roundtrip_nbc_columns(sim_data):
    draws, _ = run_mcmc(Model.NBC, sim_data, config=FAST)
    text = draws.to_csv()
    assert text.splitlines()[0] == "chain,iter,mu1,mu2,tau1,tau2,rhoW,rhoB"
    back = PosteriorDraws.from_csv(text, "NBC", draws.dataset_fingerprint, draws.config)
    assert np.array_equal(back.combined("mu1"), draws.combined("mu1"))
    assert back.to_csv() == text


def test_conjugate_updates_single_study():
    """theta and mu Gibbs steps with fixed hyperparameters reproduce the Gaussian posterior of mu."""
    s1, s2, rw = 0.5, 0.4, 0.3
    y = np.array([0.8, -0.2])
    ds = make_dataset([(10, y[0], s1, y[1], s2)])
    init = dict(tau1=0.6, tau2=0.7, rhoB=0.4, rhoW=rw)
    cfg = SamplerConfig(n_chains=1, n_iter=51_000, burn_in=1000, max_iter_doublings=0, seed=3)
    draws, _ = run_mcmc(Model.NBC, ds, config=cfg, frozen=tuple(init), initial=init)
    # y | mu ~ N(mu, S + T) after integrating theta out; mu ~ N(0, 100^2 I)
    S = np.array([[s1 ** 2, rw * s1 * s2], [rw * s1 * s2, s2 ** 2]])
    T = np.array([[0.36, 0.4 * 0.42], [0.4 * 0.42, 0.49]])
    W = np.linalg.inv(S + T)
    V = np.linalg.inv(W + np.eye(2) / 100 ** 2)
    m = V @ W @ y
    got = np.column_stack([draws.combined("mu1"), draws.combined("mu2")])
    sd = np.sqrt(np.diag(V))
    assert np.all(np.abs(got.mean(axis=0) - m) < 0.02 * sd + 4 * sd / np.sqrt(5000))
    assert np.var(got, axis=0) == pytest.approx(np.diag(V), rel=0.02)


def test_frozen_parameters_stay_fixed(sim_data):
    draws, _ = run_mcmc(Model.ABSORB, sim_data, config=FAST, frozen=("rho1", "rho2"))
    assert np.all(draws.combined("rho1") == 0) and np.all(draws.combined("rho2") == 0)
    with pytest.raises(ValueError):
        run_mcmc(Model.ABSORB, sim_data, config=FAST, frozen=("nope",))


def test_ism_k0_is_identical_to_absorb(sim_data):
    from dataclasses import replace
    ds = replace(sim_data, k_missing=0)
    a, _ = run_mcmc(Model.ABSORB, ds, config=FAST)
    b, _ = run_mcmc(Model.ABSORB_ISM, ds, config=FAST)
    assert np.array_equal(a.combined("mu1"), b.combined("mu1"))


def test_ism_samples_missing_ses_within_bounds(sim_data):
    from dataclasses import replace
    from absorb.likelihood import observed_se_bounds
    ds = replace(sim_data, k_missing=3)
    draws, _ = run_mcmc(Model.ABSORB_ISM, ds, config=FAST)
    b = observed_se_bounds(ds)
    st_draws = draws.chains[0].s_tilde
    assert st_draws.shape == (FAST.retained_per_chain, 6)
    assert np.all(st_draws[:, 0::2] >= b[0, 0]) and np.all(st_draws[:, 0::2] <= b[0, 1])
    assert np.all(st_draws[:, 1::2] >= b[1, 0]) and np.all(st_draws[:, 1::2] <= b[1, 1])


def test_doubling_when_unconverged(sim_data):
    cfg = SamplerConfig(n_chains=2, n_iter=300, burn_in=100, max_iter_doublings=1,
                        ess_floor=10 ** 6, seed=1)
    draws, report = run_mcmc(Model.NBC, sim_data, config=cfg)
    assert report.iterations_used == 600 and not report.converged
    assert draws.chains[0].draws.shape[0] == 500


def test_nbc_calibration_complete_data():
    """Posterior means within 3 posterior SDs of the truth in nearly all replicates."""
    truth = design(1, 50)
    hits = 0
    reps = 40
    for r in range(reps):
        r_ = rng(100 + r)
        rows = []
        for i in range(50):
            s = r_.uniform(0.2, 0.8, 2)
            th = r_.normal([0.3, -0.3], 0.5)
            rows.append((50, *(th[0] + s[0] * r_.standard_normal(), s[0]),
                         *(th[1] + s[1] * r_.standard_normal(), s[1])))
        ds = make_dataset(rows)
        draws, _ = run_mcmc(Model.NBC, ds, config=SamplerConfig(
            n_chains=1, n_iter=2000, burn_in=500, max_iter_doublings=0, seed=r))
        ok = all(abs(draws.mean(k) - v) < 3 * draws.combined(k).std()
                 for k, v in (("mu1", truth.mu1), ("mu2", truth.mu2)))
        hits += ok
    assert hits >= reps - 2
