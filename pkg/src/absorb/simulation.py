"""Synthetic data from the selection mechanism and the bias/coverage experiment harness."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from absorb.data import BivariateDataset, DataError, StudyRecord, partition
from absorb.likelihood import PARAM_NAMES
from absorb.sampler import Model, SamplerConfig, run_mcmc

log = logging.getLogger(__name__)

COMPLETE_CASE_NBC = "COMPLETE_CASE_NBC"
MODEL_CHOICES = ("ABSORB", "NBC", COMPLETE_CASE_NBC)


@dataclass(frozen=True)
class SimTruth:
    mu1: float = 0.3
    mu2: float = -0.3
    tau1: float = 0.5
    tau2: float = 0.5
    gamma01: float = -1.0
    gamma11: float = 0.6
    gamma02: float = -1.0
    gamma12: float = 0.6
    rho1: float = 0.4
    rho2: float = 0.4
    rhoW: float = 0.5
    rhoB: float = 0.5
    n_studies: int = 50
    se_range: tuple = (0.2, 0.8)
    size_range: tuple = (20, 100)
    target_missing_1: float = 0.2
    target_missing_2: float = 0.2

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("tau must be positive")
        if self.n_studies < 1:
            raise ValueError("n_studies must be positive")
        lo, hi = self.se_range
        if not 0 < lo < hi:
            raise ValueError("se_range must be a positive interval")
        if not 1 <= self.size_range[0] <= self.size_range[1]:
            raise ValueError("size_range must be a non-empty positive integer interval")
        if abs(self.rhoB) >= 1:
            raise ValueError("rhoB must lie in (-1, 1)")
        if np.linalg.eigvalsh(self.error_correlation()).min() <= 0:
            raise ValueError("infeasible correlation matrix for (eps1, eps2, delta1, delta2)")

    def error_correlation(self) -> np.ndarray:
        """Correlation of (eps1, eps2, delta1, delta2); deltas are independent of each other
        and of the other endpoint's eps."""
        c = np.eye(4)
        c[0, 1] = c[1, 0] = self.rhoW
        c[0, 2] = c[2, 0] = self.rho1
        c[1, 3] = c[3, 1] = self.rho2
        return c

    def params(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES])

    def expected_missing(self, endpoint: int, n_grid: int = 4001) -> float:
        """E[1 - Phi(gamma0 + gamma1 / s)] with s ~ U(se_range)."""
        g0, g1 = ((self.gamma01, self.gamma11) if endpoint == 1 else (self.gamma02, self.gamma12))
        s = np.linspace(*self.se_range, n_grid)
        return float(np.trapezoid(norm.cdf(-(g0 + g1 / s)), s) / (s[-1] - s[0]))


_BASE = SimTruth()
DESIGNS = {
    1: replace(_BASE, tau1=0.5, tau2=0.5, rho1=0.4, rho2=0.4,
               target_missing_1=0.20, target_missing_2=0.20),
    2: replace(_BASE, tau1=1.0, tau2=1.0, rho1=0.4, rho2=0.4,
               target_missing_1=0.20, target_missing_2=0.20),
    3: replace(_BASE, tau1=0.5, tau2=0.5, rho1=0.5, rho2=0.7,
               target_missing_1=0.20, target_missing_2=0.40),
    4: replace(_BASE, tau1=0.8, tau2=0.4, rho1=0.7, rho2=0.3,
               target_missing_1=0.32, target_missing_2=0.12),
}


def design(experiment, n_studies: int = 50) -> SimTruth:
    if isinstance(experiment, SimTruth):
        return replace(experiment, n_studies=n_studies)
    if experiment not in DESIGNS:
        raise ValueError(f"unknown experiment {experiment!r}; choose 1-4 or pass a SimTruth")
    return replace(DESIGNS[experiment], n_studies=n_studies)


@dataclass
class SimDataset:
    observed: BivariateDataset          # studies reporting at least one endpoint
    complete: np.ndarray                # (n, 5): sample size, y1, s1, y2, s2 before selection
    z_truth: np.ndarray                 # (n, 2)
    truth: SimTruth
    seed: int
    missing_fraction: tuple = (0.0, 0.0)

    @property
    def reported(self) -> np.ndarray:
        return self.z_truth > 0


def generate_dataset(truth: SimTruth, seed: int) -> SimDataset:
    rng = np.random.default_rng(seed)
    n = truth.n_studies
    s = rng.uniform(*truth.se_range, size=(n, 2))
    sizes = rng.integers(truth.size_range[0], truth.size_range[1] + 1, size=n)
    tau = np.array([truth.tau1, truth.tau2])
    cov_b = np.outer(tau, tau) * np.array([[1.0, truth.rhoB], [truth.rhoB, 1.0]])
    theta = np.array([truth.mu1, truth.mu2]) + rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov_b).T
    e = rng.standard_normal((n, 4)) @ np.linalg.cholesky(truth.error_correlation()).T
    y = theta + s * e[:, :2]
    g0 = np.array([truth.gamma01, truth.gamma02])
    g1 = np.array([truth.gamma11, truth.gamma12])
    z = g0 + g1 / s + e[:, 2:]
    rep = z > 0

    kept, unreported = [], []
    for i in range(n):
        st = StudyRecord(
            f"S{i + 1:03d}", int(sizes[i]),
            float(y[i, 0]) if rep[i, 0] else None, float(s[i, 0]) if rep[i, 0] else None,
            float(y[i, 1]) if rep[i, 1] else None, float(s[i, 1]) if rep[i, 1] else None)
        (kept if rep[i].any() else unreported).append(st)
    if not any(r.all() for r in rep):
        raise DataError(f"seed {seed}: no simulated study reports both endpoints")
    observed = partition(kept, k_missing=len(unreported), unreported=unreported)
    complete = np.column_stack([sizes, y[:, 0], s[:, 0], y[:, 1], s[:, 1]])
    miss = tuple(float(v) for v in 1.0 - rep.mean(axis=0))
    return SimDataset(observed, complete, z, truth, seed, miss)


def complete_case(dataset: BivariateDataset) -> BivariateDataset:
    """Only the studies reporting both endpoints."""
    return partition(dataset.studies[:dataset.m1])


@dataclass
class _Acc:
    estimates: list = field(default_factory=list)
    covered: list = field(default_factory=list)


@dataclass
class MetricsTable:
    experiment: str
    n: int
    n_replications: int
    rows: list                     # dicts with model, endpoint, bias, se, cp
    missing_fraction: tuple = (0.0, 0.0)
    n_unconverged: dict = field(default_factory=dict)

    def get(self, model: str, endpoint: int) -> dict:
        for r in self.rows:
            if r["model"] == model and r["endpoint"] == f"mu{endpoint}":
                return r
        raise KeyError((model, endpoint))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "n", "model", "endpoint", "bias", "se", "cp"])
        for r in self.rows:
            w.writerow([self.experiment, self.n, r["model"], r["endpoint"],
                        format(r["bias"], ".6f"), format(r["se"], ".6f"), format(r["cp"], ".4f")])
        return buf.getvalue()


def fit_replication(model: str, sim: SimDataset, config: SamplerConfig):
    """Posterior means, 95% intervals and the converged flag for one replication."""
    if model == COMPLETE_CASE_NBC:
        data, tag = complete_case(sim.observed), Model.NBC
    else:
        data, tag = sim.observed, Model(model)
    draws, report = run_mcmc(tag, data, config=config)
    est, ci = [], []
    for name in ("mu1", "mu2"):
        x = draws.combined(name)
        est.append(float(x.mean()))
        ci.append(tuple(np.quantile(x, [0.025, 0.975])))
    return est, ci, report.converged


def run_experiment(experiment, n_studies: int = 50, n_replications: int = 100,
                   models=("ABSORB", "NBC", COMPLETE_CASE_NBC),
                   config: SamplerConfig = None, seed: int = 0,
                   progress=None) -> MetricsTable:
    """Bias, SE and coverage of the posterior means over ``n_replications`` datasets.

    Replication ``r`` uses data seed ``seed + r`` and sampler seed ``seed + r``.
    """
    if n_replications < 1:
        raise ValueError("n_replications must be >= 1")
    for m in models:
        if m not in MODEL_CHOICES:
            raise ValueError(f"unknown model {m!r}")
    truth = design(experiment, n_studies)
    config = config or SamplerConfig()
    acc = {(m, j): _Acc() for m in models for j in (0, 1)}
    unconverged = {m: 0 for m in models}
    miss = []
    mu = (truth.mu1, truth.mu2)
    for r in range(n_replications):
        sim = generate_dataset(truth, seed + r)
        miss.append(sim.missing_fraction)
        for m in models:
            est, ci, ok = fit_replication(m, sim, replace(config, seed=seed + r))
            unconverged[m] += not ok
            for j in (0, 1):
                acc[m, j].estimates.append(est[j])
                acc[m, j].covered.append(ci[j][0] <= mu[j] <= ci[j][1])
        if progress is not None:
            progress(r + 1, n_replications)
    for m, k in unconverged.items():
        if k > 0.2 * n_replications:
            log.warning("%s failed to converge in %d of %d replications", m, k, n_replications)
    rows = []
    for m in models:
        for j in (0, 1):
            e = np.array(acc[m, j].estimates)
            rows.append({"model": m, "endpoint": f"mu{j + 1}",
                         "bias": float(e.mean() - mu[j]),
                         "se": float(e.std(ddof=1)) if e.size > 1 else 0.0,
                         "cp": float(np.mean(acc[m, j].covered))})
    label = str(experiment) if not isinstance(experiment, SimTruth) else "custom"
    return MetricsTable(label, n_studies, n_replications, rows,
                        tuple(np.mean(miss, axis=0).tolist()), unconverged)
