"""Log-priors and log-likelihoods for the selection model and its reductions.

Each study contributes, given its latent selection pair ``z`` and its
study-level means ``theta``::

    log p(z) + log p(y | z)

where ``p(z)`` is a product of unit-variance normals truncated to the side
implied by the study's reporting pattern, and ``p(y | z)`` is the Gaussian
conditional of the reported effects.  For a study reporting both endpoints
this factorization equals the truncated four-dimensional normal density of
``(y1, y2, z1, z2)`` exactly.  Missing standard errors are replaced by the
plug-in estimates of :func:`impute_missing_se`.

The compiled ``_``-prefixed kernels operate on flat arrays and are shared
with :mod:`absorb.sampler`; the public functions accept the dataclasses.
Out-of-support states evaluate to ``-inf`` rather than raising.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from absorb._special import log_ndtr
from absorb.data import BOTH, ONLY_Y1, ONLY_Y2, BivariateDataset

PARAM_NAMES = ("mu1", "mu2", "tau1", "tau2", "gamma01", "gamma11",
               "gamma02", "gamma12", "rho1", "rho2", "rhoW", "rhoB")
NBC_PARAM_NAMES = ("mu1", "mu2", "tau1", "tau2", "rhoW", "rhoB")

(MU1, MU2, TAU1, TAU2, G01, G11, G02, G12,
 RHO1, RHO2, RHOW, RHOB) = range(12)

LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = -np.inf


@dataclass(frozen=True)
class AbsorbParams:
    mu1: float
    mu2: float
    tau1: float
    tau2: float
    gamma01: float
    gamma11: float
    gamma02: float
    gamma12: float
    rho1: float
    rho2: float
    rhoW: float
    rhoB: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AbsorbParams":
        return cls(*(float(v) for v in arr))

    def is_feasible(self) -> bool:
        return _feasible(self.to_array())


@dataclass(frozen=True)
class NbcParams:
    mu1: float
    mu2: float
    tau1: float
    tau2: float
    rhoW: float
    rhoB: float

    def to_array(self) -> np.ndarray:
        """Embed in the 12-slot layout with selection parameters at zero."""
        arr = np.zeros(12)
        for k in NBC_PARAM_NAMES:
            arr[PARAM_NAMES.index(k)] = getattr(self, k)
        return arr

    @classmethod
    def from_array(cls, arr) -> "NbcParams":
        arr = np.asarray(arr, dtype=float)
        if arr.shape == (6,):
            return cls(*(float(v) for v in arr))
        return cls(*(float(arr[PARAM_NAMES.index(k)]) for k in NBC_PARAM_NAMES))


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.  ``gamma1_upper`` of None means max observed SE."""

    mu_sd: float = 100.0
    tau_scale: float = 1.0
    gamma0_range: tuple = (-2.0, 2.0)
    gamma1_upper: Optional[tuple] = None
    rho_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.mu_sd <= 0 or self.tau_scale <= 0:
            raise ValueError("prior scales must be positive")
        for lo, hi in (self.gamma0_range, self.rho_range):
            if not lo < hi:
                raise ValueError("prior ranges must be non-degenerate")
        if self.gamma1_upper is not None and min(self.gamma1_upper) <= 0:
            raise ValueError("gamma1 upper bounds must be positive")

    def resolve(self, dataset: BivariateDataset) -> "PriorSpec":
        if self.gamma1_upper is not None:
            return self
        upper = (float(np.nanmax(dataset.column("s1"))),
                 float(np.nanmax(dataset.column("s2"))))
        return PriorSpec(self.mu_sd, self.tau_scale, self.gamma0_range, upper,
                         self.rho_range)

    def to_array(self) -> np.ndarray:
        if self.gamma1_upper is None:
            raise ValueError("gamma1_upper unresolved; call PriorSpec.resolve(dataset)")
        return np.array([self.mu_sd, self.tau_scale, *self.gamma0_range,
                         *self.gamma1_upper, *self.rho_range], dtype=float)


@dataclass
class LatentState:
    theta_both: np.ndarray            # (m1, 2)
    theta_y1: np.ndarray              # (m2,)
    theta_y2: np.ndarray              # (m3,)
    z: np.ndarray                     # (n, 2)
    s_tilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def theta_matrix(self, dataset: BivariateDataset) -> np.ndarray:
        """(n, 2) array with NaN in the slots of unreported endpoints."""
        m1, m2 = dataset.m1, dataset.m2
        th = np.full((dataset.n, 2), np.nan)
        th[:m1] = np.asarray(self.theta_both, dtype=float).reshape(m1, 2)
        th[m1:m1 + m2, 0] = self.theta_y1
        th[m1 + m2:, 1] = self.theta_y2
        return th

    @classmethod
    def from_matrix(cls, theta, z, dataset, s_tilde=None) -> "LatentState":
        m1, m2 = dataset.m1, dataset.m2
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:m1].copy(), theta[m1:m1 + m2, 0].copy(),
                   theta[m1 + m2:, 1].copy(), np.asarray(z, dtype=float).copy(),
                   np.zeros((0, 2)) if s_tilde is None else np.asarray(s_tilde, float))

    def z_signs_match(self, dataset: BivariateDataset) -> bool:
        return bool(_signs_ok(dataset.patterns, np.asarray(self.z, dtype=float)))


@dataclass(frozen=True)
class ImputationReport:
    k_hat1: float
    k_hat2: float
    imputed_s1: dict
    imputed_s2: dict


# ---------------------------------------------------------------------------
# standard-error imputation

def estimate_khat(dataset: BivariateDataset, endpoint: int) -> float:
    """Pooled precision per participant over the studies reporting ``endpoint``."""
    if endpoint not in (1, 2):
        raise ValueError("endpoint must be 1 or 2")
    s = dataset.column(f"s{endpoint}")
    reported = ~np.isnan(s)
    if not reported.any():
        raise ValueError(f"no study reports endpoint {endpoint}")
    return float(np.sum(1.0 / s[reported] ** 2) / np.sum(dataset.sample_sizes[reported]))


def impute_missing_se(dataset: BivariateDataset) -> ImputationReport:
    k1 = estimate_khat(dataset, 1)
    k2 = estimate_khat(dataset, 2)
    imp1, imp2 = {}, {}
    for st in dataset.studies:
        if st.s1 is None:
            imp1[st.study_id] = math.sqrt(1.0 / (k1 * st.sample_size))
        if st.s2 is None:
            imp2[st.study_id] = math.sqrt(1.0 / (k2 * st.sample_size))
    return ImputationReport(k1, k2, imp1, imp2)


def filled_se(dataset: BivariateDataset, imputed: ImputationReport):
    """Observed SEs with the imputed values substituted where missing."""
    s1 = dataset.column("s1")
    s2 = dataset.column("s2")
    for i, st in enumerate(dataset.studies):
        if st.s1 is None:
            s1[i] = imputed.imputed_s1[st.study_id]
        if st.s2 is None:
            s2[i] = imputed.imputed_s2[st.study_id]
    return s1, s2


def observed_se_bounds(dataset: BivariateDataset) -> np.ndarray:
    """Rows (min, max) of the observed SEs for each endpoint; bounds for ISM SEs."""
    s1 = dataset.column("s1")
    s2 = dataset.column("s2")
    return np.array([[np.nanmin(s1), np.nanmax(s1)], [np.nanmin(s2), np.nanmax(s2)]])


# ---------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True)
def _feasible(p):
    r1, r2, rw = p[RHO1], p[RHO2], p[RHOW]
    return rw * rw < (1.0 - r1 * r1) * (1.0 - r2 * r2)


@numba.njit(cache=True)
def _signs_ok(pattern, z):
    for i in range(pattern.shape[0]):
        z1, z2 = z[i, 0], z[i, 1]
        pat = pattern[i]
        if pat == BOTH:
            if z1 < 0.0 or z2 < 0.0:
                return False
        elif pat == ONLY_Y1:
            if z1 < 0.0 or z2 > 0.0:
                return False
        elif pat == ONLY_Y2:
            if z1 > 0.0 or z2 < 0.0:
                return False
        else:
            if z1 > 0.0 or z2 > 0.0:
                return False
    return True


@numba.njit
def _log_tn_side(z, m, upper_side):
    # log density of N(m, 1) restricted to z >= 0 (upper_side) or z <= 0
    if upper_side:
        if z < 0.0:
            return -np.inf
        return -0.5 * LOG_2PI - 0.5 * (z - m) ** 2 - log_ndtr(m)
    if z > 0.0:
        return -np.inf
    return -0.5 * LOG_2PI - 0.5 * (z - m) ** 2 - log_ndtr(-m)


@numba.njit
def _z_terms(p, pattern, s1, s2, z):
    total = 0.0
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        m1 = p[G01] + p[G11] / s1[i]
        m2 = p[G02] + p[G12] / s2[i]
        total += _log_tn_side(z[i, 0], m1, pat == BOTH or pat == ONLY_Y1)
        total += _log_tn_side(z[i, 1], m2, pat == BOTH or pat == ONLY_Y2)
    return total


@numba.njit(cache=True)
def _y_terms(p, pattern, y1, s1, y2, s2, theta, z, selection):
    """Gaussian log-density of the reported effects given theta (and z).

    With ``selection`` False the rho1/rho2 shifts are dropped and z is ignored.
    """
    rw = p[RHOW]
    r1 = p[RHO1] if selection else 0.0
    r2 = p[RHO2] if selection else 0.0
    v1f = 1.0 - r1 * r1
    v2f = 1.0 - r2 * r2
    if rw * rw >= v1f * v2f:
        return -np.inf
    total = 0.0
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        a1 = y1[i] - theta[i, 0]
        a2 = y2[i] - theta[i, 1]
        if selection:
            a1 -= r1 * s1[i] * (z[i, 0] - p[G01] - p[G11] / s1[i])
            a2 -= r2 * s2[i] * (z[i, 1] - p[G02] - p[G12] / s2[i])
        if pat == BOTH:
            c11 = s1[i] * s1[i] * v1f
            c22 = s2[i] * s2[i] * v2f
            c12 = rw * s1[i] * s2[i]
            det = c11 * c22 - c12 * c12
            q = (c22 * a1 * a1 - 2.0 * c12 * a1 * a2 + c11 * a2 * a2) / det
            total += -LOG_2PI - 0.5 * math.log(det) - 0.5 * q
        elif pat == ONLY_Y1:
            v = s1[i] * s1[i] * v1f
            total += -0.5 * (LOG_2PI + math.log(v)) - 0.5 * a1 * a1 / v
        elif pat == ONLY_Y2:
            v = s2[i] * s2[i] * v2f
            total += -0.5 * (LOG_2PI + math.log(v)) - 0.5 * a2 * a2 / v
    return total


@numba.njit(cache=True)
def _theta_terms(p, pattern, theta):
    t1, t2, rb = p[TAU1], p[TAU2], p[RHOB]
    if t1 <= 0.0 or t2 <= 0.0 or rb * rb >= 1.0:
        return -np.inf
    det = t1 * t1 * t2 * t2 * (1.0 - rb * rb)
    total = 0.0
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        d1 = theta[i, 0] - p[MU1]
        d2 = theta[i, 1] - p[MU2]
        if pat == BOTH:
            q = (t2 * t2 * d1 * d1 - 2.0 * rb * t1 * t2 * d1 * d2 + t1 * t1 * d2 * d2) / det
            total += -LOG_2PI - 0.5 * math.log(det) - 0.5 * q
        elif pat == ONLY_Y1:
            total += -0.5 * LOG_2PI - math.log(t1) - 0.5 * d1 * d1 / (t1 * t1)
        elif pat == ONLY_Y2:
            total += -0.5 * LOG_2PI - math.log(t2) - 0.5 * d2 * d2 / (t2 * t2)
    return total


@numba.njit
def _ism_terms(p, s_tilde):
    total = 0.0
    for k in range(s_tilde.shape[0]):
        total += log_ndtr(-p[G01] - p[G11] / s_tilde[k, 0])
        total += log_ndtr(-p[G02] - p[G12] / s_tilde[k, 1])
    return total


@numba.njit(cache=True)
def _log_uniform(x, lo, hi):
    if lo < x < hi:
        return -math.log(hi - lo)
    return -np.inf


@numba.njit(cache=True)
def _log_prior(p, bounds, selection):
    """bounds = [mu_sd, tau_scale, g0_lo, g0_hi, g1_hi1, g1_hi2, rho_lo, rho_hi]."""
    mu_sd, c = bounds[0], bounds[1]
    total = 0.0
    for k in (MU1, MU2):
        total += -0.5 * LOG_2PI - math.log(mu_sd) - 0.5 * (p[k] / mu_sd) ** 2
    for k in (TAU1, TAU2):
        if p[k] <= 0.0:
            return -np.inf
        total += math.log(2.0 / (math.pi * c)) - math.log1p((p[k] / c) ** 2)
    total += _log_uniform(p[RHOW], bounds[6], bounds[7])
    total += _log_uniform(p[RHOB], bounds[6], bounds[7])
    if selection:
        total += _log_uniform(p[G01], bounds[2], bounds[3])
        total += _log_uniform(p[G02], bounds[2], bounds[3])
        total += _log_uniform(p[G11], 0.0, bounds[4])
        total += _log_uniform(p[G12], 0.0, bounds[5])
        total += _log_uniform(p[RHO1], bounds[6], bounds[7])
        total += _log_uniform(p[RHO2], bounds[6], bounds[7])
    return total


# ---------------------------------------------------------------------------
# public API

def _kernel_inputs(dataset, latents, imputed):
    if imputed is None:
        imputed = impute_missing_se(dataset)
    s1, s2 = filled_se(dataset, imputed)
    y1 = np.nan_to_num(dataset.column("y1"))
    y2 = np.nan_to_num(dataset.column("y2"))
    theta = np.nan_to_num(latents.theta_matrix(dataset))
    z = np.asarray(latents.z, dtype=float).reshape(dataset.n, 2)
    return dataset.patterns, y1, s1, y2, s2, theta, z


def log_prior(params, spec: PriorSpec) -> float:
    """Sum of the component log-densities; ``-inf`` outside the support."""
    selection = isinstance(params, AbsorbParams)
    if selection:
        bounds = spec.to_array()
    else:
        bounds = np.array([spec.mu_sd, spec.tau_scale, *spec.gamma0_range, 1.0, 1.0,
                           *spec.rho_range])
    return float(_log_prior(params.to_array(), bounds, selection))


def log_random_effects(params, latents: LatentState, dataset: BivariateDataset) -> float:
    """Log-density of the study-level means under the between-study normal."""
    theta = np.nan_to_num(latents.theta_matrix(dataset))
    return float(_theta_terms(params.to_array(), dataset.patterns, theta))


def log_latent_selection(params: AbsorbParams, latents: LatentState,
                         dataset: BivariateDataset,
                         imputed: Optional[ImputationReport] = None) -> float:
    """The truncated-normal log-density of the latent selection pairs alone."""
    pattern, _, s1, _, s2, _, z = _kernel_inputs(dataset, latents, imputed)
    return float(_z_terms(params.to_array(), pattern, s1, s2, z))


def loglik_absorb(params: AbsorbParams, latents: LatentState, dataset: BivariateDataset,
                  imputed: Optional[ImputationReport] = None) -> float:
    pattern, y1, s1, y2, s2, theta, z = _kernel_inputs(dataset, latents, imputed)
    p = params.to_array()
    if not _signs_ok(pattern, z) or not _feasible(p):
        return NEG_INF
    return float(_z_terms(p, pattern, s1, s2, z)
                 + _y_terms(p, pattern, y1, s1, y2, s2, theta, z, True))


def loglik_nbc(params, latents: LatentState, dataset: BivariateDataset) -> float:
    """Likelihood of the non-selection model; any selection fields are ignored."""
    p = params.to_array()
    if abs(p[RHOW]) >= 1.0:
        return NEG_INF
    theta = np.nan_to_num(latents.theta_matrix(dataset))
    y1 = np.nan_to_num(dataset.column("y1"))
    y2 = np.nan_to_num(dataset.column("y2"))
    s1 = np.nan_to_num(dataset.column("s1"), nan=1.0)
    s2 = np.nan_to_num(dataset.column("s2"), nan=1.0)
    z = np.zeros((dataset.n, 2))
    return float(_y_terms(p, dataset.patterns, y1, s1, y2, s2, theta, z, False))


def loglik_ism(params: AbsorbParams, latents: LatentState, dataset: BivariateDataset,
               imputed: Optional[ImputationReport] = None) -> float:
    """``loglik_absorb`` plus, per unreported study, log P(z1 < 0, z2 < 0 | s_tilde)."""
    ll = loglik_absorb(params, latents, dataset, imputed)
    s_tilde = np.asarray(latents.s_tilde, dtype=float).reshape(-1, 2)
    if s_tilde.shape[0] != dataset.k_missing:
        raise ValueError(f"expected {dataset.k_missing} s_tilde rows, got {s_tilde.shape[0]}")
    if dataset.k_missing:
        ll += float(_ism_terms(params.to_array(), s_tilde))
    return ll


def log_prior_missing_se(s_tilde, bounds) -> float:
    """Uniform prior of the unreported studies' SEs between observed min and max."""
    s_tilde = np.asarray(s_tilde, dtype=float).reshape(-1, 2)
    total = 0.0
    for j in range(2):
        lo, hi = bounds[j]
        for v in s_tilde[:, j]:
            if not lo <= v <= hi:
                return NEG_INF
            total -= math.log(hi - lo) if hi > lo else 0.0
    return total
