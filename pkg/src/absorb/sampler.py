"""Metropolis-within-Gibbs sampler for the selection model, its non-selection
reduction, and the variant that includes completely unreported studies.

One sweep updates, in order:

1. every latent selection variable from its sign-constrained Gaussian full
   conditional;
2. the study-level means from their conjugate Gaussian full conditionals;
3. the pooled effects from their conjugate bivariate Gaussian conditional;
4. each remaining scalar parameter by random-walk Metropolis on an
   unconstrained scale (log for heterogeneity, scaled logit on the prior
   range for selection parameters and correlations);
5. the unreported studies' standard errors, when present, by the same kind
   of random walk inside their prior bounds.

Proposal scales adapt every ``adapt_window`` iterations during burn-in only.
Each chain runs inside a single compiled call with its own
``numpy.random.Generator`` derived from ``(seed, chain_index)``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numba
import numpy as np

from absorb._special import log_ndtr, ndtri_exp
from absorb.data import BOTH, ONLY_Y1, ONLY_Y2, BivariateDataset
from absorb.diagnostics import effective_sample_size, split_rhat
from absorb.likelihood import (G01, G02, G11, G12, MU1, MU2, NBC_PARAM_NAMES,
                               PARAM_NAMES, RHO1, RHO2, RHOB, RHOW, TAU1, TAU2,
                               PriorSpec, _ism_terms, _log_prior, _signs_ok,
                               _theta_terms, _y_terms, filled_se, impute_missing_se,
                               observed_se_bounds)

log = logging.getLogger(__name__)

LOG_TINY = math.log(1e-300)


class Model(str, Enum):
    ABSORB = "ABSORB"
    NBC = "NBC"
    ABSORB_ISM = "ABSORB_ISM"

    @property
    def code(self) -> int:
        return {"ABSORB": 0, "NBC": 1, "ABSORB_ISM": 2}[self.value]

    @property
    def param_names(self) -> tuple:
        return NBC_PARAM_NAMES if self is Model.NBC else PARAM_NAMES


_ABSORB, _NBC, _ISM = 0, 1, 2


class SamplerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# truncated normal

@numba.njit
def _tail_rejection(rng, lo, hi):
    # N(0,1) restricted to [lo, hi] with lo > 0 far in the tail: exponential proposals
    lam = 0.5 * (lo + math.sqrt(lo * lo + 4.0))
    while True:
        x = lo + rng.exponential() / lam
        if x > hi:
            continue
        if rng.random() <= math.exp(-0.5 * (x - lam) ** 2):
            return x


@numba.njit
def _std_truncnorm(rng, a, b):
    flip = a > 0.0
    if flip:
        a, b = -b, -a
    la = log_ndtr(a)
    lb = log_ndtr(b)
    r = math.exp(la - lb)
    if lb + math.log1p(-r) > LOG_TINY:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        x = ndtri_exp(lb + math.log(r + u * (1.0 - r)))
        x = min(max(x, a), b)
    else:
        x = -_tail_rejection(rng, -b, -a)
    return -x if flip else x


@numba.njit
def _truncnorm(rng, mean, sd, lower, upper):
    return mean + sd * _std_truncnorm(rng, (lower - mean) / sd, (upper - mean) / sd)


@numba.njit
def _truncnorm_many(rng, mean, sd, lower, upper, size):
    out = np.empty(size)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    for i in range(size):
        out[i] = mean + sd * _std_truncnorm(rng, a, b)
    return out


def sample_truncated_normal(mean, sd, lower, upper, rng, size=None):
    """Draw from N(mean, sd^2) restricted to (lower, upper).

    Inverse-CDF in log-CDF space, mirrored so the interval never sits in the
    upper tail; intervals carrying less than 1e-300 mass fall back to
    exponential rejection sampling.
    """
    if not lower < upper:
        raise ValueError("lower must be strictly less than upper")
    if not sd > 0:
        raise ValueError("sd must be positive")
    if size is None:
        return float(_truncnorm(rng, float(mean), float(sd), float(lower), float(upper)))
    return _truncnorm_many(rng, float(mean), float(sd), float(lower), float(upper), int(size))


# ---------------------------------------------------------------------------
# configuration and results

@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 3
    n_iter: int = 50_000
    burn_in: int = 10_000
    thin: int = 1
    seed: int = 0
    ess_floor: float = 100.0
    max_iter_doublings: int = 2
    adapt_window: int = 50
    target_accept: float = 0.44

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1 or self.thin < 1 or self.adapt_window < 1:
            raise ValueError("n_chains, n_iter, thin and adapt_window must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iter")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.ess_floor <= 0 or self.max_iter_doublings < 0:
            raise ValueError("ess_floor must be positive and max_iter_doublings >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.retained_per_chain < 100:
            raise ValueError("config retains fewer than 100 draws per chain")

    @property
    def retained_per_chain(self) -> int:
        return -(-(self.n_iter - self.burn_in) // self.thin)


@dataclass
class Chain:
    chain_index: int
    draws: np.ndarray                 # (n_keep, 12) in PARAM_NAMES order
    iterations: np.ndarray            # 1-based MCMC iteration of each retained draw
    accept_rates: dict
    s_tilde: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass
class PosteriorDraws:
    chains: list
    model_tag: Model
    dataset_fingerprint: str
    config: SamplerConfig

    @property
    def param_names(self) -> tuple:
        return self.model_tag.param_names

    def chain_matrix(self, name: str) -> np.ndarray:
        """(n_chains, n_keep) array of one parameter."""
        k = PARAM_NAMES.index(name)
        return np.stack([c.draws[:, k] for c in self.chains])

    def combined(self, name: str) -> np.ndarray:
        return self.chain_matrix(name).ravel()

    def mean(self, name: str) -> float:
        return float(self.combined(name).mean())

    @property
    def n_draws(self) -> int:
        return sum(c.draws.shape[0] for c in self.chains)

    def to_csv(self) -> str:
        names = self.param_names
        idx = [PARAM_NAMES.index(k) for k in names]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("chain", "iter") + names)
        for c in self.chains:
            for it, row in zip(c.iterations, c.draws):
                w.writerow([c.chain_index, int(it)] + [format(row[k], ".17g") for k in idx])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model_tag, dataset_fingerprint: str,
                 config: SamplerConfig) -> "PosteriorDraws":
        model_tag = Model(model_tag)
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        names = tuple(header[2:])
        if names != model_tag.param_names:
            raise ValueError(f"draw columns {names} do not match model {model_tag.value}")
        rows = {}
        for row in reader:
            rows.setdefault(int(row[0]), []).append(row)
        chains = []
        for ci in sorted(rows):
            block = rows[ci]
            draws = np.zeros((len(block), 12))
            for k, name in enumerate(names):
                draws[:, PARAM_NAMES.index(name)] = [float(r[2 + k]) for r in block]
            its = np.array([int(r[1]) for r in block])
            chains.append(Chain(ci, draws, its, {}))
        return cls(chains, model_tag, dataset_fingerprint, config)


@dataclass
class DiagnosticsReport:
    ess: dict
    split_rhat: dict
    converged: bool
    iterations_used: int

    def to_dict(self) -> dict:
        return {"ess": self.ess, "split_rhat": self.split_rhat,
                "converged": self.converged, "iterations_used": self.iterations_used}


# ---------------------------------------------------------------------------
# compiled sweep

# transform kinds for the scalar random walks
_IDENT, _LOG, _LOGIT = 0, 1, 2


@numba.njit
def _z_terms_endpoint(p, j, pattern, s, z):
    g0 = p[G01] if j == 0 else p[G02]
    g1 = p[G11] if j == 0 else p[G12]
    total = 0.0
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        m = g0 + g1 / s[i]
        reported = pat == BOTH or (pat == ONLY_Y1 and j == 0) or (pat == ONLY_Y2 and j == 1)
        zz = z[i, j]
        if reported:
            if zz < 0.0:
                return -np.inf
            total += -0.5 * (zz - m) ** 2 - log_ndtr(m)
        else:
            if zz > 0.0:
                return -np.inf
            total += -0.5 * (zz - m) ** 2 - log_ndtr(-m)
    return total


@numba.njit
def _target(k, p, model, use_lik, bounds, pattern, y1, s1, y2, s2, theta, z, s_tilde):
    sel = model != _NBC
    lp = _log_prior(p, bounds, sel)
    if lp == -np.inf or not use_lik:
        return lp
    if k == TAU1 or k == TAU2 or k == RHOB or k == MU1 or k == MU2:
        return lp + _theta_terms(p, pattern, theta)
    if k == RHOW or k == RHO1 or k == RHO2:
        return lp + _y_terms(p, pattern, y1, s1, y2, s2, theta, z, sel)
    # selection parameters
    j = 0 if (k == G01 or k == G11) else 1
    lp += _z_terms_endpoint(p, j, pattern, s1 if j == 0 else s2, z)
    if lp == -np.inf:
        return lp
    lp += _y_terms(p, pattern, y1, s1, y2, s2, theta, z, sel)
    if model == _ISM and s_tilde.shape[0] > 0:
        lp += _ism_terms(p, s_tilde)
    return lp


@numba.njit
def _propose(rng, x, kind, lo, hi, scale):
    eps = scale * rng.standard_normal()
    if kind == _IDENT:
        return x + eps, 0.0
    if kind == _LOG:
        xn = x * math.exp(eps)
        return xn, eps
    u = (x - lo) / (hi - lo)
    phi = math.log(u) - math.log1p(-u) + eps
    if phi >= 0.0:
        un = 1.0 / (1.0 + math.exp(-phi))
    else:
        e = math.exp(phi)
        un = e / (1.0 + e)
    xn = lo + (hi - lo) * un
    if un <= 0.0 or un >= 1.0:
        return xn, -np.inf
    ljac = math.log(un) + math.log1p(-un) - math.log(u) - math.log1p(-u)
    return xn, ljac


@numba.njit
def _update_z(rng, p, pattern, y1, s1, y2, s2, theta, z):
    r1, r2, rw = p[RHO1], p[RHO2], p[RHOW]
    v1f = 1.0 - r1 * r1
    v2f = 1.0 - r2 * r2
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        m1 = p[G01] + p[G11] / s1[i]
        m2 = p[G02] + p[G12] / s2[i]
        d1 = r1 * s1[i]
        d2 = r2 * s2[i]
        if pat == BOTH:
            c11 = s1[i] * s1[i] * v1f
            c22 = s2[i] * s2[i] * v2f
            c12 = rw * s1[i] * s2[i]
            det = c11 * c22 - c12 * c12
            q11 = c22 / det
            q22 = c11 / det
            q12 = -c12 / det
            a1 = y1[i] - theta[i, 0]
            a2 = y2[i] - theta[i, 1]
            # z1 | z2, y
            e2 = z[i, 1] - m2
            prec = 1.0 + d1 * d1 * q11
            mean = d1 * (q11 * a1 + q12 * (a2 - d2 * e2)) / prec
            z[i, 0] = _truncnorm(rng, m1 + mean, 1.0 / math.sqrt(prec), 0.0, np.inf)
            # z2 | z1, y
            e1 = z[i, 0] - m1
            prec = 1.0 + d2 * d2 * q22
            mean = d2 * (q22 * a2 + q12 * (a1 - d1 * e1)) / prec
            z[i, 1] = _truncnorm(rng, m2 + mean, 1.0 / math.sqrt(prec), 0.0, np.inf)
        elif pat == ONLY_Y1:
            c11 = s1[i] * s1[i] * v1f
            prec = 1.0 + d1 * d1 / c11
            mean = d1 * (y1[i] - theta[i, 0]) / c11 / prec
            z[i, 0] = _truncnorm(rng, m1 + mean, 1.0 / math.sqrt(prec), 0.0, np.inf)
            z[i, 1] = _truncnorm(rng, m2, 1.0, -np.inf, 0.0)
        elif pat == ONLY_Y2:
            c22 = s2[i] * s2[i] * v2f
            prec = 1.0 + d2 * d2 / c22
            mean = d2 * (y2[i] - theta[i, 1]) / c22 / prec
            z[i, 0] = _truncnorm(rng, m1, 1.0, -np.inf, 0.0)
            z[i, 1] = _truncnorm(rng, m2 + mean, 1.0 / math.sqrt(prec), 0.0, np.inf)


@numba.njit
def _update_theta(rng, p, sel, pattern, y1, s1, y2, s2, theta, z):
    r1 = p[RHO1] if sel else 0.0
    r2 = p[RHO2] if sel else 0.0
    rw = p[RHOW]
    t1, t2, rb = p[TAU1], p[TAU2], p[RHOB]
    v1f = 1.0 - r1 * r1
    v2f = 1.0 - r2 * r2
    # inverse of the between-study covariance
    bdet = t1 * t1 * t2 * t2 * (1.0 - rb * rb)
    b11 = t2 * t2 / bdet
    b22 = t1 * t1 / bdet
    b12 = -rb * t1 * t2 / bdet
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        w1 = y1[i]
        w2 = y2[i]
        if sel:
            w1 -= r1 * s1[i] * (z[i, 0] - p[G01] - p[G11] / s1[i])
            w2 -= r2 * s2[i] * (z[i, 1] - p[G02] - p[G12] / s2[i])
        if pat == BOTH:
            c11 = s1[i] * s1[i] * v1f
            c22 = s2[i] * s2[i] * v2f
            c12 = rw * s1[i] * s2[i]
            det = c11 * c22 - c12 * c12
            q11 = c22 / det
            q22 = c11 / det
            q12 = -c12 / det
            a11 = q11 + b11
            a22 = q22 + b22
            a12 = q12 + b12
            h1 = q11 * w1 + q12 * w2 + b11 * p[MU1] + b12 * p[MU2]
            h2 = q12 * w1 + q22 * w2 + b12 * p[MU1] + b22 * p[MU2]
            adet = a11 * a22 - a12 * a12
            v11 = a22 / adet
            v22 = a11 / adet
            v12 = -a12 / adet
            mean1 = v11 * h1 + v12 * h2
            mean2 = v12 * h1 + v22 * h2
            l11 = math.sqrt(v11)
            l21 = v12 / l11
            l22 = math.sqrt(max(v22 - l21 * l21, 0.0))
            e1 = rng.standard_normal()
            e2 = rng.standard_normal()
            theta[i, 0] = mean1 + l11 * e1
            theta[i, 1] = mean2 + l21 * e1 + l22 * e2
        elif pat == ONLY_Y1:
            c11 = s1[i] * s1[i] * v1f
            prec = 1.0 / c11 + 1.0 / (t1 * t1)
            mean = (w1 / c11 + p[MU1] / (t1 * t1)) / prec
            theta[i, 0] = mean + rng.standard_normal() / math.sqrt(prec)
        elif pat == ONLY_Y2:
            c22 = s2[i] * s2[i] * v2f
            prec = 1.0 / c22 + 1.0 / (t2 * t2)
            mean = (w2 / c22 + p[MU2] / (t2 * t2)) / prec
            theta[i, 1] = mean + rng.standard_normal() / math.sqrt(prec)


@numba.njit
def _update_mu(rng, p, pattern, theta, mu_sd):
    t1, t2, rb = p[TAU1], p[TAU2], p[RHOB]
    bdet = t1 * t1 * t2 * t2 * (1.0 - rb * rb)
    b11 = t2 * t2 / bdet
    b22 = t1 * t1 / bdet
    b12 = -rb * t1 * t2 / bdet
    a11 = 1.0 / (mu_sd * mu_sd)
    a22 = a11
    a12 = 0.0
    h1 = 0.0
    h2 = 0.0
    for i in range(pattern.shape[0]):
        pat = pattern[i]
        if pat == BOTH:
            a11 += b11
            a22 += b22
            a12 += b12
            h1 += b11 * theta[i, 0] + b12 * theta[i, 1]
            h2 += b12 * theta[i, 0] + b22 * theta[i, 1]
        elif pat == ONLY_Y1:
            a11 += 1.0 / (t1 * t1)
            h1 += theta[i, 0] / (t1 * t1)
        elif pat == ONLY_Y2:
            a22 += 1.0 / (t2 * t2)
            h2 += theta[i, 1] / (t2 * t2)
    adet = a11 * a22 - a12 * a12
    v11 = a22 / adet
    v22 = a11 / adet
    v12 = -a12 / adet
    l11 = math.sqrt(v11)
    l21 = v12 / l11
    l22 = math.sqrt(max(v22 - l21 * l21, 0.0))
    e1 = rng.standard_normal()
    e2 = rng.standard_normal()
    p[MU1] = v11 * h1 + v12 * h2 + l11 * e1
    p[MU2] = v12 * h1 + v22 * h2 + l21 * e1 + l22 * e2


@numba.njit(nogil=True)
def _run_chain(rng, model, use_lik, debug, pattern, y1, s1, y2, s2, bounds, se_bounds,
               p, theta, z, s_tilde, free, kinds, los, his, scales, st_scales,
               n_iter, burn_in, thin, adapt_window, target_accept):
    sel = model != _NBC
    n_keep = (n_iter - burn_in + thin - 1) // thin
    draws = np.empty((n_keep, 12))
    iters = np.empty(n_keep, dtype=np.int64)
    K = s_tilde.shape[0]
    st_draws = np.empty((n_keep, 2 * K))
    acc = np.zeros(12)
    acc_win = np.zeros(12)
    st_acc_win = np.zeros((K, 2))
    acc_kept = np.zeros(12)
    keep = 0
    for t in range(n_iter):
        if use_lik:
            if sel:
                _update_z(rng, p, pattern, y1, s1, y2, s2, theta, z)
                if debug and not _signs_ok(pattern, z):
                    raise RuntimeError("latent selection signs violate the reporting pattern")
            _update_theta(rng, p, sel, pattern, y1, s1, y2, s2, theta, z)
            _update_mu(rng, p, pattern, theta, bounds[0])
        for k in range(12):
            if not free[k]:
                continue
            if use_lik and (k == MU1 or k == MU2):
                continue
            cur = _target(k, p, model, use_lik, bounds, pattern, y1, s1, y2, s2,
                          theta, z, s_tilde)
            old = p[k]
            xn, ljac = _propose(rng, old, kinds[k], los[k], his[k], scales[k])
            if ljac == -np.inf:
                continue
            p[k] = xn
            new = _target(k, p, model, use_lik, bounds, pattern, y1, s1, y2, s2,
                          theta, z, s_tilde)
            if math.log(rng.random()) < new - cur + ljac:
                acc_win[k] += 1.0
                if t >= burn_in:
                    acc_kept[k] += 1.0
            else:
                p[k] = old
        if model == _ISM:
            for kk in range(K):
                for j in range(2):
                    lo, hi = se_bounds[j, 0], se_bounds[j, 1]
                    if hi <= lo:
                        continue
                    old = s_tilde[kk, j]
                    cur = _ism_terms(p, s_tilde[kk:kk + 1]) if use_lik else 0.0
                    xn, ljac = _propose(rng, old, _LOGIT, lo, hi, st_scales[kk, j])
                    if ljac == -np.inf:
                        continue
                    s_tilde[kk, j] = xn
                    new = _ism_terms(p, s_tilde[kk:kk + 1]) if use_lik else 0.0
                    if math.log(rng.random()) < new - cur + ljac:
                        st_acc_win[kk, j] += 1.0
                    else:
                        s_tilde[kk, j] = old
        if t < burn_in and (t + 1) % adapt_window == 0:
            for k in range(12):
                rate = acc_win[k] / adapt_window
                scales[k] = min(max(scales[k] * math.exp(2.0 * (rate - target_accept)), 1e-4), 1e4)
                acc_win[k] = 0.0
            for kk in range(K):
                for j in range(2):
                    rate = st_acc_win[kk, j] / adapt_window
                    st_scales[kk, j] = min(max(st_scales[kk, j] *
                                               math.exp(2.0 * (rate - target_accept)), 1e-4), 1e4)
                    st_acc_win[kk, j] = 0.0
        if t >= burn_in and (t - burn_in) % thin == 0:
            draws[keep] = p
            iters[keep] = t + 1
            for kk in range(K):
                st_draws[keep, 2 * kk] = s_tilde[kk, 0]
                st_draws[keep, 2 * kk + 1] = s_tilde[kk, 1]
            keep += 1
    n_post = n_iter - burn_in
    for k in range(12):
        acc[k] = acc_kept[k] / n_post
    return draws, iters, st_draws, acc


# ---------------------------------------------------------------------------
# driver

def _moment_start(y, s):
    y = y[~np.isnan(y)]
    s = s[~np.isnan(s)]
    mu = float(y.mean())
    if y.size >= 2:
        tau = math.sqrt(max(float(y.var(ddof=1)) - float(np.mean(s ** 2)), 0.01))
    else:
        tau = 0.5
    return mu, tau


def _chain_seed(seed: int, chain_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, chain_index])))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ABSORB_THREADS", "1")))
    except ValueError:
        return 1


class _Problem:
    """Flat arrays shared by every chain of one fit."""

    def __init__(self, model: Model, dataset: BivariateDataset, prior: PriorSpec):
        self.model = model
        self.dataset = dataset
        self.prior = prior.resolve(dataset)
        self.pattern = dataset.patterns
        self.y1 = np.nan_to_num(dataset.column("y1"))
        self.y2 = np.nan_to_num(dataset.column("y2"))
        if model is Model.NBC:
            self.s1 = np.nan_to_num(dataset.column("s1"), nan=1.0)
            self.s2 = np.nan_to_num(dataset.column("s2"), nan=1.0)
            self.imputed = None
        else:
            self.imputed = impute_missing_se(dataset)
            self.s1, self.s2 = filled_se(dataset, self.imputed)
        self.bounds = self.prior.to_array()
        self.se_bounds = observed_se_bounds(dataset)
        self.K = dataset.k_missing if model is Model.ABSORB_ISM else 0
        b = self.bounds
        self.kinds = np.array([_IDENT, _IDENT, _LOG, _LOG] + [_LOGIT] * 8, dtype=np.int64)
        self.los = np.array([0, 0, 0, 0, b[2], 0.0, b[2], 0.0, b[6], b[6], b[6], b[6]], float)
        self.his = np.array([0, 0, 0, 0, b[3], b[4], b[3], b[5], b[7], b[7], b[7], b[7]], float)

    def initial_state(self, rng, overrides):
        ds = self.dataset
        mu1, tau1 = _moment_start(ds.column("y1"), ds.column("s1"))
        mu2, tau2 = _moment_start(ds.column("y2"), ds.column("s2"))
        lo0, hi0 = self.prior.gamma0_range
        g0 = 0.0 if lo0 < 0.0 < hi0 else 0.5 * (lo0 + hi0)
        rlo, rhi = self.prior.rho_range
        r0 = 0.0 if rlo < 0.0 < rhi else 0.5 * (rlo + rhi)
        p = np.zeros(12)
        p[[MU1, MU2, TAU1, TAU2]] = mu1, mu2, tau1, tau2
        if self.model is not Model.NBC:
            p[[G01, G02]] = g0
            p[G11] = 0.5 * self.bounds[4]
            p[G12] = 0.5 * self.bounds[5]
            p[[RHO1, RHO2]] = r0
        p[[RHOW, RHOB]] = r0
        for name, value in (overrides or {}).items():
            p[PARAM_NAMES.index(name)] = value
        theta = np.column_stack([np.where(np.isnan(ds.column("y1")), p[MU1], self.y1),
                                 np.where(np.isnan(ds.column("y2")), p[MU2], self.y2)])
        z = self.draw_prior_z(rng, p)
        s_tilde = np.tile(self.se_bounds.mean(axis=1), (self.K, 1))
        return p, theta, z, s_tilde

    def draw_prior_z(self, rng, p):
        z = np.zeros((self.dataset.n, 2))
        if self.model is Model.NBC:
            return z
        for i, pat in enumerate(self.pattern):
            for j, (g0, g1, s) in enumerate(((p[G01], p[G11], self.s1[i]),
                                             (p[G02], p[G12], self.s2[i]))):
                reported = pat == BOTH or (pat == ONLY_Y1 and j == 0) or (pat == ONLY_Y2 and j == 1)
                lo, hi = (0.0, np.inf) if reported else (-np.inf, 0.0)
                z[i, j] = sample_truncated_normal(g0 + g1 / s, 1.0, lo, hi, rng)
        return z

    def log_posterior(self, p, theta, z, s_tilde, use_lik=True):
        sel = self.model is not Model.NBC
        lp = _log_prior(p, self.bounds, sel)
        if not use_lik or not np.isfinite(lp):
            return lp
        lp += _theta_terms(p, self.pattern, theta)
        lp += _y_terms(p, self.pattern, self.y1, self.s1, self.y2, self.s2, theta, z, sel)
        if sel:
            from absorb.likelihood import _z_terms
            lp += _z_terms(p, self.pattern, self.s1, self.s2, z)
        if self.K:
            lp += _ism_terms(p, s_tilde)
        return lp


def _run_one_chain(problem: _Problem, config: SamplerConfig, chain_index: int, n_iter: int,
                   free, use_lik, debug, initial):
    rng = _chain_seed(config.seed, chain_index)
    for attempt in range(100):
        p, theta, z, s_tilde = problem.initial_state(rng, initial)
        if np.isfinite(problem.log_posterior(p, theta, z, s_tilde, use_lik)):
            break
    else:
        raise SamplerError("could not find a finite initial log-posterior in 100 draws")
    scales = np.where(problem.kinds == _IDENT, 1.0, np.where(problem.kinds == _LOG, 0.3, 0.5))
    st_scales = np.full((problem.K, 2), 0.5)
    draws, iters, st_draws, acc = _run_chain(
        rng, problem.model.code, use_lik, debug, problem.pattern, problem.y1, problem.s1,
        problem.y2, problem.s2, problem.bounds, problem.se_bounds, p, theta, z, s_tilde,
        free, problem.kinds, problem.los, problem.his, scales, st_scales,
        n_iter, config.burn_in, config.thin, config.adapt_window, config.target_accept)
    gibbs = (MU1, MU2) if use_lik else ()
    rates = {PARAM_NAMES[k]: float(acc[k]) for k in range(12) if free[k] and k not in gibbs}
    return Chain(chain_index, draws, iters, rates, st_draws)


def _free_mask(model: Model, frozen, use_lik):
    free = np.zeros(12, dtype=np.bool_)
    for name in model.param_names:
        free[PARAM_NAMES.index(name)] = True
    for name in frozen:
        if name not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
        free[PARAM_NAMES.index(name)] = False
    return free


def diagnose(draws: PosteriorDraws, ess_floor: float, iterations_used: int,
             free=None) -> DiagnosticsReport:
    ess, rhat = {}, {}
    for name in draws.param_names:
        if free is not None and not free[PARAM_NAMES.index(name)]:
            continue
        mat = draws.chain_matrix(name)
        if np.ptp(mat) == 0.0:
            ess[name] = float(mat.size)
            rhat[name] = 1.0
            continue
        ess[name] = float(sum(effective_sample_size(row) for row in mat))
        rhat[name] = split_rhat(list(mat)) if mat.shape[0] >= 2 else float("nan")
    ok = all(ess.get(m, 0.0) >= ess_floor for m in ("mu1", "mu2"))
    if draws.config.n_chains >= 2:
        ok = ok and all(rhat.get(m, np.inf) <= 1.05 for m in ("mu1", "mu2"))
    return DiagnosticsReport(ess, rhat, bool(ok), iterations_used)


def run_mcmc(model, dataset: BivariateDataset, prior: PriorSpec = None,
             config: SamplerConfig = None, *, frozen=(), initial=None,
             use_likelihood=True, debug=False):
    """Fit ``model`` to ``dataset``; returns ``(PosteriorDraws, DiagnosticsReport)``.

    ``frozen`` names parameters held at their initial values (``initial``
    overrides the default start).  ``use_likelihood=False`` drops every
    data-dependent term so the chain targets the prior of the structural
    parameters.  If the pooled effects miss the ESS floor or the R-hat bound,
    the run is repeated with ``n_iter`` doubled, at most ``max_iter_doublings``
    times; the last attempt is returned with ``converged`` False.
    """
    model = Model(model)
    prior = prior or PriorSpec()
    config = config or SamplerConfig()
    if dataset.m1 < 1:
        raise ValueError("dataset needs at least one study reporting both outcomes")
    if model is Model.ABSORB_ISM and dataset.k_missing < 0:
        raise ValueError("k_missing must be non-negative")
    problem = _Problem(model, dataset, prior)
    free = _free_mask(model, frozen, use_likelihood)
    fingerprint = dataset.fingerprint()

    n_iter = config.n_iter
    for attempt in range(config.max_iter_doublings + 1):
        cfg = replace(config, n_iter=n_iter)
        jobs = [(problem, cfg, c, n_iter, free, use_likelihood, debug, initial)
                for c in range(cfg.n_chains)]
        threads = min(_threads(), cfg.n_chains)
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                chains = list(pool.map(lambda a: _run_one_chain(*a), jobs))
        else:
            chains = [_run_one_chain(*a) for a in jobs]
        draws = PosteriorDraws(chains, model, fingerprint, cfg)
        report = diagnose(draws, cfg.ess_floor, n_iter, free)
        if report.converged or not use_likelihood:
            break
        if attempt < config.max_iter_doublings:
            log.info("ESS/R-hat below target after %d iterations; doubling", n_iter)
            n_iter *= 2
    return draws, report


def summarize(draws: PosteriorDraws) -> dict:
    """Posterior mean, SD and equal-tailed 95% interval for every parameter."""
    out = {}
    for name in draws.param_names:
        x = draws.combined(name)
        lo, hi = np.quantile(x, [0.025, 0.975])
        out[name] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                     "ci95": [float(lo), float(hi)]}
    return out
