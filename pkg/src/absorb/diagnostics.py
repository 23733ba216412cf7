"""Convergence diagnostics: effective sample size and split-chain R-hat."""
import warnings

import numpy as np


class DegenerateChainWarning(RuntimeWarning):
    """A series has zero variance; its ESS is reported as its length."""


def autocorrelation(x):
    """Sample autocorrelation at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def effective_sample_size(series) -> float:
    """ESS = N / (1 + 2 sum rho_t) with Geyer's initial monotone sequence truncation.

    A constant series gets ESS = N and a :class:`DegenerateChainWarning`.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 draws for an ESS estimate")
    if np.ptp(x) == 0.0:
        warnings.warn("zero-variance series; ESS set to its length", DegenerateChainWarning,
                      stacklevel=2)
        return float(n)
    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    negative = np.flatnonzero(pairs <= 0.0)
    if negative.size:
        pairs = pairs[:negative[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    if tau <= 0.0:
        return float(n)
    return float(min(n / tau, n))


def split_rhat(chains) -> float:
    """Potential scale reduction over chains split in half."""
    lengths = {len(c) for c in chains}
    if len(chains) < 2:
        raise ValueError("split R-hat needs at least two chains")
    if len(lengths) != 1:
        raise ValueError("chains must have equal lengths")
    n = lengths.pop()
    if n < 10:
        raise ValueError("chains must have at least 10 draws")
    arr = np.asarray(chains, dtype=float)
    half = n // 2
    halves = np.concatenate([arr[:, :half], arr[:, n - half:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b = half * means.var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))
