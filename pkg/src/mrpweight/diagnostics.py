"""Split-chain potential scale reduction and effective sample size."""
from __future__ import annotations

import logging
import warnings

import numpy as np

log = logging.getLogger(__name__)


class DegenerateParameterWarning(UserWarning):
    """A parameter has zero variance across all draws."""


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("draws must be (n_chains, n_draws)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    first = x[..., :half]
    second = x[..., x.shape[-1] - half:]
    return np.concatenate([first, second], axis=-2)


def split_rhat(draws, name: str = "parameter") -> float:
    """Classic split-chain R-hat for draws shaped ``(n_chains, n_draws)``.

    Each chain is split in half; R-hat compares between-half-chain variance
    to the mean within-half-chain variance.  Returns 1 (with a warning) when
    the within-chain variance is zero.
    """
    x = _as_chains(draws)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split R-hat needs at least 2 chains of 4 draws")
    return float(split_rhat_matrix(x[:, :, None], names=[name])[0])


def split_rhat_matrix(x: np.ndarray, names=None, warn: bool = True) -> np.ndarray:
    """Vectorized split R-hat over parameters; ``x`` is (chains, draws, params)."""
    s = _split(np.moveaxis(np.asarray(x, dtype=float), 2, 0))  # (params, 2C, n)
    n = s.shape[-1]
    means = s.mean(axis=-1)
    within = s.var(axis=-1, ddof=1).mean(axis=-1)
    between = n * means.var(axis=-1, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    out = np.ones(len(within))
    ok = within > 0
    out[ok] = np.sqrt(var_plus[ok] / within[ok])
    # within-variance zero but chains disagree: infinite
    out[~ok & (between > 0)] = np.inf
    degenerate = ~ok & ~(between > 0)
    if warn and degenerate.any():
        labels = [names[i] for i in np.flatnonzero(degenerate)] if names is not None else []
        msg = f"{int(degenerate.sum())} parameter(s) with zero variance; R-hat set to 1"
        if labels:
            msg += f" (e.g. {labels[0]})"
        warnings.warn(msg, DegenerateParameterWarning, stacklevel=2)
    return out


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance along the last axis via FFT."""
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conjugate(f), n=size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(draws, name: str = "parameter", max_ratio: float | None = None) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence on split chains.

    ``draws`` is ``(n_chains, n_draws)``.  The estimate is capped at
    ``max_ratio * total_draws`` (default ``log10(total_draws)``), which only
    binds for antithetic chains.  A constant parameter returns 0 with a
    warning.
    """
    x = _as_chains(draws)
    return float(ess_matrix(x[:, :, None], names=[name], max_ratio=max_ratio)[0])


def ess_matrix(x: np.ndarray, names=None, max_ratio: float | None = None, warn: bool = True) -> np.ndarray:
    """Vectorized ESS over parameters; ``x`` is (chains, draws, params)."""
    x = np.moveaxis(np.asarray(x, dtype=float), 2, 0)  # (params, C, n)
    n_total = x.shape[1] * x.shape[2]
    if x.shape[2] >= 4:
        x = _split(x)
    n_par, m, n = x.shape
    acov = _autocov(x)  # (params, m, n)
    chain_mean = x.mean(axis=-1)
    chain_var = acov[..., 0] * n / (n - 1.0)
    mean_var = chain_var.mean(axis=-1)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus = var_plus + chain_mean.var(axis=-1, ddof=1)
    cap = (max_ratio if max_ratio is not None else np.log10(n_total)) * n_total
    constant = ~(var_plus > 0)
    mean_acov = acov.mean(axis=1)  # (params, n)
    safe = np.where(constant, 1.0, var_plus)
    rho = 1.0 - (mean_var[:, None] - mean_acov) / safe[:, None]
    rho[:, 0] = 1.0
    n_pairs = n // 2
    pairs = rho[:, 0 : 2 * n_pairs : 2] + rho[:, 1 : 2 * n_pairs : 2]
    # Geyer: truncate at the first non-positive pair sum, then force monotone
    positive = np.logical_and.accumulate(pairs > 0, axis=1)
    pairs = np.minimum.accumulate(np.where(positive, pairs, np.inf), axis=1)
    tau = -1.0 + 2.0 * np.where(positive, pairs, 0.0).sum(axis=1)
    tau = np.maximum(tau, 1.0 / np.log10(n_total))
    out = np.where(constant, 0.0, np.minimum(m * n / tau, cap))
    if warn and constant.any():
        labels = [names[i] for i in np.flatnonzero(constant)] if names is not None else []
        msg = f"{int(constant.sum())} constant parameter(s); ESS set to 0"
        if labels:
            msg += f" (e.g. {labels[0]})"
        warnings.warn(msg, DegenerateParameterWarning, stacklevel=2)
    return out
