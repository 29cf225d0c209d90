"""Population and domain estimates from model prediction or weighted inference."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .cells import CellFrame, DomainError, DomainMask
from .posterior import PosteriorDraws
from .weights import WeightSet

Z95 = 1.959963984540054


class EstimationError(ValueError):
    """A domain has no sample units for weighted inference."""


class UndefinedSEWarning(UserWarning):
    """Standard error is undefined for a single unit."""


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    method: str
    domain: str
    lo95: float
    hi95: float

    def to_row(self) -> dict:
        d = asdict(self)
        return {"domain": d["domain"], "method": d["method"], "est": d["value"],
                "se": d["se"], "lo95": d["lo95"], "hi95": d["hi95"]}


def estimates_table(estimates) -> pd.DataFrame:
    return pd.DataFrame([e.to_row() for e in estimates], columns=["domain", "method", "est", "se", "lo95", "hi95"])


def poststratified_prediction(
    draws: PosteriorDraws, frame: CellFrame, domain: DomainMask, method: str = "Str-P"
) -> Estimate:
    """Posterior summary of ``sum N_j theta_j / sum N_j`` over the domain.

    Empty sample cells contribute through their predicted means; cells with
    no population units drop out through ``N_j = 0``.
    """
    idx = np.asarray(domain.index)
    idx = idx[frame.N[idx] > 0]
    if idx.size == 0:
        raise DomainError(f"domain {domain.name!r} has no population cells")
    theta = draws.matrix([f"theta[{frame.cell_id(j)}]" for j in idx])
    Nj = frame.N[idx]
    per_draw = theta @ (Nj / Nj.sum())
    lo, hi = np.quantile(per_draw, [0.025, 0.975])
    sd = float(per_draw.std(ddof=1)) if per_draw.size > 1 else 0.0
    point = float(per_draw.mean())
    return Estimate(point, sd, method, domain.name, min(float(lo), point), max(float(hi), point))


def weighted_mean_se(y, w) -> float:
    """Linearization SE of the ratio mean with weights held fixed.

    ``SE^2 = sum w^2 (y - m)^2 / (sum w)^2``.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.size < 2:
        warnings.warn("standard error undefined for a single unit", UndefinedSEWarning, stacklevel=2)
        return float("nan")
    m = np.sum(w * y) / np.sum(w)
    return float(np.sqrt(np.sum(w * w * (y - m) ** 2)) / np.sum(w))


def weighted_mean(y, w, method: str = "weighted", domain: str = "all") -> Estimate:
    """Ratio (Hajek) mean ``sum w y / sum w`` with a normal 95% interval."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.shape != w.shape:
        raise ValueError("y and w must have the same length")
    if y.size == 0:
        raise EstimationError(f"domain {domain!r} has no sample units")
    if np.any(~(w > 0)):
        raise ValueError("weights must be positive")
    m = float(np.sum(w * y) / np.sum(w))
    se = weighted_mean_se(y, w)
    half = Z95 * se
    return Estimate(m, se, method, domain, m - half, m + half)


def weighted_mean_cells(
    frame: CellFrame, weights: WeightSet, domain: DomainMask, method: str | None = None
) -> Estimate:
    """Weighted mean from cell sufficient statistics (one weight per cell).

    Same value and SE as :func:`weighted_mean` on the underlying units.
    """
    if weights.cell_weights is None:
        raise ValueError("cell-level weights required; use weighted_mean for unit weights")
    method = method or weights.method
    keep = np.isin(weights.cell_index, domain.index)
    idx = weights.cell_index[keep]
    w = weights.cell_weights[keep]
    n = frame.n[idx].astype(float)
    if n.sum() == 0:
        raise EstimationError(f"domain {domain.name!r} has no sample units")
    ybar = frame.y_bar[idx]
    sw = np.sum(w * n)
    m = float(np.sum(w * n * ybar) / sw)
    if n.sum() < 2:
        warnings.warn("standard error undefined for a single unit", UndefinedSEWarning, stacklevel=2)
        se = float("nan")
    else:
        resid = frame.ss[idx] + n * (ybar - m) ** 2
        se = float(np.sqrt(np.sum(w * w * resid)) / sw)
    half = Z95 * se
    return Estimate(m, se, method, domain.name, m - half, m + half)
