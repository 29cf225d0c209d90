"""Model-based equivalent weights and the classical comparison weights.

All cell-level weight sets are normalized the same way: divide by
``sum_j (n_j / n) w_j`` so the average unit weight is 1.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cells import SEPARATOR, CellFrame, DomainError, InputError
from .posterior import ContractError, PosteriorDraws

log = logging.getLogger(__name__)

MODEL_STRUCTURED = "model-structured"
MODEL_INDEPENDENT = "model-independent-prior"
POSTSTRATIFICATION = "poststratification"
RAKING = "raking"
INVERSE_PROBABILITY = "inverse-probability"
METHODS = (MODEL_STRUCTURED, MODEL_INDEPENDENT, POSTSTRATIFICATION, RAKING, INVERSE_PROBABILITY)


class InfeasibleMarginError(ValueError):
    """A margin category has positive target share but no sample mass."""


class ExcludedCellWarning(UserWarning):
    """Cells that cannot carry a weight were left out."""


@dataclass
class WeightSet:
    """Weights from one method.

    Cell-level methods fill ``cell_index`` (frame rows) and ``cell_weights``;
    unit-level methods fill ``unit_weights`` only.  ``draws`` keeps the
    per-draw weight matrix for model-based methods.
    """

    method: str
    cell_weights: np.ndarray | None = None
    cell_index: np.ndarray | None = None
    unit_weights: np.ndarray | None = None
    normalized: bool = False
    draws: np.ndarray | None = None
    iterations: int | None = None
    converged: bool | None = None
    n_clamped: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        """Cell weights if present, else unit weights."""
        return self.cell_weights if self.cell_weights is not None else self.unit_weights

    def expand(self, frame: CellFrame) -> np.ndarray:
        """Per-unit weights via the frame's unit-to-cell map (0 for excluded cells)."""
        if self.unit_weights is not None:
            return self.unit_weights
        if frame.unit_cell is None:
            raise ContractError("frame was built without unit records; cannot expand weights")
        per_cell = np.zeros(frame.J)
        per_cell[self.cell_index] = self.cell_weights
        return per_cell[frame.unit_cell]

    def to_table(self, frame: CellFrame) -> pd.DataFrame:
        if self.cell_weights is None:
            raise ContractError(f"{self.method} weights are unit-level; no cell table")
        idx = self.cell_index
        return pd.DataFrame(
            {
                "cell_id": [frame.cell_id(j) for j in idx],
                "method": self.method,
                "weight": self.cell_weights,
                "n_j": frame.n[idx],
                "N_j": frame.N[idx],
            }
        )


@dataclass
class ShrinkageReport:
    """Per-cell posterior-mean pooling factors; summaries cover occupied cells."""

    cell_index: np.ndarray
    factors: np.ndarray
    occupied: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.factors[self.occupied].mean()) if self.occupied.any() else float("nan")

    @property
    def min(self) -> float:
        return float(self.factors[self.occupied].min()) if self.occupied.any() else float("nan")

    @property
    def max(self) -> float:
        return float(self.factors[self.occupied].max()) if self.occupied.any() else float("nan")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "min": self.min, "max": self.max}


# ----------------------------------------------------------- closed forms
def equivalent_weight(N, n, N_j, n_j, sigma_y_sq, sigma_theta_sq):
    """Equivalent cell weight as a single fraction.

    ``(N sy2 + n N_j st2) / (N sy2 + N n_j st2)``; broadcasts over arrays.
    """
    Nsy2 = N * sigma_y_sq
    return (Nsy2 + n * N_j * sigma_theta_sq) / (Nsy2 + N * n_j * sigma_theta_sq)


def shrinkage_factor(n_j, sigma_y_sq, sigma_theta_sq):
    """Pooling factor ``1 / (1 + n_j st2 / sy2)``; 1 is complete pooling."""
    return 1.0 / (1.0 + n_j * sigma_theta_sq / sigma_y_sq)


def equivalent_weight_two_term(N, n, N_j, n_j, sigma_y_sq, sigma_theta_sq):
    """Equivalent cell weight as a mix of poststratification and pooling.

    ``(1 - s) * (N_j/N)/(n_j/n) + s * 1`` with ``s`` the pooling factor;
    requires ``n_j > 0``.
    """
    s = shrinkage_factor(n_j, sigma_y_sq, sigma_theta_sq)
    return (1.0 - s) * ((N_j / N) / (n_j / n)) + s


def _usable(frame: CellFrame, what: str) -> np.ndarray:
    """Cells that can carry a weight: sampled and present in the population."""
    usable = (frame.n > 0) & (frame.N > 0)
    sample_only = (frame.n > 0) & (frame.N <= 0)
    if sample_only.any():
        ids = [frame.cell_id(j) for j in np.flatnonzero(sample_only)[:3]]
        warnings.warn(
            f"{what}: {int(sample_only.sum())} sample-only cell(s) excluded (e.g. {ids})",
            ExcludedCellWarning,
            stacklevel=3,
        )
    if not usable.any():
        raise InputError(f"{what}: no cell has both sample and population units")
    return np.flatnonzero(usable)


def normalize(cell_weights, n_j) -> np.ndarray:
    """Divide by ``sum (n_j/n) w_j`` so the unit-average weight is 1."""
    w = np.asarray(cell_weights, dtype=float)
    n_j = np.asarray(n_j, dtype=float)
    return w / np.sum(n_j / n_j.sum() * w, axis=-1, keepdims=w.ndim > 1)


# ----------------------------------------------------------- model-based
def model_based_cell_weights(
    draws: PosteriorDraws, frame: CellFrame, method: str = MODEL_STRUCTURED, normalized: bool = True
) -> WeightSet:
    """Equivalent weights from posterior draws of ``sigma_y`` and ``sigma_theta_sq``.

    The weight is evaluated per draw, averaged over draws, then normalized.
    Totals ``N`` and ``n`` are summed over the cells that carry weights.
    """
    for col in ("sigma_y", "sigma_theta_sq"):
        if not draws.has(col):
            raise ContractError(f"draws lack the {col!r} column needed for model-based weights")
    idx = _usable(frame, "model-based weights")
    if (frame.n == 0).any():
        log.info("%d empty cell(s) carry no weight", int((frame.n == 0).sum()))
    N_j, n_j = frame.N[idx], frame.n[idx].astype(float)
    sy2 = draws.column("sigma_y")[:, None] ** 2
    st2 = draws.column("sigma_theta_sq")[:, None]
    per_draw = equivalent_weight(N_j.sum(), n_j.sum(), N_j[None, :], n_j[None, :], sy2, st2)
    w = per_draw.mean(axis=0)
    if normalized:
        w = normalize(w, n_j)
    return WeightSet(method, w, idx, normalized=normalized, draws=per_draw)


def shrinkage_factors(draws: PosteriorDraws, frame: CellFrame) -> ShrinkageReport:
    """Posterior-mean pooling factor for every frame cell (1 for empty cells)."""
    for col in ("sigma_y", "sigma_theta_sq"):
        if not draws.has(col):
            raise ContractError(f"draws lack the {col!r} column")
    sy2 = draws.column("sigma_y")[:, None] ** 2
    st2 = draws.column("sigma_theta_sq")[:, None]
    f = shrinkage_factor(frame.n[None, :].astype(float), sy2, st2).mean(axis=0)
    return ShrinkageReport(np.arange(frame.J), f, occupied=frame.n > 0)


# ----------------------------------------------------------- classical
def poststratification_weights(frame: CellFrame, normalized: bool = True) -> WeightSet:
    """``(N_j/N) / (n_j/n)`` over cells with sample and population units.

    ``N`` is the whole population total, so unsampled cells lower every raw
    weight; normalization removes that constant.
    """
    idx = _usable(frame, "poststratification weights")
    N_j, n_j = frame.N[idx], frame.n[idx].astype(float)
    w = (N_j / frame.N.sum()) / (n_j / n_j.sum())
    if normalized:
        w = normalize(w, n_j)
    return WeightSet(POSTSTRATIFICATION, w, idx, normalized=normalized)


def inverse_probability_weights(inclusion_probs) -> WeightSet:
    """``1 / pi_i`` rescaled to average 1."""
    pi = np.asarray(inclusion_probs, dtype=float)
    if pi.size == 0:
        raise InputError("no inclusion probabilities given")
    if np.any(~(pi > 0)) or np.any(pi > 1):
        raise DomainError("inclusion probabilities must lie in (0, 1]")
    w = 1.0 / pi
    return WeightSet(INVERSE_PROBABILITY, unit_weights=w / w.mean(), normalized=True)


def _margin_codes(frame: CellFrame, margin: str) -> tuple[np.ndarray, list[str]]:
    """Category code per frame cell for a margin like ``"age"`` or ``"age:pov"``."""
    names = margin.split(":")
    codes = np.zeros(frame.J, dtype=np.int64)
    labels = [""]
    for name in names:
        var = frame.variable(name)
        codes = codes * len(var.levels) + frame.column(name)
        labels = [f"{a}{SEPARATOR}{b}" if a else b for a in labels for b in var.levels]
    return codes, labels


def population_margins(frame: CellFrame, margins) -> dict[str, np.ndarray]:
    """Population shares per margin category, from the frame's ``N_j``."""
    out = {}
    total = frame.N.sum()
    for m in margins:
        codes, labels = _margin_codes(frame, m)
        out[m] = np.bincount(codes, weights=frame.N, minlength=len(labels)) / total
    return out


def _target_vector(target, labels, margin) -> np.ndarray:
    if isinstance(target, dict):
        unknown = set(target) - set(labels)
        if unknown:
            raise InputError(f"margin {margin!r}: unknown categories {sorted(unknown)[:3]}")
        vec = np.array([float(target.get(lab, 0.0)) for lab in labels])
    else:
        vec = np.asarray(target, dtype=float)
        if vec.shape != (len(labels),):
            raise InputError(f"margin {margin!r}: expected {len(labels)} shares, got {vec.shape}")
    if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-8:
        raise InputError(f"margin {margin!r}: shares must be non-negative and sum to 1")
    return vec


def rake(
    frame: CellFrame,
    targets: dict,
    tolerance: float = 1e-8,
    max_iterations: int = 500,
    normalized: bool = True,
) -> WeightSet:
    """Iterative proportional fitting of cell weights to target margins.

    Parameters
    ----------
    targets : dict
        Margin name (a variable, or ``"a:b"`` for a joint margin) to
        category shares, either a dict keyed by level label (joint labels
        use ``"|"``) or an array in level order (row-major for joints).
    tolerance : float
        Stop once the largest absolute share discrepancy over all margins
        falls below this, checked after each full cycle.  The default keeps
        the Euclidean distance of every raked margin well under ``1e-6``.

    Returns
    -------
    WeightSet
        ``iterations`` counts full cycles; ``converged`` is False when
        ``max_iterations`` ran out (no exception).
    """
    if not targets:
        raise InputError("rake needs at least one target margin")
    idx = np.flatnonzero(frame.n > 0)
    mass = frame.n[idx].astype(float)
    plan = []
    for margin, target in targets.items():
        codes, labels = _margin_codes(frame, margin)
        codes = codes[idx]
        vec = _target_vector(target, labels, margin)
        sample = np.bincount(codes, weights=mass, minlength=len(labels))
        bad = (vec > 0) & (sample <= 0)
        if bad.any():
            cats = [labels[k] for k in np.flatnonzero(bad)[:3]]
            raise InfeasibleMarginError(
                f"margin {margin!r}: categories {cats} have positive target but no sample"
            )
        plan.append((margin, codes, vec, len(labels)))

    w = np.ones(len(idx))
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        for _, codes, vec, k in plan:
            cur = np.bincount(codes, weights=mass * w, minlength=k)
            share = cur / cur.sum()
            factor = np.divide(vec, share, out=np.zeros(k), where=share > 0)
            w = w * factor[codes]
        gap = _max_discrepancy(plan, mass * w)
        if gap < tolerance:
            converged = True
            break
    if not converged:
        log.warning("raking stopped after %d cycles with margin gap %.3g", it, gap)
    if normalized:
        w = normalize(w, mass)
    return WeightSet(
        RAKING, w, idx, normalized=normalized, iterations=it, converged=converged,
        meta={"max_discrepancy": float(gap), "margins": list(targets)},
    )


def _max_discrepancy(plan, weighted) -> float:
    total = weighted.sum()
    gap = 0.0
    for _, codes, vec, k in plan:
        share = np.bincount(codes, weights=weighted, minlength=k) / total
        gap = max(gap, float(np.max(np.abs(share - vec))))
    return gap


# ----------------------------------------------------------- diagnostics
def trim_weights(weights: WeightSet | np.ndarray, lower: float = 0.25, upper: float = 4.0,
                 n_j=None) -> WeightSet:
    """Clamp to ``[lower, upper]`` then renormalize to mean 1.

    For cell weights pass ``n_j`` so the mean is taken over units.
    """
    if not 0 < lower < upper:
        raise InputError("trim bounds need 0 < lower < upper")
    ws = weights if isinstance(weights, WeightSet) else WeightSet("trimmed", unit_weights=np.asarray(weights, float))
    w = np.asarray(ws.values, dtype=float)
    clipped = np.clip(w, lower, upper)
    n_clamped = int(np.sum(clipped != w))
    if n_j is None:
        out = clipped / clipped.mean()
    else:
        out = normalize(clipped, n_j)
    if ws.cell_weights is not None:
        return WeightSet(ws.method, out, ws.cell_index, normalized=True, n_clamped=n_clamped, meta=dict(ws.meta))
    return WeightSet(ws.method, unit_weights=out, normalized=True, n_clamped=n_clamped, meta=dict(ws.meta))


def weight_summary(weights, bins: int = 20) -> dict:
    """sd/mean and max/min ratios plus a histogram of log weights.

    ``weights`` are unit-level (expand cell weights first); sd uses ddof 1.
    """
    w = np.asarray(weights.values if isinstance(weights, WeightSet) else weights, dtype=float)
    if w.size == 0 or np.any(~(w > 0)):
        raise InputError("weight_summary needs positive weights")
    sd = float(w.std(ddof=1)) if w.size > 1 else 0.0
    counts, edges = np.histogram(np.log(w), bins=bins)
    return {
        "n": int(w.size),
        "mean": float(w.mean()),
        "sd_over_mean": sd / float(w.mean()),
        "max_over_min": float(w.max() / w.min()),
        "log_histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }


def weighted_distribution_distance(weights, codes, population_shares) -> float:
    """Euclidean distance between weighted sample shares and population shares.

    Parameters
    ----------
    weights : array (units,)
    codes : int array (units,)
        Joint category code of each unit over the chosen variables.
    population_shares : array (categories,)
    """
    pop = np.asarray(population_shares, dtype=float)
    if pop.ndim != 1 or pop.size == 0:
        raise ContractError("population joint distribution is required")
    w = np.asarray(weights, dtype=float)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= pop.size):
        raise ContractError("category codes fall outside the population distribution")
    share = np.bincount(codes, weights=w, minlength=pop.size) / w.sum()
    return float(np.sqrt(np.sum((share - pop) ** 2)))


def frame_distribution_distance(frame: CellFrame, weights: WeightSet, variables) -> float:
    """Distance over the cross-tab of ``variables`` using cell weights and ``N_j``."""
    margin = ":".join(variables)
    codes, labels = _margin_codes(frame, margin)
    pop = np.bincount(codes, weights=frame.N, minlength=len(labels)) / frame.N.sum()
    if weights.cell_weights is not None:
        per_cell = weights.cell_weights * frame.n[weights.cell_index]
        return weighted_distribution_distance(per_cell, codes[weights.cell_index], pop)
    if frame.unit_cell is None:
        raise ContractError("unit-level weights need a frame built from unit records")
    return weighted_distribution_distance(weights.unit_weights, codes[frame.unit_cell], pop)
