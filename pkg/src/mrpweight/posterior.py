"""Container for posterior draws with named columns."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cells import CellFrame
from .model import ModelSpec, cell_means, sigma_theta_sq_from_local


class ContractError(ValueError):
    """Required columns are missing or do not match the frame."""


@dataclass
class PosteriorDraws:
    """Draw matrix ``(n_draws, n_columns)`` with chain ids and seed record.

    Columns are ``alpha0``, one ``alpha[term][levels]`` per coefficient, the
    free local scales (``lambda[...]``, ``delta[l]`` or ``tau[term]``),
    ``sigma``, ``sigma_y``, one ``theta[cell_id]`` per frame cell and
    ``sigma_theta_sq``.
    """

    names: list[str]
    values: np.ndarray
    chain: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.chain = np.asarray(self.chain, dtype=np.int64)
        self._pos = {name: k for k, name in enumerate(self.names)}
        if self.values.shape != (len(self.chain), len(self.names)):
            raise ContractError("draw matrix shape does not match names/chains")

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chain))

    def has(self, name: str) -> bool:
        return name in self._pos

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self._pos[name]]
        except KeyError:
            raise ContractError(f"draws have no column {name!r}") from None

    def matrix(self, names) -> np.ndarray:
        missing = [n for n in names if n not in self._pos]
        if missing:
            raise ContractError(f"draws lack column(s) {missing[:3]}")
        return self.values[:, [self._pos[n] for n in names]]

    def prefixed(self, prefix: str) -> list[str]:
        return [n for n in self.names if n.startswith(prefix)]

    def by_chain(self, names=None) -> np.ndarray:
        """Array ``(chains, draws_per_chain, params)`` in chain-id order."""
        cols = self.values if names is None else self.matrix(names)
        chains = np.unique(self.chain)
        per = [cols[self.chain == c] for c in chains]
        length = min(len(p) for p in per)
        return np.stack([p[:length] for p in per])

    def theta(self, frame: CellFrame) -> np.ndarray:
        """Cell-mean draws ``(n_draws, J)`` in frame order."""
        return self.matrix([f"theta[{cid}]" for cid in frame.cell_ids])

    # ---------------------------------------------------------------- io
    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.names)
        df.insert(0, "chain", self.chain)
        df.insert(1, "draw", np.concatenate([np.arange((self.chain == c).sum()) for c in np.unique(self.chain)]))
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, seed: int | None = None) -> "PosteriorDraws":
        df = pd.read_csv(path, float_precision="round_trip")
        if "chain" not in df.columns:
            raise ContractError("draws CSV lacks a 'chain' column")
        chain = df.pop("chain").to_numpy()
        df = df.drop(columns=["draw"], errors="ignore")
        return cls(list(df.columns), df.to_numpy(float), chain, seed=seed)


def assemble_draws(
    q: np.ndarray, chain: np.ndarray, frame: CellFrame, spec: ModelSpec, seed=None, meta=None,
    centered=None,
) -> PosteriorDraws:
    """Map unconstrained draws to named natural-scale columns plus derived
    cell means and exchangeable variance.

    ``centered`` marks coefficients whose coordinate is the coefficient
    itself rather than its standardized value.
    """
    q = np.atleast_2d(q)
    P, S = spec.n_coef, spec.n_scale
    alpha0 = q[:, 0]
    local = np.exp(q[:, 1 + P : 1 + P + S])
    sigma = np.exp(q[:, 1 + P + S])
    sigma_y = np.exp(q[:, 2 + P + S])
    alpha = q[:, 1 : 1 + P] * spec.coefficient_scales(local) * sigma[:, None]
    if centered is not None and np.any(centered):
        cent = np.asarray(centered, dtype=bool)
        alpha[:, cent] = q[:, 1 : 1 + P][:, cent]
    theta = cell_means(alpha, frame, spec, alpha0=alpha0)
    sts = sigma_theta_sq_from_local(local, sigma, spec)
    names = (
        ["alpha0"]
        + spec.coef_names
        + list(spec.scale_names)
        + ["sigma", "sigma_y"]
        + [f"theta[{cid}]" for cid in frame.cell_ids]
        + ["sigma_theta_sq"]
    )
    values = np.column_stack([alpha0, alpha, local, sigma, sigma_y, theta, sts])
    return PosteriorDraws(names, values, chain, seed=seed, meta=dict(meta or {}))
