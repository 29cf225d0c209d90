"""Poststratification frame: cross-tabulated weighting variables joined to
population counts and sample cell summaries."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SEPARATOR = "|"


class SchemaError(ValueError):
    """Input table does not match the declared variables."""


class InputError(ValueError):
    """Input table is empty or carries invalid values."""


class DomainError(ValueError):
    """Domain predicate is invalid or selects no cells."""


class SampleOnlyCellWarning(UserWarning):
    """Sample units fall in cells with no population mass."""


@dataclass(frozen=True)
class VariableSpec:
    """A discretized weighting variable with ordered level labels."""

    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        levels = tuple(str(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 2:
            raise SchemaError(f"variable {self.name!r} needs at least 2 levels")
        if len(set(levels)) != len(levels):
            raise SchemaError(f"variable {self.name!r} has duplicate level labels")
        if any(SEPARATOR in v for v in levels):
            raise SchemaError(
                f"variable {self.name!r}: level labels may not contain {SEPARATOR!r}"
            )

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def encode(self, values: Sequence, row_offset: int = 0, table: str = "table") -> np.ndarray:
        lookup = {v: i for i, v in enumerate(self.levels)}
        out = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            code = lookup.get(str(v))
            if code is None:
                raise SchemaError(
                    f"{table} row {i + row_offset}, column {self.name!r}: "
                    f"unknown category {v!r}"
                )
            out[i] = code
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariableSpec":
        return cls(d["name"], tuple(d["levels"]))

    def to_dict(self) -> dict:
        return {"name": self.name, "levels": list(self.levels)}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CellFrame:
    """Joined population/sample poststratification table.

    Rows are cells, ordered by their position in the full cross-product of
    the variables (first variable varies slowest).  ``unit_cell`` and
    ``unit_y`` keep the sample rows so unit-level weights can be expanded.
    """

    variables: tuple[VariableSpec, ...]
    codes: np.ndarray
    N: np.ndarray
    n: np.ndarray
    y_bar: np.ndarray
    s: np.ndarray
    unit_cell: np.ndarray | None = None
    unit_y: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        for name in ("codes", "N", "n", "y_bar", "s", "unit_cell", "unit_y"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _readonly(np.asarray(value)))
        shape = tuple(v.n_levels for v in self.variables)
        full = np.ravel_multi_index(tuple(self.codes.T), shape) if len(self.codes) else np.empty(0, int)
        if np.any(np.diff(full) <= 0):
            raise SchemaError("cells must be unique and in cross-product order")
        object.__setattr__(self, "_full_index", _readonly(full))
        if np.any(self.N < 0):
            raise InputError("population counts must be nonnegative")
        if self.n_total > 0 and self.n_total > self.N_total + 1e-9 * max(self.N_total, 1.0):
            warnings.warn("sample size exceeds population size", stacklevel=2)

    # ------------------------------------------------------------------ sizes
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(v.n_levels for v in self.variables)

    @property
    def J(self) -> int:
        return len(self.N)

    @property
    def N_total(self) -> float:
        return float(self.N.sum())

    @property
    def n_total(self) -> int:
        return int(self.n.sum())

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def occupied(self) -> np.ndarray:
        return self.n > 0

    @property
    def sample_only(self) -> np.ndarray:
        """Cells with sample units but no population mass."""
        return (self.n > 0) & (self.N <= 0)

    @property
    def ss(self) -> np.ndarray:
        """Within-cell sum of squared deviations from the cell mean."""
        return np.where(self.n > 1, (self.n - 1) * self.s**2, 0.0)

    @property
    def is_full(self) -> bool:
        return self.J == int(np.prod(self.shape))

    def variable(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise SchemaError(f"unknown variable {name!r}")

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.names.index(name)]

    @property
    def cell_ids(self) -> list[str]:
        return [self.cell_id(j) for j in range(self.J)]

    def cell_id(self, j: int) -> str:
        return SEPARATOR.join(self.level_labels(j))

    def level_labels(self, j: int) -> tuple[str, ...]:
        return tuple(v.levels[c] for v, c in zip(self.variables, self.codes[j]))

    def index_of(self, codes: np.ndarray) -> np.ndarray:
        """Row index of each code tuple (``-1`` when the cell is absent)."""
        codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
        full = np.ravel_multi_index(tuple(codes.T), self.shape)
        pos = np.searchsorted(self._full_index, full)
        pos = np.minimum(pos, max(self.J - 1, 0))
        hit = self._full_index[pos] == full if self.J else np.zeros(len(full), bool)
        return np.where(hit, pos, -1)

    def parse_cell_id(self, cell_id: str) -> int:
        labels = cell_id.split(SEPARATOR)
        if len(labels) != len(self.variables):
            raise SchemaError(f"malformed cell id {cell_id!r}")
        codes = [v.encode([lab], table="cell id")[0] for v, lab in zip(self.variables, labels)]
        j = int(self.index_of(np.array(codes))[0])
        if j < 0:
            raise SchemaError(f"cell {cell_id!r} not in frame")
        return j

    # -------------------------------------------------------- serialization
    def to_table(self) -> pd.DataFrame:
        data = {v.name: [v.levels[c] for c in self.codes[:, k]] for k, v in enumerate(self.variables)}
        table = pd.DataFrame(data)
        table.insert(0, "cell_id", self.cell_ids)
        table["N"] = self.N
        table["n"] = self.n
        table["y_bar"] = self.y_bar
        table["s"] = self.s
        return table

    @classmethod
    def from_table(cls, table: pd.DataFrame, variables: Sequence[VariableSpec]) -> "CellFrame":
        variables = tuple(variables)
        codes = np.column_stack([v.encode(table[v.name].astype(str).tolist()) for v in variables])
        order = np.argsort(np.ravel_multi_index(tuple(codes.T), tuple(v.n_levels for v in variables)))
        t = table.iloc[order]
        return cls(
            variables,
            codes[order],
            t["N"].to_numpy(float),
            t["n"].to_numpy(np.int64),
            t["y_bar"].to_numpy(float),
            t["s"].to_numpy(float),
        )

    def same_cells(self, other: "CellFrame") -> bool:
        """Cell-level equality (units are not compared)."""
        return (
            self.variables == other.variables
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.N, other.N)
            and np.array_equal(self.n, other.n)
            and np.array_equal(self.y_bar, other.y_bar, equal_nan=True)
            and np.array_equal(self.s, other.s)
        )

    # ------------------------------------------------------------ coarsen
    def coarsen(self, name: str, groups: Mapping[str, Iterable[str]]) -> "CellFrame":
        """Merge levels of one variable according to a partition.

        ``groups`` maps each new level label to the old labels it absorbs.
        Population and sample counts of merged cells are summed; cell means
        and standard deviations are pooled exactly.
        """
        k = self.names.index(name)
        old = self.variables[k]
        new_levels = tuple(groups)
        mapping = np.full(old.n_levels, -1)
        for g, members in enumerate(groups.values()):
            for lab in members:
                mapping[old.levels.index(str(lab))] = g
        if np.any(mapping < 0) or sum(len(list(m)) for m in groups.values()) != old.n_levels:
            raise SchemaError("groups must partition the levels")
        variables = list(self.variables)
        variables[k] = VariableSpec(old.name, new_levels)
        codes = self.codes.copy()
        codes[:, k] = mapping[codes[:, k]]
        shape = tuple(v.n_levels for v in variables)
        full = np.ravel_multi_index(tuple(codes.T), shape)
        uniq, inverse = np.unique(full, return_inverse=True)
        m = len(uniq)
        N = np.bincount(inverse, weights=self.N, minlength=m)
        n = np.bincount(inverse, weights=self.n, minlength=m).astype(np.int64)
        sum_y = np.bincount(inverse, weights=np.where(self.n > 0, self.n * np.nan_to_num(self.y_bar), 0.0), minlength=m)
        with np.errstate(invalid="ignore", divide="ignore"):
            y_bar = np.where(n > 0, sum_y / n, np.nan)
        dev = np.where(self.n > 0, self.n * (np.nan_to_num(self.y_bar) - y_bar[inverse]) ** 2, 0.0)
        ss = np.bincount(inverse, weights=self.ss + dev, minlength=m)
        s = np.where(n > 1, np.sqrt(ss / np.maximum(n - 1, 1)), 0.0)
        new_codes = np.column_stack(np.unravel_index(uniq, shape))
        unit_cell = inverse[self.unit_cell] if self.unit_cell is not None else None
        return CellFrame(tuple(variables), new_codes, N, n, y_bar, s, unit_cell, self.unit_y)


@dataclass(frozen=True)
class DomainMask:
    """Resolved domain: the set of frame cells satisfying a predicate."""

    name: str
    index: np.ndarray
    cell_ids: tuple[str, ...]

    def __len__(self):
        return len(self.index)

    def contains(self, frame_index: np.ndarray) -> np.ndarray:
        return np.isin(frame_index, self.index)


def _encode_table(table: pd.DataFrame, variables: Sequence[VariableSpec], label: str) -> np.ndarray:
    missing = [v.name for v in variables if v.name not in table.columns]
    if missing:
        raise SchemaError(f"{label} table is missing column(s): {', '.join(missing)}")
    if len(table) == 0:
        return np.empty((0, len(variables)), dtype=np.int64)
    return np.column_stack(
        [v.encode(table[v.name].astype(str).tolist(), table=label) for v in variables]
    )


def build_cell_frame(
    sample: pd.DataFrame,
    population: pd.DataFrame,
    variables: Sequence[VariableSpec],
    outcome: str = "y",
    weight: str | None = None,
    count: str | None = None,
    cells: str = "full",
) -> CellFrame:
    """Cross-tabulate the sample and population into a :class:`CellFrame`.

    Parameters
    ----------
    sample : DataFrame
        Unit-level survey rows with one string column per variable and a
        numeric outcome column.
    population : DataFrame
        Either unit-level rows (optionally with a person-weight column named
        by ``weight``) or pre-aggregated counts in the column named by
        ``count``.
    variables : sequence of VariableSpec
    cells : {"full", "observed"}
        ``"full"`` keeps the whole cross-product; ``"observed"`` keeps only
        cells with population or sample mass.
    """
    variables = tuple(variables)
    if len(sample) == 0:
        raise InputError("sample table is empty")
    if outcome not in sample.columns:
        raise SchemaError(f"sample table is missing outcome column {outcome!r}")
    shape = tuple(v.n_levels for v in variables)
    J_full = int(np.prod(shape))

    s_codes = _encode_table(sample, variables, "sample")
    y = pd.to_numeric(sample[outcome], errors="coerce").to_numpy(float)
    if np.any(~np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise InputError(f"sample row {bad}, column {outcome!r}: outcome is not a finite number")
    s_full = np.ravel_multi_index(tuple(s_codes.T), shape)

    p_codes = _encode_table(population, variables, "population")
    if count is not None:
        if count not in population.columns:
            raise SchemaError(f"population table is missing count column {count!r}")
        mass = pd.to_numeric(population[count], errors="coerce").to_numpy(float)
    elif weight is not None:
        if weight not in population.columns:
            raise SchemaError(f"population table is missing weight column {weight!r}")
        mass = pd.to_numeric(population[weight], errors="coerce").to_numpy(float)
    else:
        mass = np.ones(len(population))
    if np.any(~np.isfinite(mass)) or np.any(mass < 0):
        raise InputError("population counts/weights must be finite and nonnegative")
    p_full = np.ravel_multi_index(tuple(p_codes.T), shape) if len(p_codes) else np.empty(0, int)

    if cells == "full":
        keep = np.arange(J_full)
    elif cells == "observed":
        keep = np.union1d(np.unique(s_full), np.unique(p_full[mass > 0]))
    else:
        raise ValueError(f"cells must be 'full' or 'observed', got {cells!r}")
    pos = np.searchsorted(keep, s_full)
    ppos = np.searchsorted(keep, p_full)
    inside = ppos < len(keep)
    inside[inside] = keep[ppos[inside]] == p_full[inside]
    m = len(keep)

    N = np.bincount(ppos[inside], weights=mass[inside], minlength=m)
    n = np.bincount(pos, minlength=m).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        y_bar = np.bincount(pos, weights=y, minlength=m) / n
    y_bar[n == 0] = np.nan
    resid = y - y_bar[pos]
    ss = np.bincount(pos, weights=resid**2, minlength=m)
    s = np.where(n > 1, np.sqrt(ss / np.maximum(n - 1, 1)), 0.0)
    codes = np.column_stack(np.unravel_index(keep, shape)).astype(np.int64)

    frame = CellFrame(variables, codes, N, n, y_bar, s, pos, y)
    flagged = frame.sample_only
    if flagged.any():
        msg = (
            f"{int(flagged.sum())} sample cell(s) with {int(frame.n[flagged].sum())} unit(s) "
            "have no population mass; they are excluded from poststratified totals"
        )
        log.warning(msg)
        warnings.warn(msg, SampleOnlyCellWarning, stacklevel=2)
    return frame


Predicate = Callable[[Mapping[str, str]], bool] | Mapping | str | None


def _dict_predicate(frame: CellFrame, where: Mapping) -> np.ndarray:
    keep = np.ones(frame.J, dtype=bool)
    for name, rule in where.items():
        var = frame.variable(name)
        negate = False
        if isinstance(rule, Mapping):
            if set(rule) != {"not"}:
                raise DomainError(f"unsupported rule for {name!r}: {rule!r}")
            rule, negate = rule["not"], True
        if isinstance(rule, str):
            rule = [rule]
        bad = [lab for lab in rule if str(lab) not in var.levels]
        if bad:
            raise DomainError(f"variable {name!r} has no level(s) {bad}")
        codes = [var.levels.index(str(lab)) for lab in rule]
        hit = np.isin(frame.column(name), codes)
        keep &= ~hit if negate else hit
    return keep


def domain_mask(frame: CellFrame, predicate: Predicate = None, name: str | None = None) -> DomainMask:
    """Resolve a predicate over level tuples into a set of frame cells.

    ``predicate`` may be ``None`` or ``"all"`` (every cell), a mapping such as
    ``{"age": ["18-34"], "eth": {"not": ["white"]}}`` (conjunction of level
    memberships), or a callable receiving ``{variable: level}``.
    """
    if predicate is None or (isinstance(predicate, str) and predicate == "all"):
        keep = np.ones(frame.J, dtype=bool)
    elif isinstance(predicate, Mapping):
        try:
            keep = _dict_predicate(frame, predicate)
        except SchemaError as exc:
            raise DomainError(str(exc)) from exc
    elif callable(predicate):
        names = frame.names
        try:
            keep = np.array(
                [bool(predicate(dict(zip(names, frame.level_labels(j))))) for j in range(frame.J)],
                dtype=bool,
            )
        except KeyError as exc:
            raise DomainError(f"predicate references unknown variable {exc}") from exc
    else:
        raise DomainError(f"unsupported predicate {predicate!r}")
    index = np.flatnonzero(keep)
    if len(index) == 0:
        raise DomainError(f"domain {name or predicate!r} selects no cells")
    ids = tuple(frame.cell_id(j) for j in index)
    return DomainMask(name or "domain", index, ids)
