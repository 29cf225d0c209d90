"""Repeated-sampling evaluation of prediction and weighting methods.

A :class:`Scenario` fixes a categorical population, an outcome model and a
logistic selection model.  Each replication draws a sample, runs every
requested method and scores estimates against the finite-population truth.
Randomness comes from ``SeedSequence(seed, spawn_key=...)``: one stream for
the population and one per replication, so results do not depend on the
order in which replications run.
"""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from .cells import CellFrame, DomainMask, VariableSpec, build_cell_frame, domain_mask
from .estimators import (
    EstimationError,
    poststratified_prediction,
    weighted_mean,
    weighted_mean_cells,
)
from .model import enumerate_terms, independent_prior_variant, parse_term
from .sampler import FitQualityError, SamplerConfig, sample_posterior
from .weights import (
    MODEL_INDEPENDENT,
    MODEL_STRUCTURED,
    inverse_probability_weights,
    model_based_cell_weights,
    population_margins,
    poststratification_weights,
    rake,
    shrinkage_factors,
    weight_summary,
)

__all__ = [
    "Scenario",
    "ScenarioError",
    "MetricsTable",
    "METHODS",
    "load_scenario",
    "synthesize_population",
    "apply_selection",
    "run_replications",
    "independent_prior_variant",
]

log = logging.getLogger(__name__)

METHODS = ("Str-P", "Ind-P", "Str-W", "Ind-W", "PS-W", "Rake-W", "IP-W")
PI_CLAMP = 1e-9


class ScenarioError(ValueError):
    """Scenario tables are inconsistent with the declared variables."""


class ClampedProbabilityWarning(UserWarning):
    """Selection probabilities were clamped into (0, 1)."""


# ------------------------------------------------------------------ scenario
def _check_table(variables, table: dict, what: str) -> dict:
    sizes = {v.name: v.n_levels for v in variables}
    out = {}
    for term, coefs in table.get("terms", {}).items():
        names = term.split(":")
        unknown = [n for n in names if n not in sizes]
        if unknown:
            raise ScenarioError(f"{what} term {term!r} references unknown variable(s) {unknown}")
        if len(set(names)) != len(names):
            raise ScenarioError(f"{what} term {term!r} repeats a variable")
        expected = int(np.prod([sizes[n] for n in names]))
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (expected,):
            raise ScenarioError(
                f"{what} term {term!r} needs {expected} coefficients, got {coefs.size}"
            )
        out[term] = coefs
    return out


@dataclass(frozen=True)
class Scenario:
    """Simulation design.

    Attributes
    ----------
    composition : dict
        ``{"margins": {var: shares}}`` for independent categorical margins,
        or ``{"cell_shares": [...]}`` over the full cross-product.
    outcome : dict
        ``{"intercept", "scale", "terms": {term: coefficients}}``.  Joint
        terms list coefficients row-major with the first variable slowest.
    selection : dict
        ``{"intercept", "terms"}`` on the logit scale.
    estimands : dict
        ``{"overall": bool, "marginal": {var: [levels]} or true,
        "domains": {name: predicate}}``.
    model_terms : list of str
        Terms of the estimation model (hierarchy is closed automatically).
    """

    name: str
    variables: tuple[VariableSpec, ...]
    composition: dict
    population_size: int
    outcome: dict
    selection: dict
    estimands: dict
    model_terms: tuple[str, ...]
    replications: int = 50
    seed: int = 0
    sampler: dict = field(default_factory=dict)
    rake_margins: tuple[str, ...] | None = None
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "model_terms", tuple(self.model_terms))
        if self.rake_margins is not None:
            object.__setattr__(self, "rake_margins", tuple(self.rake_margins))
        if self.population_size < 1 or self.replications < 1:
            raise ScenarioError("population_size and replications must be positive")
        if not float(self.outcome.get("scale", 1.0)) > 0:
            raise ScenarioError("outcome error scale must be positive")
        _check_table(self.variables, self.outcome, "outcome")
        _check_table(self.variables, self.selection, "selection")
        self.cell_shares()
        names = {v.name for v in self.variables}
        for term in self.model_terms:
            if not parse_term(term) <= names:
                raise ScenarioError(f"model term {term!r} references unknown variables")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(v.n_levels for v in self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def cell_shares(self) -> np.ndarray:
        """Population share of each full cross-product cell (row-major)."""
        comp = self.composition
        if "cell_shares" in comp:
            p = np.asarray(comp["cell_shares"], dtype=float)
            if p.shape != (int(np.prod(self.shape)),):
                raise ScenarioError("cell_shares must cover the full cross-product")
        elif "margins" in comp:
            p = np.ones(1)
            for v in self.variables:
                m = np.asarray(comp["margins"].get(v.name, []), dtype=float)
                if m.shape != (v.n_levels,):
                    raise ScenarioError(f"composition margin for {v.name!r} needs {v.n_levels} shares")
                p = np.multiply.outer(p, m).ravel()
        else:
            raise ScenarioError("composition needs 'margins' or 'cell_shares'")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
            raise ScenarioError("composition shares must be non-negative and sum to 1")
        return p

    def linear_predictor(self, which: str) -> np.ndarray:
        """Per-cell linear predictor of the outcome or selection model."""
        table = self.outcome if which == "outcome" else self.selection
        coefs = _check_table(self.variables, table, which)
        codes = np.indices(self.shape).reshape(len(self.shape), -1)
        eta = np.full(codes.shape[1], float(table.get("intercept", 0.0)))
        pos = {n: i for i, n in enumerate(self.names)}
        for term, c in coefs.items():
            flat = np.zeros(codes.shape[1], dtype=np.int64)
            for name in term.split(":"):
                flat = flat * self.shape[pos[name]] + codes[pos[name]]
            eta += c[flat]
        return eta

    def cell_means(self) -> np.ndarray:
        return self.linear_predictor("outcome")

    def inclusion_probabilities(self) -> np.ndarray:
        return expit(self.linear_predictor("selection"))

    def expected_sample_size(self) -> float:
        return float(self.population_size * self.cell_shares() @ self.inclusion_probabilities())

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(**{**self.sampler, "seed": int(seed)})

    # ---------------------------------------------------------------- io
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "replications": self.replications,
            "population_size": self.population_size,
            "variables": [v.to_dict() for v in self.variables],
            "composition": self.composition,
            "outcome": self.outcome,
            "selection": self.selection,
            "estimands": self.estimands,
            "model_terms": list(self.model_terms),
            "rake_margins": None if self.rake_margins is None else list(self.rake_margins),
            "sampler": self.sampler,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            return cls(
                name=d["name"],
                variables=[VariableSpec.from_dict(v) for v in d["variables"]],
                composition=d["composition"],
                population_size=int(d["population_size"]),
                outcome=d["outcome"],
                selection=d["selection"],
                estimands=d.get("estimands", {"overall": True}),
                model_terms=d.get("model_terms", []),
                replications=int(d.get("replications", 50)),
                seed=int(d.get("seed", 0)),
                sampler=d.get("sampler", {}),
                rake_margins=d.get("rake_margins"),
                description=d.get("description", ""),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario is missing field {exc.args[0]!r}") from None

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def with_overrides(self, **changes) -> "Scenario":
        return replace(self, **changes)


def load_scenario(name_or_path) -> Scenario:
    """Load a bundled scenario by name (e.g. ``"unbalanced-3var"``) or a JSON path."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return Scenario.from_json(p)
    res = resources.files("mrpweight") / "scenarios" / f"{name_or_path}.json"
    if not res.is_file():
        raise ScenarioError(f"no scenario file or bundled scenario named {name_or_path!r}")
    with res.open(encoding="utf-8") as fh:
        return Scenario.from_dict(json.load(fh))


def calibrate_intercept(scenario: Scenario, expected_n: float) -> float:
    """Selection intercept giving the requested expected sample size."""
    shares = scenario.cell_shares()
    slope_part = scenario.linear_predictor("selection") - float(scenario.selection.get("intercept", 0.0))

    def gap(a):
        return scenario.population_size * shares @ expit(a + slope_part) - expected_n

    return float(brentq(gap, -50.0, 50.0, xtol=1e-12))


# ------------------------------------------------------------------ population
def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


@dataclass
class Population:
    """Synthesized units plus everything reused across replications."""

    scenario: Scenario
    codes: np.ndarray  # (units, variables)
    cell: np.ndarray  # full cross-product index per unit
    y: np.ndarray
    pi: np.ndarray
    counts: np.ndarray  # N_j over the full cross-product
    estimands: list[DomainMask]
    truth: np.ndarray

    def table(self) -> pd.DataFrame:
        """Unit-level table with level labels, outcome and inclusion probability."""
        out = {}
        for k, v in enumerate(self.scenario.variables):
            out[v.name] = pd.Categorical.from_codes(self.codes[:, k], categories=list(v.levels))
        out["y"] = self.y
        out["pi"] = self.pi
        return pd.DataFrame(out)

    def count_table(self) -> pd.DataFrame:
        idx = np.indices(self.scenario.shape).reshape(len(self.scenario.shape), -1)
        out = {v.name: np.asarray(v.levels, dtype=object)[idx[k]] for k, v in enumerate(self.scenario.variables)}
        out["N"] = self.counts
        return pd.DataFrame(out)

    def count_frame(self) -> CellFrame:
        """Frame with population counts only (no sample)."""
        J = len(self.counts)
        codes = np.column_stack(np.unravel_index(np.arange(J), self.scenario.shape))
        return CellFrame(self.scenario.variables, codes, self.counts, np.zeros(J, dtype=np.int64),
                         np.full(J, np.nan), np.zeros(J))


def synthesize_population(scenario: Scenario) -> Population:
    """Draw unit covariates and outcomes ``y = theta_cell + N(0, scale^2)``."""
    rng = _stream(scenario.seed, 0)
    shares = scenario.cell_shares()
    cell = np.sort(rng.choice(len(shares), size=scenario.population_size, p=shares))
    codes = np.column_stack(np.unravel_index(cell, scenario.shape)).astype(np.int64)
    theta = scenario.cell_means()
    y = theta[cell] + float(scenario.outcome.get("scale", 1.0)) * rng.standard_normal(len(cell))
    pi = scenario.inclusion_probabilities()[cell]
    if np.any(pi < PI_CLAMP) or np.any(pi > 1 - PI_CLAMP):
        warnings.warn("selection probabilities clamped to [1e-9, 1 - 1e-9]", ClampedProbabilityWarning, stacklevel=2)
        pi = np.clip(pi, PI_CLAMP, 1 - PI_CLAMP)
    counts = np.bincount(cell, minlength=len(shares)).astype(float)
    pop = Population(scenario, codes, cell, y, pi, counts, [], np.empty(0))
    pop.estimands = _estimand_masks(scenario, pop.count_frame())
    sums = np.bincount(cell, weights=y, minlength=len(shares))
    pop.truth = np.array([sums[m.index].sum() / counts[m.index].sum() for m in pop.estimands])
    return pop


def _estimand_masks(scenario: Scenario, frame: CellFrame) -> list[DomainMask]:
    spec = scenario.estimands
    masks = []
    if spec.get("overall", True):
        masks.append(domain_mask(frame, "all", name="overall"))
    marginal = spec.get("marginal", False)
    if marginal:
        for v in scenario.variables:
            levels = v.levels if marginal is True else marginal.get(v.name, [])
            for lev in levels:
                masks.append(domain_mask(frame, {v.name: [lev]}, name=f"{v.name}={lev}"))
    for name, pred in spec.get("domains", {}).items():
        masks.append(domain_mask(frame, pred, name=name))
    return masks


def apply_selection(population: Population, replication: int) -> tuple[pd.DataFrame, np.ndarray]:
    """Poisson sampling with the unit inclusion probabilities.

    Returns the sample table (labels and ``y``) and the sampled units' ``pi``.
    """
    rng = _stream(population.scenario.seed, 1, int(replication))
    take = rng.random(len(population.y)) < population.pi
    sample = population.table().loc[take, population.scenario.names + ["y"]].reset_index(drop=True)
    for name in population.scenario.names:
        sample[name] = sample[name].astype(str)
    return sample, population.pi[take]


def replication_seed(scenario: Scenario, replication: int) -> int:
    """Sampler seed for one replication, derived from the scenario seed."""
    ss = np.random.SeedSequence(int(scenario.seed), spawn_key=(2, int(replication)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def draw_replication(population: Population, replication: int):
    """Sample, frame and true inclusion probabilities for one replication."""
    sample, pi = apply_selection(population, replication)
    if len(sample) == 0:
        raise EstimationError("selection produced an empty sample")
    frame = build_cell_frame(sample, population.count_table(), population.scenario.variables, count="N")
    return sample, frame, pi


# ------------------------------------------------------------------ methods
def fit_model(frame: CellFrame, scenario: Scenario, prior: str, seed: int, check: bool = True):
    spec = enumerate_terms(scenario.variables, scenario.model_terms, "structured")
    if prior == "independent":
        spec = independent_prior_variant(spec)
    return sample_posterior(frame, spec, scenario.sampler_config(seed), check=check)


def _run_methods(population: Population, replication: int, methods) -> dict:
    scenario = population.scenario
    t0 = time.perf_counter()
    record = {"replication": int(replication), "estimates": {}, "failures": [], "weights": {}, "fits": {}}
    try:
        sample, frame, pi = draw_replication(population, replication)
    except Exception as exc:  # noqa: BLE001 - recorded, not raised
        record["failures"].append({"method": "*", "error": f"{type(exc).__name__}: {exc}"})
        return record
    record["n"] = int(frame.n_total)
    record["occupied"] = int(frame.occupied.sum())
    record["domain_n"] = [int(frame.n[m.index].sum()) for m in population.estimands]
    seed = replication_seed(scenario, replication)

    def score(method, fn):
        out = []
        for m in population.estimands:
            try:
                e = fn(m)
                out.append([e.value, e.se, e.lo95, e.hi95])
            except (EstimationError, ValueError) as exc:
                out.append([math.nan] * 4)
                record["failures"].append({"method": method, "estimand": m.name, "error": str(exc)})
        record["estimates"][method] = out

    for prior, p_name, w_name, w_tag in (
        ("structured", "Str-P", "Str-W", MODEL_STRUCTURED),
        ("independent", "Ind-P", "Ind-W", MODEL_INDEPENDENT),
    ):
        if p_name not in methods and w_name not in methods:
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                draws, diag = fit_model(frame, scenario, prior, seed)
        except FitQualityError as exc:
            record["failures"].append({"method": p_name, "error": str(exc)})
            record["fits"][prior] = {"max_rhat": exc.diagnostics.max_rhat, "divergences": exc.diagnostics.divergences, "ok": False}
            continue
        record["fits"][prior] = {"max_rhat": diag.max_rhat, "divergences": diag.divergences, "ok": True}
        if p_name in methods:
            score(p_name, lambda m: poststratified_prediction(draws, frame, m, method=p_name))
        ws = model_based_cell_weights(draws, frame, method=w_tag)
        record["weights"][w_name] = _weight_stats(ws, frame)
        if prior == "structured":
            record["shrinkage"] = shrinkage_factors(draws, frame).mean
        if w_name in methods:
            score(w_name, lambda m: weighted_mean_cells(frame, ws, m, method=w_name))

    if "PS-W" in methods:
        ws = poststratification_weights(frame)
        record["weights"]["PS-W"] = _weight_stats(ws, frame)
        score("PS-W", lambda m: weighted_mean_cells(frame, ws, m, method="PS-W"))
    if "Rake-W" in methods:
        margins = scenario.rake_margins or tuple(scenario.names)
        ws = rake(frame, population_margins(frame, margins))
        record["weights"]["Rake-W"] = _weight_stats(ws, frame)
        record["rake_converged"] = bool(ws.converged)
        score("Rake-W", lambda m: weighted_mean_cells(frame, ws, m, method="Rake-W"))
    if "IP-W" in methods:
        ws = inverse_probability_weights(pi)
        record["weights"]["IP-W"] = _weight_stats(ws, frame)
        y = frame.unit_y
        cell = frame.unit_cell

        def ipw(m):
            inside = np.isin(cell, m.index)
            return weighted_mean(y[inside], ws.unit_weights[inside], method="IP-W", domain=m.name)

        score("IP-W", ipw)
    record["seconds"] = time.perf_counter() - t0
    return record


def _weight_stats(ws, frame: CellFrame) -> dict:
    summary = weight_summary(ws.expand(frame))
    return {"sd_over_mean": summary["sd_over_mean"], "max_over_min": summary["max_over_min"]}


def _worker(args):
    population, replication, methods = args
    return _run_methods(population, replication, methods)


# ------------------------------------------------------------------ metrics
@dataclass
class MetricsTable:
    """Per estimand x method: |bias|, RMSE, Ave.SD and 95% coverage."""

    table: pd.DataFrame
    records: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")

    def to_csv_string(self) -> str:
        return self.table.to_csv(index=False, float_format="%.12g", lineterminator="\n")

    def get(self, estimand: str, method: str, column: str) -> float:
        t = self.table
        row = t[(t.estimand == estimand) & (t.method == method)]
        if row.empty:
            raise KeyError((estimand, method))
        return float(row[column].iloc[0])

    def weight_stat(self, method: str, key: str = "sd_over_mean") -> np.ndarray:
        return np.array([r["weights"].get(method, {}).get(key, np.nan) for r in self.records])

    def summary_text(self) -> str:
        lines = []
        for est, grp in self.table.groupby("estimand", sort=False):
            lines.append(est)
            for _, r in grp.iterrows():
                lines.append(
                    f"  {r.method:<7} |bias| {r.abs_bias:8.4f}  RMSE {r.rmse:8.4f}  "
                    f"Ave.SD {r.ave_sd:8.4f}  cover {r.coverage:5.2f}  (R={int(r.n_ok)})"
                )
        return "\n".join(lines) + "\n"


def metrics_from_records(records, population: Population, methods) -> MetricsTable:
    """Aggregate replication records into a :class:`MetricsTable`."""
    rows = []
    names = [m.name for m in population.estimands]
    for method in methods:
        est = np.array(
            [r["estimates"].get(method, [[math.nan] * 4] * len(names)) for r in records], dtype=float
        ).reshape(len(records), len(names), 4)
        for k, name in enumerate(names):
            x = est[:, k, :]
            ok = np.isfinite(x[:, 0])
            truth = population.truth[k]
            if not ok.any():
                rows.append([name, method, 0, truth, math.nan, math.nan, math.nan, math.nan])
                continue
            err = x[ok, 0] - truth
            cover = (x[ok, 2] <= truth) & (truth <= x[ok, 3])
            rows.append([
                name, method, int(ok.sum()), truth,
                abs(float(err.mean())),
                float(np.sqrt(np.mean(err**2))),
                float(np.nanmean(x[ok, 1])) if np.isfinite(x[ok, 1]).any() else math.nan,
                float(cover.mean()),
            ])
    table = pd.DataFrame(rows, columns=["estimand", "method", "n_ok", "truth", "abs_bias", "rmse", "ave_sd", "coverage"])
    return MetricsTable(table, list(records))


def run_replications(
    scenario: Scenario,
    methods=METHODS,
    replications: int | None = None,
    threads: int = 1,
    population: Population | None = None,
    progress: bool = False,
) -> MetricsTable:
    """Run ``replications`` (default ``scenario.replications``) and score all methods.

    Replication ``r`` always uses the same random streams, so the first
    ``k`` records of a long run equal a run with ``replications=k``.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ScenarioError(f"unknown method(s) {unknown}; choose from {METHODS}")
    methods = [m for m in METHODS if m in methods]
    R = scenario.replications if replications is None else int(replications)
    population = population or synthesize_population(scenario)
    jobs = [(population, r, methods) for r in range(R)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_worker, jobs))
    else:
        records = []
        for job in jobs:
            records.append(_worker(job))
            if progress:
                r = records[-1]
                log.info("replication %d: n=%s %.1fs failures=%d", r["replication"], r.get("n"),
                         r.get("seconds", 0.0), len(r["failures"]))
    failed = sum(1 for r in records if r["failures"])
    if failed:
        log.warning("%d of %d replications recorded failures", failed, R)
    return metrics_from_records(records, population, methods)
