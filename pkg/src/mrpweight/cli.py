"""Command-line entry point: ``mrpweight {fit,weight,estimate,simulate,diagnose}``.

Every command reads one JSON config; ``--seed``, ``--out``, ``--methods``,
``--threads`` and ``--set key=value`` override scalar fields.  The merged
config is written to ``<out>/config.json``.  Exit status is 0 on success,
2 on configuration, schema or input errors and 3 when a fit fails the
convergence gate.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from .cells import (
    CellFrame, DomainError, InputError, SchemaError, VariableSpec, build_cell_frame, domain_mask,
)
from .diagnostics import ess_matrix, split_rhat_matrix
from .estimators import (
    EstimationError, estimates_table, poststratified_prediction, weighted_mean, weighted_mean_cells,
)
from .model import SpecError, enumerate_terms
from .posterior import ContractError, PosteriorDraws
from .sampler import ConfigError, FitQualityError, SamplerConfig, sample_posterior
from .simulation import METHODS, ScenarioError, load_scenario, run_replications
from .weights import (
    MODEL_INDEPENDENT, MODEL_STRUCTURED, InfeasibleMarginError, frame_distribution_distance,
    inverse_probability_weights, model_based_cell_weights, poststratification_weights,
    population_margins, rake, weight_summary,
)

log = logging.getLogger("mrpweight")

EXIT_OK, EXIT_CONFIG, EXIT_FIT = 0, 2, 3
WEIGHT_METHODS = ("Str-W", "Ind-W", "PS-W", "Rake-W", "IP-W")
PREDICTION_METHODS = ("Str-P", "Ind-P")

_USER_ERRORS = (
    ConfigError, ContractError, DomainError, InputError, SchemaError, SpecError, ScenarioError,
    InfeasibleMarginError, FileNotFoundError, json.JSONDecodeError, KeyError,
)


class RunConfigError(ValueError):
    """The run configuration is incomplete or inconsistent."""


# ------------------------------------------------------------------ config
def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, args) -> dict:
    """Merge CLI flags into a copy of ``config``."""
    cfg = json.loads(json.dumps(config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise RunConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise RunConfigError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "out", None):
        cfg["out"] = str(Path(args.out).resolve())
    if getattr(args, "methods", None):
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = int(args.threads)
    return cfg


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise RunConfigError("config must be a JSON object")
    cfg.setdefault("_base", str(Path(path).resolve().parent))
    return cfg


def _path(cfg: dict, key: str) -> Path:
    if key not in cfg:
        raise RunConfigError(f"config lacks {key!r}")
    p = Path(cfg[key])
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def _out_path(cfg: dict) -> Path:
    """Output directory; a relative path in a config file is taken from the file's directory."""
    out = Path(cfg.get("out") or "mrpweight-out")
    return out if out.is_absolute() else Path(cfg.get("_base", ".")) / out


def _out_dir(cfg: dict) -> Path:
    out = _out_path(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: dict, out: Path) -> None:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    (out / "config.json").write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_seed(cfg: dict) -> int:
    if "seed" not in cfg:
        raise RunConfigError("a seed is required (config 'seed' or --seed)")
    return int(cfg["seed"])


def _discretize(table: pd.DataFrame, var: dict, label: str) -> pd.DataFrame:
    """Apply configured cut points: ``levels[k]`` covers ``(cuts[k-1], cuts[k]]``."""
    column = var.get("column", var["name"])
    if column not in table.columns:
        raise SchemaError(f"{label} table is missing column {column!r}")
    if "cuts" not in var:
        if column != var["name"]:
            table = table.assign(**{var["name"]: table[column]})
        return table
    cuts = [float(c) for c in var["cuts"]]
    if len(cuts) != len(var["levels"]) - 1:
        raise RunConfigError(f"variable {var['name']!r}: need len(levels) - 1 cut points")
    x = pd.to_numeric(table[column], errors="coerce")
    if x.isna().any():
        raise InputError(f"{label} column {column!r} has non-numeric values to discretize")
    codes = np.searchsorted(np.asarray(cuts), x.to_numpy(float), side="left")
    return table.assign(**{var["name"]: np.asarray(var["levels"], dtype=object)[codes]})


def build_inputs(cfg: dict):
    """Read the configured tables and build ``(variables, sample, frame)``."""
    if not cfg.get("variables"):
        raise RunConfigError("config lacks 'variables'")
    variables = tuple(VariableSpec(v["name"], tuple(v["levels"])) for v in cfg["variables"])
    sample = pd.read_csv(_path(cfg, "sample"), float_precision="round_trip")
    outcome = cfg.get("outcome", "y")
    if "population_counts" in cfg:
        population = pd.read_csv(_path(cfg, "population_counts"), float_precision="round_trip")
        count = cfg.get("count_column", "N")
    else:
        population = pd.read_csv(_path(cfg, "population"), float_precision="round_trip")
        count = None
    for v in cfg["variables"]:
        sample = _discretize(sample, v, "sample")
        population = _discretize(population, v, "population")
    frame = build_cell_frame(
        sample, population, variables, outcome=outcome, count=count,
        weight=cfg.get("population_weight"), cells=cfg.get("cells", "full"),
    )
    return variables, sample, frame


def model_spec(cfg: dict, variables, prior: str | None = None):
    model = cfg.get("model", {})
    terms = model.get("terms") or [v.name for v in variables]
    priors = {k: float(model[k]) for k in ("intercept_scale", "sigma_scale", "sigma_y_scale") if k in model}
    return enumerate_terms(variables, terms, prior or model.get("prior", "structured"), **priors)


def sampler_config(cfg: dict) -> SamplerConfig:
    d = dict(cfg.get("sampler", {}))
    d["seed"] = _require_seed(cfg)
    if "threads" in cfg:
        d["threads"] = int(cfg["threads"])
    return SamplerConfig.from_dict(d)


def _methods(cfg: dict, allowed, default) -> list[str]:
    methods = cfg.get("methods") or list(default)
    bad = [m for m in methods if m not in allowed]
    if bad:
        raise RunConfigError(f"unknown method(s) {bad}; choose from {list(allowed)}")
    return list(methods)


def _draws_path(cfg: dict, prior: str) -> Path:
    key = "draws" if prior == "structured" else "draws_independent"
    if key in cfg:
        return _path(cfg, key)
    name = "draws.csv" if prior == "structured" else "draws_independent.csv"
    return _out_path(cfg) / name


def _load_draws(cfg: dict, frame: CellFrame, prior: str) -> PosteriorDraws:
    path = _draws_path(cfg, prior)
    if not path.exists():
        raise RunConfigError(f"no {prior} draws at {path}; run 'fit' first")
    draws = PosteriorDraws.from_csv(path)
    missing = [c for c in frame.cell_ids if not draws.has(f"theta[{c}]")]
    if missing:
        raise ContractError(f"draws do not match the configured frame (no theta for cell {missing[0]!r})")
    return draws


# ---------------------------------------------------------------- commands
def _diagnostics_table(diag) -> pd.DataFrame:
    return pd.DataFrame({"parameter": diag.names, "rhat": diag.rhat, "ess": diag.ess})


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    variables, _, frame = build_inputs(cfg)
    config = sampler_config(cfg)
    _echo_config(cfg, out)
    priors = cfg.get("fit_priors") or [cfg.get("model", {}).get("prior", "structured")]
    status = EXIT_OK
    for prior in priors:
        spec = model_spec(cfg, variables, prior)
        suffix = "" if prior == "structured" else f"_{prior}"
        try:
            draws, diag = sample_posterior(frame, spec, config)
        except FitQualityError as exc:
            log.error("%s fit failed the convergence gate: %s", prior, exc)
            draws, diag, status = exc.draws, exc.diagnostics, EXIT_FIT
        draws.to_csv(out / f"draws{suffix}.csv")
        _diagnostics_table(diag).to_csv(out / f"diagnostics{suffix}.csv", index=False, float_format="%.10g")
        report = diag.to_dict()
        report.update({"prior": prior, "seed": config.seed, "worst": diag.worst(5)})
        (out / f"diagnostics{suffix}.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        theta = draws.theta(frame)
        lo, hi = np.quantile(theta, [0.025, 0.975], axis=0)
        pd.DataFrame({
            "cell_id": frame.cell_ids, "n_j": frame.n, "N_j": frame.N,
            "mean": theta.mean(axis=0), "sd": theta.std(axis=0, ddof=1), "q2.5": lo, "q97.5": hi,
        }).to_csv(out / f"theta{suffix}.csv", index=False, float_format="%.10g")
        print(f"{prior}: max R-hat {diag.max_rhat:.4f}, min ESS {diag.min_ess:.0f}, "
              f"{diag.divergences} divergence(s)")
    return status


def compute_weights(cfg: dict, frame: CellFrame, sample: pd.DataFrame, methods) -> dict:
    """Weight sets keyed by short method name."""
    out = {}
    wcfg = cfg.get("weights", {})
    for m in methods:
        if m == "Str-W":
            out[m] = model_based_cell_weights(_load_draws(cfg, frame, "structured"), frame, MODEL_STRUCTURED)
        elif m == "Ind-W":
            out[m] = model_based_cell_weights(_load_draws(cfg, frame, "independent"), frame, MODEL_INDEPENDENT)
        elif m == "PS-W":
            out[m] = poststratification_weights(frame)
        elif m == "Rake-W":
            margins = wcfg.get("rake_margins") or list(frame.names)
            out[m] = rake(frame, population_margins(frame, margins))
        elif m == "IP-W":
            col = wcfg.get("inclusion_column")
            if not col or col not in sample.columns:
                raise RunConfigError("IP-W needs weights.inclusion_column naming a sample column")
            out[m] = inverse_probability_weights(sample[col].to_numpy(float))
    return out


def _distance_sets(cfg: dict, names) -> list[list[str]]:
    sets = cfg.get("weights", {}).get("distance_variables")
    if sets:
        return [list(s) for s in sets]
    combos = [[n] for n in names]
    for k in range(2, len(names) + 1):
        combos.extend(list(c) for c in itertools.combinations(names, k))
    return combos


def cmd_weight(cfg: dict) -> int:
    out = _out_dir(cfg)
    _, sample, frame = build_inputs(cfg)
    methods = _methods(cfg, WEIGHT_METHODS, ("Str-W", "PS-W", "Rake-W"))
    _echo_config(cfg, out)
    sets = compute_weights(cfg, frame, sample, methods)
    summary, dist = {}, []
    for m, ws in sets.items():
        if ws.cell_weights is not None:
            ws.to_table(frame).assign(method=m).to_csv(out / f"weights_{m}.csv", index=False, float_format="%.17g")
            normalizer = float(np.sum(frame.n[ws.cell_index] / frame.n_total * ws.cell_weights))
            units = ws.expand(frame)
            units = units[units > 0]
        else:
            pd.DataFrame({"unit": np.arange(len(ws.unit_weights)), "method": m, "weight": ws.unit_weights}).to_csv(
                out / f"weights_{m}.csv", index=False, float_format="%.17g")
            normalizer = float(np.mean(ws.unit_weights))
            units = ws.unit_weights
        s = weight_summary(units)
        summary[m] = {"n": s["n"], "mean": s["mean"], "sd/mean": s["sd_over_mean"],
                      "max/min": s["max_over_min"], "normalizer": normalizer}
        for variables in _distance_sets(cfg, list(frame.names)):
            dist.append({"method": m, "variables": "*".join(variables),
                         "distance": frame_distribution_distance(frame, ws, variables)})
    table = pd.DataFrame(summary)
    table.index.name = "statistic"
    table.to_csv(out / "weights_summary.csv", float_format="%.10g")
    pd.DataFrame(dist).to_csv(out / "weights_distance.csv", index=False, float_format="%.10g")
    print(table.to_string(float_format=lambda x: f"{x:.4g}"))
    return EXIT_OK


def cmd_estimate(cfg: dict) -> int:
    out = _out_dir(cfg)
    _, sample, frame = build_inputs(cfg)
    methods = _methods(cfg, PREDICTION_METHODS + WEIGHT_METHODS, ("Str-P", "Str-W", "PS-W"))
    _echo_config(cfg, out)
    domains = cfg.get("domains") or {"all": "all"}
    masks = [domain_mask(frame, pred, name) for name, pred in domains.items()]
    draws = {}
    for m in methods:
        if m in PREDICTION_METHODS:
            prior = "structured" if m == "Str-P" else "independent"
            draws[m] = _load_draws(cfg, frame, prior)
    sets = compute_weights(cfg, frame, sample, [m for m in methods if m in WEIGHT_METHODS])
    rows, errors = [], []
    for mask in masks:
        for m in methods:
            try:
                if m in PREDICTION_METHODS:
                    e = poststratified_prediction(draws[m], frame, mask, method=m)
                elif sets[m].cell_weights is not None:
                    e = weighted_mean_cells(frame, sets[m], mask, method=m)
                else:
                    inside = np.isin(frame.unit_cell, mask.index)
                    e = weighted_mean(frame.unit_y[inside], sets[m].unit_weights[inside], m, mask.name)
                rows.append(e)
                errors.append("")
            except (EstimationError, DomainError) as exc:
                rows.append(None)
                errors.append(f"{mask.name}|{m}|{exc}")
    table = estimates_table([e for e in rows if e is not None])
    failed = [err.split("|", 2) for err in errors if err]
    if failed:
        extra = pd.DataFrame(
            [{"domain": d, "method": m, "est": np.nan, "se": np.nan, "lo95": np.nan, "hi95": np.nan,
              "error": msg} for d, m, msg in failed])
        table = pd.concat([table.assign(error=""), extra], ignore_index=True)
    else:
        table = table.assign(error="")
    table.to_csv(out / "estimates.csv", index=False, float_format="%.12g")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    scenario = load_scenario(cfg["scenario"])
    overrides = {}
    if "seed" in cfg:
        overrides["seed"] = int(cfg["seed"])
    if "replications" in cfg:
        overrides["replications"] = int(cfg["replications"])
    if "sampler" in cfg:
        overrides["sampler"] = {**scenario.sampler, **cfg["sampler"]}
    if overrides:
        scenario = scenario.with_overrides(**overrides)
    methods = _methods(cfg, METHODS, METHODS)
    out = _out_dir(cfg)
    echo = dict(cfg)
    echo["scenario_resolved"] = scenario.to_dict()
    _echo_config(echo, out)
    metrics = run_replications(scenario, methods, threads=int(cfg.get("threads", 1)), progress=True)
    metrics.to_csv(out / "metrics.csv")
    summary = metrics.summary_text()
    weights = [m for m in ("Str-W", "Ind-W", "PS-W", "Rake-W", "IP-W") if m in methods]
    if weights:
        lines = ["", "weight sd/mean (mean over replications)"]
        for m in weights:
            x = metrics.weight_stat(m)
            lines.append(f"  {m:<7} {np.nanmean(x):8.4f}" if np.isfinite(x).any() else f"  {m:<7}      n/a")
        summary += "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    records = [{k: v for k, v in r.items() if k != "seconds"} for r in metrics.records]
    (out / "records.json").write_text(json.dumps(records, indent=1, default=float) + "\n", encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    path = _path(cfg, "draws") if "draws" in cfg else _out_path(cfg) / "draws.csv"
    if not path.exists():
        raise RunConfigError(f"no draws at {path}")
    draws = PosteriorDraws.from_csv(path)
    if draws.n_chains < 2:
        raise ConfigError("diagnostics need at least 2 chains")
    names = [n for n in draws.names if n != "sigma_theta_sq"]
    x = draws.by_chain(names)
    keep = np.ptp(x.reshape(-1, len(names)), axis=0) > 0
    names = [n for n, k in zip(names, keep) if k]
    x = x[:, :, keep]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rhat = split_rhat_matrix(x, names=names)
        ess = ess_matrix(x, names=names)
    table = pd.DataFrame({"parameter": names, "rhat": rhat, "ess": ess})
    out = _out_dir(cfg)
    table.to_csv(out / "diagnose.csv", index=False, float_format="%.10g")
    threshold = float(cfg.get("sampler", {}).get("rhat_threshold", 1.05))
    worst = table.sort_values("rhat", ascending=False).head(5)
    print(worst.to_string(index=False))
    bad = int((table.rhat > threshold).sum())
    if bad:
        print(f"{bad} parameter(s) exceed R-hat {threshold}", file=sys.stderr)
        return EXIT_FIT
    print(f"all {len(table)} parameters have R-hat <= {threshold}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "weight": cmd_weight,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrpweight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "simulate" and name != "diagnose",
                       help="run config (JSON); for simulate, a scenario name or file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--methods", help="comma-separated method tags")
        p.add_argument("--threads", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted keys, JSON values)")
        if name == "simulate":
            p.add_argument("--replications", type=int)
        if name == "diagnose":
            p.add_argument("--draws", help="draws CSV (default <out>/draws.csv)")
    return parser


def _simulate_config(args) -> dict:
    if not args.config:
        raise RunConfigError("simulate needs --config (scenario name, scenario file or run config)")
    path = Path(args.config)
    cfg = {}
    if path.suffix == ".json" and path.exists():
        raw = json.loads(path.read_text(encoding="utf-8"))
        if "scenario" in raw:
            cfg = raw
            base = path.resolve().parent
            cfg["_base"] = str(base)
            if str(raw["scenario"]).endswith(".json") and not Path(raw["scenario"]).is_absolute():
                cfg["scenario"] = str(base / raw["scenario"])
        else:
            cfg = {"scenario": str(path)}
    else:
        cfg = {"scenario": args.config}
    if args.replications is not None:
        cfg["replications"] = args.replications
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            cfg = _simulate_config(args)
        elif args.command == "diagnose" and not args.config:
            cfg = {}
        else:
            cfg = load_config(args.config)
        if args.command == "diagnose" and args.draws:
            cfg["draws"] = str(Path(args.draws).resolve())
        cfg = apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg)
    except FitQualityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (RunConfigError, *_USER_ERRORS) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
