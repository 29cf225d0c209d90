"""No-U-turn Hamiltonian Monte Carlo on the unconstrained model space.

Multinomial trajectory sampling with the generalized U-turn check, a
diagonal or dense inverse metric estimated in expanding warmup windows, and
dual-averaged step size.  Each chain draws its randomness from
``SeedSequence([seed, chain_id])`` so results do not depend on how chains
are scheduled.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cells import CellFrame
from .diagnostics import ess_matrix, split_rhat_matrix
from .kernels import coefficient_support, kernel_for
from .model import ModelSpec
from .metric import CoefficientBlock, Metric, regularized_covariance, regularized_variance
from .posterior import PosteriorDraws, assemble_draws

log = logging.getLogger(__name__)

UNCONSTRAINED_CAP = 50.0


class ConfigError(ValueError):
    """Invalid sampler configuration."""


class FitQualityError(RuntimeError):
    """Sampling finished but failed the convergence gate.

    The draws and diagnostics are attached so callers can inspect them.
    """

    def __init__(self, message, diagnostics=None, draws=None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.draws = draws


class ScaleCapWarning(UserWarning):
    """A log-scale coordinate hit the +/-50 cap."""


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    seed: int = 0
    target_accept: float = 0.9
    max_treedepth: int = 10
    max_divergences: int | None = None
    rhat_threshold: float = 1.05
    threads: int = 1
    parametrization: str = "noncentered"
    center_threshold: float = 10.0
    metric: str = "diag"

    def __post_init__(self):
        if self.n_chains < 2:
            raise ConfigError("n_chains must be at least 2 (R-hat needs several chains)")
        if self.n_warmup < 0 or self.n_draws < 4:
            raise ConfigError("n_warmup must be >= 0 and n_draws >= 4")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must be in (0, 1)")
        if self.max_treedepth < 1 or self.threads < 1:
            raise ConfigError("max_treedepth and threads must be positive")
        if self.parametrization not in ("auto", "centered", "noncentered"):
            raise ConfigError("parametrization must be 'auto', 'centered' or 'noncentered'")
        if self.metric not in ("diag", "dense", "conditional"):
            raise ConfigError("metric must be 'diag', 'dense' or 'conditional'")

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sampler setting(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray
    ess: np.ndarray
    divergences: int
    step_size: list[float] = field(default_factory=list)
    mean_treedepth: list[float] = field(default_factory=list)
    n_leapfrog: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat)) if len(self.rhat) else 1.0

    @property
    def min_ess(self) -> float:
        return float(np.min(self.ess)) if len(self.ess) else 0.0

    def worst(self, k: int = 10) -> list[tuple[str, float, float]]:
        order = np.argsort(-self.rhat)[:k]
        return [(self.names[i], float(self.rhat[i]), float(self.ess[i])) for i in order]

    def to_dict(self) -> dict:
        return {
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "divergences": self.divergences,
            "step_size": self.step_size,
            "mean_treedepth": self.mean_treedepth,
            "n_leapfrog": self.n_leapfrog,
            "warnings": list(self.warnings),
            "parameters": {
                name: {"rhat": float(r), "ess": float(e)}
                for name, r, e in zip(self.names, self.rhat, self.ess)
            },
        }


# ---------------------------------------------------------------- adaptation
class _DualAveraging:
    def __init__(self, eps0, delta, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept) -> float:
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def _initial_step_size(kernel, q, lp, g, metric, rng, eps=1.0) -> float:
    """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""

    def delta_h(e):
        p = metric.draw(rng)
        H0 = -lp + metric.kinetic(p)
        qq, gg = q.copy(), g.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            new_lp = kernel.leapfrog(qq, p, gg, e, metric)
            H = -new_lp + metric.kinetic(p)
        return H0 - H if math.isfinite(H) else -math.inf

    direction = 1 if delta_h(eps) > math.log(0.8) else -1
    for _ in range(100):
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        d = delta_h(eps)
        if direction == 1 and not d > math.log(0.8):
            break
        if direction == -1 and d > math.log(0.8):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


def window_metric(window: np.ndarray, free: np.ndarray, kind: str) -> Metric:
    """Inverse metric estimated from one adaptation window of draws."""
    d = window.shape[1]
    if kind == "dense":
        inv = np.zeros((d, d))
        inv[np.ix_(free, free)] = regularized_covariance(window[:, free])
        return Metric(inv)
    inv = np.zeros(d)
    inv[free] = regularized_variance(window[:, free])
    return Metric(inv)


def adaptation_windows(n_warmup: int, init_buffer=75, term_buffer=50, base_window=25):
    """End indices (exclusive) of metric-adaptation windows during warmup."""
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append((start, end))
        start = end
        size *= 2
    return ends


def _init_point(kernel, dim, free, fixed_q, rng, y_mean):
    g = np.zeros(dim)
    for _ in range(100):
        q = rng.uniform(-2.0, 2.0, size=dim)
        q[0] += y_mean
        q[~free] = fixed_q[~free]
        lp = kernel.logp_grad(q, g)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    raise FitQualityError("could not find a finite initial point")


def _run_chain(args):
    frame, spec, config, chain_id, fixed_q, free, prior_only, backend, centered = args
    kernel = kernel_for(frame, spec, prior_only=prior_only, backend=backend, centered=centered)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(chain_id)]))
    dim = spec.dim
    occ = frame.n > 0
    y_mean = 0.0 if prior_only or not occ.any() else float(
        np.sum(frame.n[occ] * frame.y_bar[occ]) / frame.n[occ].sum()
    )
    q, lp, g = _init_point(kernel, dim, free, fixed_q, rng, y_mean)
    block = None
    if config.metric == "conditional":
        block = CoefficientBlock(frame, spec, centered, prior_only)
        tail_var = np.ones(dim - 1 - spec.n_coef)
        metric = block.metric(q, tail_var, free)
    else:
        metric = Metric.identity(free)
    eps = _initial_step_size(kernel, q, lp, g, metric, rng)
    da = _DualAveraging(eps, config.target_accept)
    windows = adaptation_windows(config.n_warmup)
    window_ends = {end: start for start, end in windows}
    window_draws = []
    log_slice = slice(1 + spec.n_coef, dim)
    capped = 0
    n_leapfrog = 0

    out = np.empty((config.n_draws, dim))
    divergences = 0
    depths = np.empty(config.n_draws)
    for it in range(config.n_warmup + config.n_draws):
        warm = it < config.n_warmup
        q, lp, g, accept, depth, divergent, n_leap = kernel.transition(
            q, lp, g, eps, metric, rng, config.max_treedepth
        )
        n_leapfrog += n_leap
        tail = q[log_slice]
        if np.any(np.abs(tail) > UNCONSTRAINED_CAP):
            np.clip(tail, -UNCONSTRAINED_CAP, UNCONSTRAINED_CAP, out=tail)
            lp = kernel.logp_grad(q, g)
            capped += 1
        if warm:
            eps = da.update(accept)
            if any(start <= it < end for start, end in windows):
                window_draws.append(q.copy())
            if (it + 1) in window_ends:
                w = np.asarray(window_draws)
                if block is not None:
                    tail = regularized_variance(w[:, 1 + spec.n_coef:])
                    metric = block.metric(w.mean(axis=0), tail, free)
                else:
                    metric = window_metric(w, free, config.metric)
                window_draws = []
                eps = _initial_step_size(kernel, q, lp, g, metric, rng, eps)
                da = _DualAveraging(eps, config.target_accept)
            if it == config.n_warmup - 1:
                eps = da.final
        else:
            k = it - config.n_warmup
            out[k] = q
            depths[k] = depth
            divergences += int(divergent)
    return {
        "draws": out,
        "divergences": divergences,
        "step_size": eps,
        "mean_treedepth": float(depths.mean()),
        "n_leapfrog": n_leapfrog,
        "capped": capped,
    }


def centering_mask(frame: CellFrame, spec: ModelSpec, config: SamplerConfig, prior_only=False) -> np.ndarray:
    """Coefficients to sample on their own scale.

    Standardized (non-centered) coordinates suit coefficients the data say
    little about; coefficients backed by many sample units mix better
    centered.  ``"auto"`` centers those with at least ``center_threshold``
    units behind them.
    """
    if config.parametrization == "noncentered" or prior_only:
        return np.zeros(spec.n_coef, dtype=bool)
    if config.parametrization == "centered":
        return np.ones(spec.n_coef, dtype=bool)
    return coefficient_support(frame, spec) >= config.center_threshold


def fixed_vector(spec: ModelSpec, fixed: dict | None):
    """Translate ``{name: natural value}`` into unconstrained fixed coordinates.

    Names are ``alpha0``, ``sigma``, ``sigma_y`` or any entry of
    ``spec.scale_names``; ``"local"`` fixes every local scale at once.
    """
    free = np.ones(spec.dim, dtype=bool)
    q = np.zeros(spec.dim)
    P, S = spec.n_coef, spec.n_scale
    for name, value in (fixed or {}).items():
        if name == "alpha0":
            free[0], q[0] = False, float(value)
            continue
        if float(value) <= 0 and name != "alpha0":
            raise ConfigError(f"fixed scale {name!r} must be positive")
        if name == "sigma":
            k = 1 + P + S
        elif name == "sigma_y":
            k = 2 + P + S
        elif name == "local":
            free[1 + P : 1 + P + S] = False
            q[1 + P : 1 + P + S] = math.log(float(value))
            continue
        elif name in spec.scale_names:
            k = 1 + P + spec.scale_names.index(name)
        else:
            raise ConfigError(f"cannot fix unknown parameter {name!r}")
        free[k], q[k] = False, math.log(float(value))
    return free, q


def sample_posterior(
    frame: CellFrame,
    spec: ModelSpec,
    config: SamplerConfig = SamplerConfig(),
    fixed: dict | None = None,
    prior_only: bool = False,
    backend: str | None = None,
    check: bool = True,
):
    """Draw from the posterior of the cell-mean model.

    Parameters
    ----------
    fixed : dict, optional
        Natural-scale values held constant (point-mass hyperpriors), keyed
        by ``alpha0``, ``sigma``, ``sigma_y``, a local-scale name, or
        ``"local"`` for all local scales.
    prior_only : bool
        Ignore the data and sample the prior.
    check : bool
        Raise :class:`FitQualityError` when the R-hat gate or divergence
        limit fails.

    Returns
    -------
    draws : PosteriorDraws
    diagnostics : Diagnostics
    """
    if not prior_only and not np.any(frame.n > 0):
        raise ValueError("frame has no occupied cells")
    if [v.name for v in spec.variables] != list(frame.names):
        raise ValueError("model spec variables do not match the frame")
    free, fixed_q = fixed_vector(spec, fixed)
    centered = centering_mask(frame, spec, config, prior_only)
    jobs = [
        (frame, spec, config, c, fixed_q, free, prior_only, backend, centered)
        for c in range(config.n_chains)
    ]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.n_chains)) as pool:
            results = list(pool.map(_run_chain, jobs))
    else:
        results = [_run_chain(job) for job in jobs]

    q = np.concatenate([r["draws"] for r in results])
    chain = np.repeat(np.arange(config.n_chains), config.n_draws)
    meta = {"config": asdict(config), "fixed": dict(fixed or {}), "prior": spec.prior}
    meta["centered"] = int(centered.sum())
    draws = assemble_draws(q, chain, frame, spec, seed=config.seed, meta=meta, centered=centered)

    free_cols = _free_columns(draws, spec, free)
    x = draws.by_chain(free_cols)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rhat = split_rhat_matrix(x, names=free_cols)
        ess = ess_matrix(x, names=free_cols)
    divergences = int(sum(r["divergences"] for r in results))
    notes = [str(w.message) for w in caught]
    capped = sum(r["capped"] for r in results)
    if capped:
        msg = f"log-scale coordinates hit the +/-{UNCONSTRAINED_CAP:g} cap {capped} time(s)"
        notes.append(msg)
        warnings.warn(msg, ScaleCapWarning, stacklevel=2)
    if divergences:
        notes.append(f"{divergences} divergent transition(s) after warmup")
    diag = Diagnostics(
        free_cols,
        rhat,
        ess,
        divergences,
        step_size=[float(r["step_size"]) for r in results],
        mean_treedepth=[r["mean_treedepth"] for r in results],
        n_leapfrog=int(sum(r["n_leapfrog"] for r in results)),
        warnings=notes,
    )
    draws.meta["diagnostics"] = {"max_rhat": diag.max_rhat, "divergences": divergences}
    if check:
        total = config.n_chains * config.n_draws
        limit = config.max_divergences if config.max_divergences is not None else total - 1
        if divergences > limit:
            raise FitQualityError(
                f"{divergences} divergent transitions exceed the limit of {limit}", diag, draws
            )
        if diag.max_rhat > config.rhat_threshold:
            name, r, _ = diag.worst(1)[0]
            raise FitQualityError(
                f"R-hat {r:.3f} for {name} exceeds {config.rhat_threshold}", diag, draws
            )
    return draws, diag


def _free_columns(draws: PosteriorDraws, spec: ModelSpec, free: np.ndarray) -> list[str]:
    P, S = spec.n_coef, spec.n_scale
    cols = []
    if free[0]:
        cols.append("alpha0")
    cols.extend(spec.coef_names)
    cols.extend(name for k, name in enumerate(spec.scale_names) if free[1 + P + k])
    if free[1 + P + S]:
        cols.append("sigma")
    if free[2 + P + S]:
        cols.append("sigma_y")
    cols.extend(draws.prefixed("theta["))
    return cols
