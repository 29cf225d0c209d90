"""Multilevel cell-mean model with structured (multiplicative) local scales.

Cell means decompose into an intercept plus one coefficient per included
term, where a term is a main effect or an interaction of several weighting
variables.  Each coefficient is normal with standard deviation
``local_scale * sigma``.  Under the structured prior an interaction's local
scale is ``delta[order]`` times the product of the main-effect level scales
of its parent levels; under the independent prior each term carries one free
scale.

The sampler works on an unconstrained vector laid out as::

    [alpha0, z (n_coef), log local scales (n_scale), log sigma, log sigma_y]

with ``alpha = exp(sum of the coefficient's log scales) * sigma * z``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cells import SEPARATOR, CellFrame, VariableSpec

STRUCTURED = "structured"
INDEPENDENT = "independent"

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class SpecError(ValueError):
    """Invalid model term request."""


class ConsistencyError(RuntimeError):
    """Parameter state does not line up with the model structure."""


class StateDomainError(ValueError):
    """A scale parameter is not strictly positive."""


@dataclass(frozen=True)
class InteractionTerm:
    """A main effect (order 1) or an interaction among distinct variables."""

    variables: tuple[str, ...]

    def __post_init__(self):
        if len(self.variables) == 0:
            raise SpecError("a term needs at least one variable")
        if len(set(self.variables)) != len(self.variables):
            raise SpecError(f"term {self.name!r} repeats a variable")

    @property
    def order(self) -> int:
        return len(self.variables)

    @property
    def name(self) -> str:
        return ":".join(self.variables)

    def parents(self) -> tuple["InteractionTerm", ...]:
        return tuple(InteractionTerm((v,)) for v in self.variables)


def parse_term(text: str) -> frozenset[str]:
    parts = [p.strip() for p in text.split(":")]
    if any(not p for p in parts):
        raise SpecError(f"malformed term {text!r}")
    return frozenset(parts)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Model structure: terms, prior family, and the coefficient index map."""

    variables: tuple[VariableSpec, ...]
    terms: tuple[InteractionTerm, ...]
    prior: str = STRUCTURED
    intercept_scale: float = 100.0
    sigma_scale: float = 1.0
    sigma_y_scale: float = 5.0
    # derived
    term_sizes: tuple[int, ...] = field(init=False)
    term_offsets: tuple[int, ...] = field(init=False)
    scale_names: tuple[str, ...] = field(init=False)
    coef_scale_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.prior not in (STRUCTURED, INDEPENDENT):
            raise SpecError(f"unknown prior {self.prior!r}")
        by_name = {v.name: v for v in self.variables}
        for t in self.terms:
            for name in t.variables:
                if name not in by_name:
                    raise SpecError(f"term {t.name!r} references unknown variable {name!r}")
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise SpecError("duplicate terms in spec")
        mains = {t.variables[0] for t in self.terms if t.order == 1}
        for t in self.terms:
            if t.order > 1 and not set(t.variables) <= mains:
                raise SpecError(f"term {t.name!r} lacks main-effect parents (hierarchy closure)")
        sizes = tuple(int(np.prod([by_name[v].n_levels for v in t.variables])) for t in self.terms)
        offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(sizes)[:-1]])) if sizes else ()
        object.__setattr__(self, "term_sizes", sizes)
        object.__setattr__(self, "term_offsets", offsets)
        scale_names, index = self._scale_structure(by_name)
        object.__setattr__(self, "scale_names", scale_names)
        index.setflags(write=False)
        object.__setattr__(self, "coef_scale_index", index)

    def _scale_structure(self, by_name):
        P = self.n_coef
        if self.prior == INDEPENDENT:
            names = tuple(f"tau[{t.name}]" for t in self.terms)
            index = np.full((P, 1), -1, dtype=np.int32)
            for k, (t, off, size) in enumerate(zip(self.terms, self.term_offsets, self.term_sizes)):
                index[off : off + size, 0] = k
            return names, index
        names: list[str] = []
        lam_start: dict[str, int] = {}
        for t in self.terms:
            if t.order == 1:
                v = by_name[t.variables[0]]
                lam_start[v.name] = len(names)
                names.extend(f"lambda[{v.name}][{lab}]" for lab in v.levels)
        orders = sorted({t.order for t in self.terms if t.order > 1})
        delta_pos = {}
        for l in orders:
            delta_pos[l] = len(names)
            names.append(f"delta[{l}]")
        width = max((t.order for t in self.terms), default=1)
        width = width + 1 if width > 1 else 1
        index = np.full((P, width), -1, dtype=np.int32)
        for t, off, size in zip(self.terms, self.term_offsets, self.term_sizes):
            shape = tuple(by_name[v].n_levels for v in t.variables)
            combos = np.column_stack(np.unravel_index(np.arange(size), shape))
            for m, vname in enumerate(t.variables):
                index[off : off + size, m] = lam_start[vname] + combos[:, m]
            if t.order > 1:
                index[off : off + size, t.order] = delta_pos[t.order]
        return tuple(names), index

    # ----------------------------------------------------------------- sizes
    @property
    def n_coef(self) -> int:
        return int(sum(self.term_sizes))

    @property
    def n_scale(self) -> int:
        return len(self.scale_names)

    @property
    def dim(self) -> int:
        """Length of the unconstrained parameter vector."""
        return self.n_coef + self.n_scale + 3

    @property
    def term_names(self) -> list[str]:
        return [t.name for t in self.terms]

    def variable(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise SpecError(f"unknown variable {name!r}")

    def term(self, name: str) -> InteractionTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise SpecError(f"unknown term {name!r}")

    def term_slice(self, name: str) -> slice:
        k = self.term_names.index(name)
        return slice(self.term_offsets[k], self.term_offsets[k] + self.term_sizes[k])

    def coef_index(self, term_name: str, levels: Sequence[str]) -> int:
        """Flat coefficient index of one level combination of a term."""
        t = self.term(term_name)
        shape = tuple(self.variable(v).n_levels for v in t.variables)
        codes = tuple(self.variable(v).levels.index(str(lab)) for v, lab in zip(t.variables, levels))
        return self.term_offsets[self.term_names.index(term_name)] + int(np.ravel_multi_index(codes, shape))

    @property
    def coef_names(self) -> list[str]:
        out = []
        for t in self.terms:
            levels = [self.variable(v).levels for v in t.variables]
            for combo in itertools.product(*levels):
                out.append(f"alpha[{t.name}][{SEPARATOR.join(combo)}]")
        return out

    @property
    def unconstrained_names(self) -> list[str]:
        z = [name.replace("alpha[", "z[", 1) for name in self.coef_names]
        logs = [f"log_{name}" for name in self.scale_names]
        return ["alpha0", *z, *logs, "log_sigma", "log_sigma_y"]

    # ---------------------------------------------------------- cell design
    def cell_coef_index(self, frame_variables: Sequence[VariableSpec], codes: np.ndarray) -> np.ndarray:
        """Global coefficient index per (cell, term) for rows of level codes."""
        names = [v.name for v in frame_variables]
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, len(names))
        out = np.empty((len(codes), len(self.terms)), dtype=np.int32)
        for k, (t, off) in enumerate(zip(self.terms, self.term_offsets)):
            cols = tuple(codes[:, names.index(v)] for v in t.variables)
            shape = tuple(self.variable(v).n_levels for v in t.variables)
            out[:, k] = off + np.ravel_multi_index(cols, shape)
        return out

    # ----------------------------------------------------------- transforms
    def coefficient_scales(self, local: np.ndarray) -> np.ndarray:
        """Local scale of every coefficient (product over its scale index list).

        ``local`` may be a vector of length ``n_scale`` or a matrix with one
        row per draw.
        """
        local = np.asarray(local, dtype=float)
        padded = np.concatenate([local, np.ones(local.shape[:-1] + (1,))], axis=-1)
        idx = np.where(self.coef_scale_index < 0, self.n_scale, self.coef_scale_index)
        return np.prod(padded[..., idx], axis=-1)

    def pack(self, state: "ParameterState") -> np.ndarray:
        state.check(self)
        scales = self.coefficient_scales(state.local) * state.sigma
        z = state.alpha / scales
        return np.concatenate(
            [[state.alpha0], z, np.log(state.local), [math.log(state.sigma), math.log(state.sigma_y)]]
        )

    def unpack(self, q: np.ndarray) -> "ParameterState":
        q = np.asarray(q, dtype=float)
        P, S = self.n_coef, self.n_scale
        local = np.exp(q[1 + P : 1 + P + S])
        sigma = math.exp(q[1 + P + S])
        alpha = q[1 : 1 + P] * self.coefficient_scales(local) * sigma
        return ParameterState(float(q[0]), alpha, local, sigma, math.exp(q[2 + P + S]))


def enumerate_terms(
    variables: Sequence[VariableSpec],
    requested: Iterable[str | Iterable[str]],
    prior: str = STRUCTURED,
    **priors,
) -> ModelSpec:
    """Build a :class:`ModelSpec` from requested terms, closing the hierarchy.

    Terms are given as ``"age:eth"`` strings or collections of variable
    names.  Missing main-effect parents are added.  Terms are ordered by
    order, then by declared variable position.
    """
    variables = tuple(variables)
    order = {v.name: i for i, v in enumerate(variables)}
    seen: set[frozenset[str]] = set()
    for req in requested:
        key = parse_term(req) if isinstance(req, str) else frozenset(req)
        unknown = [v for v in key if v not in order]
        if unknown:
            raise SpecError(f"term {':'.join(sorted(key))!r} references unknown variable(s) {unknown}")
        if key in seen:
            raise SpecError(f"duplicate term request {':'.join(sorted(key, key=order.get))!r}")
        seen.add(key)
    closed = set(seen)
    for key in seen:
        closed.update(frozenset([v]) for v in key)
    ordered = sorted(closed, key=lambda k: (len(k), sorted(order[v] for v in k)))
    terms = tuple(InteractionTerm(tuple(sorted(k, key=order.get))) for k in ordered)
    return ModelSpec(variables, terms, prior=prior, **priors)


def all_terms(variables: Sequence[VariableSpec], max_order: int) -> list[str]:
    names = [v.name for v in variables]
    out = []
    for l in range(1, max_order + 1):
        out.extend(":".join(c) for c in itertools.combinations(names, l))
    return out


def independent_prior_variant(spec: ModelSpec) -> ModelSpec:
    """Same terms, but every term gets its own free half-normal scale."""
    return replace(spec, prior=INDEPENDENT)


@dataclass
class ParameterState:
    """Natural-scale parameter values.

    ``local`` holds the free local scales in ``spec.scale_names`` order
    (main-effect level scales then per-order deltas for the structured prior,
    one scale per term for the independent prior).
    """

    alpha0: float
    alpha: np.ndarray
    local: np.ndarray
    sigma: float
    sigma_y: float

    def check(self, spec: ModelSpec) -> None:
        if np.shape(self.alpha) != (spec.n_coef,) or np.shape(self.local) != (spec.n_scale,):
            raise ConsistencyError("state dimensions do not match the model spec")
        if (
            np.any(~(np.asarray(self.local) > 0))
            or not self.sigma > 0
            or not self.sigma_y > 0
        ):
            raise StateDomainError("all scale parameters must be strictly positive")

    def lambda_main(self, spec: ModelSpec) -> dict[str, np.ndarray]:
        if spec.prior != STRUCTURED:
            raise SpecError("main-effect level scales exist only under the structured prior")
        out = {}
        for t in spec.terms:
            if t.order == 1:
                v = spec.variable(t.variables[0])
                start = spec.scale_names.index(f"lambda[{v.name}][{v.levels[0]}]")
                out[v.name] = np.asarray(self.local[start : start + v.n_levels])
        return out

    def delta(self, spec: ModelSpec) -> dict[int, float]:
        return {
            int(name[6:-1]): float(self.local[k])
            for k, name in enumerate(spec.scale_names)
            if name.startswith("delta[")
        }


def local_scale(
    term: InteractionTerm,
    lambda_main: Mapping[str, np.ndarray],
    delta: Mapping[int, float] | float | None = None,
) -> np.ndarray:
    """Local scale of every level combination of ``term``.

    Main effects return their level scales.  Interactions return
    ``delta * prod(parent level scales)``, taken level by level (row-major
    over the term's variables).
    """
    missing = [v for v in term.variables if v not in lambda_main]
    if missing:
        raise ConsistencyError(f"missing parent scale(s) {missing} for term {term.name!r}")
    if term.order == 1:
        return np.asarray(lambda_main[term.variables[0]], dtype=float).copy()
    if delta is None:
        raise ConsistencyError(f"missing relative magnitude for order {term.order}")
    d = float(delta[term.order]) if isinstance(delta, Mapping) else float(delta)
    out = np.array(d)
    for v in term.variables:
        out = np.multiply.outer(out, np.asarray(lambda_main[v], dtype=float))
    return out.ravel()


# ------------------------------------------------------------------ density
def _half_normal_logpdf(x, scale=1.0):
    return math.log(2.0) - LOG_SQRT_2PI - math.log(scale) - 0.5 * (x / scale) ** 2


def _half_cauchy_logpdf(x, scale):
    return math.log(2.0 / (math.pi * scale)) - math.log1p((x / scale) ** 2)


def log_likelihood(theta: np.ndarray, sigma_y: float, n, y_bar, ss) -> float:
    """Normal log likelihood from cell sufficient statistics."""
    occ = n > 0
    n, y_bar, ss, theta = n[occ], y_bar[occ], ss[occ], theta[occ]
    quad = ss + n * (y_bar - theta) ** 2
    return float(
        -n.sum() * (LOG_SQRT_2PI + math.log(sigma_y)) - quad.sum() / (2.0 * sigma_y**2)
    )


def log_prior(state: ParameterState, spec: ModelSpec) -> float:
    scales = spec.coefficient_scales(state.local) * state.sigma
    lp = -LOG_SQRT_2PI - math.log(spec.intercept_scale) - 0.5 * (state.alpha0 / spec.intercept_scale) ** 2
    lp += float(np.sum(-LOG_SQRT_2PI - np.log(scales) - 0.5 * (state.alpha / scales) ** 2))
    lp += sum(_half_normal_logpdf(x) for x in np.asarray(state.local, dtype=float))
    lp += _half_cauchy_logpdf(state.sigma, spec.sigma_scale)
    lp += _half_cauchy_logpdf(state.sigma_y, spec.sigma_y_scale)
    return lp


def log_posterior(state: ParameterState, frame: CellFrame, spec: ModelSpec) -> float:
    """Unnormalized log posterior on the natural (constrained) scale.

    Likelihood uses cell sufficient statistics; priors are
    ``alpha0 ~ N(0, intercept_scale)``, ``alpha ~ N(0, (local*sigma)^2)``,
    local scales ``~ N+(0, 1)``, ``sigma ~ Cauchy+(0, sigma_scale)`` and
    ``sigma_y ~ Cauchy+(0, sigma_y_scale)``.  Raises
    :class:`StateDomainError` for a non-positive scale.
    """
    state.check(spec)
    theta = cell_means(state, frame, spec)
    return log_likelihood(theta, state.sigma_y, frame.n, frame.y_bar, frame.ss) + log_prior(state, spec)


def sigma_theta_sq(
    state: ParameterState, spec: ModelSpec, aggregate: str = "cell"
) -> float:
    """Variance of a cell mean around the intercept in the exchangeable reduction.

    ``aggregate="cell"`` sums, over terms, the mean of ``(local*sigma)^2``
    across the term's level combinations, which is the prior variance of a
    cell mean averaged over the cross-product.  ``aggregate="coefficient"``
    sums ``(local*sigma)^2`` over every coefficient.
    """
    state.check(spec)
    return float(sigma_theta_sq_from_local(np.asarray(state.local)[None, :], np.array([state.sigma]), spec, aggregate)[0])


def sigma_theta_sq_from_local(
    local: np.ndarray, sigma: np.ndarray, spec: ModelSpec, aggregate: str = "cell"
) -> np.ndarray:
    """Vectorized :func:`sigma_theta_sq` over draws (rows of ``local``)."""
    if spec.n_coef == 0:
        return np.zeros(len(sigma))
    sq = (spec.coefficient_scales(local) * np.asarray(sigma)[:, None]) ** 2
    if aggregate == "coefficient":
        return sq.sum(axis=1)
    if aggregate != "cell":
        raise ValueError(f"aggregate must be 'cell' or 'coefficient', got {aggregate!r}")
    bounds = np.asarray(spec.term_offsets, dtype=np.intp)
    sums = np.add.reduceat(sq, bounds, axis=1)
    return (sums / np.asarray(spec.term_sizes)).sum(axis=1)


def cell_means(state_or_alpha, frame: CellFrame, spec: ModelSpec, alpha0=None) -> np.ndarray:
    """Cell means for every frame cell.

    Accepts a :class:`ParameterState` (returns shape ``(J,)``) or a matrix of
    coefficient draws ``(D, n_coef)`` together with ``alpha0`` draws
    (returns ``(D, J)``).
    """
    idx = spec.cell_coef_index(frame.variables, frame.codes)
    if isinstance(state_or_alpha, ParameterState):
        a = np.asarray(state_or_alpha.alpha, dtype=float)
        theta = np.full(frame.J, float(state_or_alpha.alpha0))
        for k in range(idx.shape[1]):
            theta = theta + a[idx[:, k]]
        return theta
    alpha = np.atleast_2d(np.asarray(state_or_alpha, dtype=float))
    theta = np.repeat(np.asarray(alpha0, dtype=float)[:, None], frame.J, axis=1)
    for k in range(idx.shape[1]):
        theta += alpha[:, idx[:, k]]
    return theta
