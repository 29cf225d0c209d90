import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpweight.cells import DomainError, VariableSpec, build_cell_frame, domain_mask
from mrpweight.diagnostics import ess_matrix
from mrpweight.estimators import (
    EstimationError, UndefinedSEWarning, estimates_table, poststratified_prediction, weighted_mean,
    weighted_mean_cells, weighted_mean_se,
)
from mrpweight.model import enumerate_terms
from mrpweight.posterior import PosteriorDraws
from mrpweight.sampler import SamplerConfig, sample_posterior
from mrpweight.weights import poststratification_weights


def two_cell_frame():
    vs = [VariableSpec("g", ("a", "b"))]
    df = pd.DataFrame({"g": ["a", "b"], "y": [0.0, 1.0]})
    return build_cell_frame(df, df[["g"]], vs), vs


def theta_draws(frame, values):
    names = [f"theta[{c}]" for c in frame.cell_ids]
    values = np.asarray(values, dtype=float)
    return PosteriorDraws(names, values, np.zeros(len(values), dtype=int))


class TestPoststratifiedPrediction:
    def test_constant_draws(self):
        frame, _ = two_cell_frame()
        est = poststratified_prediction(theta_draws(frame, [[1.0, 3.0]] * 10), frame, domain_mask(frame))
        assert est.value == pytest.approx(2.0)
        assert est.se == 0.0
        assert est.lo95 <= est.value <= est.hi95

    def test_single_cell_domain(self):
        frame, _ = two_cell_frame()
        vals = np.random.default_rng(0).normal(size=(500, 2))
        est = poststratified_prediction(theta_draws(frame, vals), frame, domain_mask(frame, {"g": ["b"]}))
        assert est.value == pytest.approx(vals[:, 1].mean())
        assert est.se == pytest.approx(vals[:, 1].std(ddof=1))
        assert est.lo95 == pytest.approx(np.quantile(vals[:, 1], 0.025))

    def test_identical_cells(self):
        frame, _ = two_cell_frame()
        c = np.random.default_rng(1).normal(size=300)
        est = poststratified_prediction(theta_draws(frame, np.column_stack([c, c])), frame, domain_mask(frame))
        assert est.value == pytest.approx(c.mean())
        assert est.se == pytest.approx(c.std(ddof=1))

    def test_linearity_of_expectation(self, small_frame):
        frame, _ = small_frame
        vals = np.random.default_rng(2).normal(size=(200, frame.J))
        est = poststratified_prediction(theta_draws(frame, vals), frame, domain_mask(frame))
        assert est.value == pytest.approx(np.sum(frame.N * vals.mean(0)) / frame.N.sum(), abs=1e-12)

    def test_empty_domain(self):
        frame, _ = two_cell_frame()
        with pytest.raises(DomainError):
            poststratified_prediction(theta_draws(frame, [[1.0, 2.0]]), frame, domain_mask(frame, lambda c: False))

    def test_no_pooling_limit(self):
        """With very large coefficient scales the prediction reproduces the
        poststratified sample mean."""
        rng = np.random.default_rng(3)
        vs = [VariableSpec("g", tuple(f"g{k}" for k in range(6)))]
        pop = pd.DataFrame({"g": rng.choice(vs[0].levels, 5000, p=[0.3, 0.2, 0.2, 0.1, 0.1, 0.1])})
        sample = pop.sample(300, random_state=3).copy()
        sample["y"] = rng.normal(size=300) + sample.g.str[1:].astype(int)
        frame = build_cell_frame(sample, pop, vs)
        spec = enumerate_terms(vs, ["g"])
        cfg = SamplerConfig(seed=5, metric="conditional", parametrization="centered")
        draws, _ = sample_posterior(frame, spec, cfg, fixed={"sigma": 1e3, "local": 1.0})
        est = poststratified_prediction(draws, frame, domain_mask(frame))
        ps = weighted_mean_cells(frame, poststratification_weights(frame), domain_mask(frame))
        per_draw = draws.theta(frame) @ (frame.N / frame.N.sum())
        mcse = per_draw.std() / np.sqrt(ess_matrix(per_draw.reshape(4, -1)[:, :, None])[0])
        assert abs(est.value - ps.value) < 3 * mcse


class TestWeightedMean:
    def test_equal_weights(self):
        y = np.random.default_rng(0).normal(size=20)
        assert weighted_mean(y, np.full(20, 2.0)).value == pytest.approx(y.mean())

    def test_example(self):
        assert weighted_mean([1.0, 3.0], [3.0, 1.0]).value == pytest.approx(1.5)

    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        y, w = rng.normal(size=10), rng.uniform(0.1, 5, 10)
        a, b = weighted_mean(y, w), weighted_mean(y, w * c)
        assert a.value == pytest.approx(b.value, rel=1e-10, abs=1e-12)
        assert a.se == pytest.approx(b.se, rel=1e-10)

    def test_empty(self):
        with pytest.raises(EstimationError):
            weighted_mean([], [])

    def test_interval(self):
        est = weighted_mean([0.0, 2.0], [1.0, 1.0])
        assert est.lo95 == pytest.approx(1 - 1.959963984540054 * np.sqrt(0.5))


class TestWeightedSE:
    def test_constant(self):
        assert weighted_mean_se(np.ones(5), np.arange(1.0, 6.0)) == 0.0

    def test_example(self):
        assert weighted_mean_se([0.0, 2.0], [1.0, 1.0]) ** 2 == pytest.approx(0.5)

    def test_single_unit(self):
        with pytest.warns(UndefinedSEWarning):
            assert np.isnan(weighted_mean_se([1.0], [1.0]))

    def test_equal_weights_closed_form(self):
        y = np.random.default_rng(1).normal(size=200)
        n = y.size
        classical = y.std(ddof=1) / np.sqrt(n)
        assert weighted_mean_se(y, np.ones(n)) == pytest.approx(classical * np.sqrt((n - 1) / n))

    def test_bootstrap_oracle(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=200) * 2 + 1
        w = rng.uniform(0.5, 3.0, 200)
        boot = []
        for _ in range(4000):
            k = rng.integers(0, 200, 200)
            boot.append(np.sum(w[k] * y[k]) / np.sum(w[k]))
        assert weighted_mean_se(y, w) == pytest.approx(np.std(boot, ddof=1), rel=0.10)


class TestCellForm:
    @given(st.integers(0, 10_000))
    def test_matches_unit_form(self, seed):
        rng = np.random.default_rng(seed)
        vs = [VariableSpec("a", ("p", "q", "r")), VariableSpec("b", ("s", "t"))]
        pop = pd.DataFrame({"a": rng.choice(["p", "q", "r"], 300), "b": rng.choice(["s", "t"], 300)})
        sample = pop.sample(60, random_state=seed % 1000).assign(y=rng.normal(size=60))
        frame = build_cell_frame(sample, pop, vs)
        ws = poststratification_weights(frame)
        dom = domain_mask(frame, {"a": ["p", "q"]})
        cell = weighted_mean_cells(frame, ws, dom)
        u = ws.expand(frame)
        keep = np.isin(frame.unit_cell, dom.index) & (u > 0)
        unit = weighted_mean(frame.unit_y[keep], u[keep])
        assert cell.value == pytest.approx(unit.value, rel=1e-10, abs=1e-12)
        assert cell.se == pytest.approx(unit.se, rel=1e-8)

    def test_no_units(self):
        vs = [VariableSpec("g", ("a", "b"))]
        df = pd.DataFrame({"g": ["a"], "y": [0.0]})
        frame = build_cell_frame(df, pd.DataFrame({"g": ["a", "b"]}), vs)
        with pytest.raises(EstimationError):
            weighted_mean_cells(frame, poststratification_weights(frame), domain_mask(frame, {"g": ["b"]}))

    def test_table_layout(self):
        est = weighted_mean([0.0, 2.0], [1.0, 1.0], method="PS-W", domain="all")
        assert list(estimates_table([est]).columns) == ["domain", "method", "est", "se", "lo95", "hi95"]
