import math
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from mrpweight.cells import VariableSpec
from mrpweight.simulation import (
    ClampedProbabilityWarning, Scenario, ScenarioError, apply_selection, draw_replication,
    load_scenario, metrics_from_records, run_replications, synthesize_population,
)


def small_scenario(**kw):
    base = dict(
        name="small",
        variables=[VariableSpec("a", ("a0", "a1", "a2")), VariableSpec("b", ("b0", "b1"))],
        composition={"margins": {"a": [0.5, 0.3, 0.2], "b": [0.6, 0.4]}},
        population_size=6000,
        outcome={"intercept": 1.0, "scale": 1.0, "terms": {"a": [0.0, 1.0, 2.0], "a:b": [0, 0.5, 0, -0.5, 0, 1.0]}},
        selection={"intercept": -2.0, "terms": {"a": [0.0, 0.5, 1.0]}},
        estimands={"overall": True, "marginal": True, "domains": {"a2b1": {"a": ["a2"], "b": ["b1"]}}},
        model_terms=["a:b"],
        replications=2,
        seed=7,
        sampler={"n_warmup": 300, "n_draws": 300},
    )
    base.update(kw)
    return Scenario(**base)


class TestPopulation:
    def test_pure_noise(self):
        sc = small_scenario(outcome={"intercept": 0.0, "scale": 1.0, "terms": {}}, population_size=20000)
        pop = synthesize_population(sc)
        assert abs(pop.y.mean()) < 3 / math.sqrt(20000)

    def test_cell_means(self):
        sc = small_scenario()
        pop = synthesize_population(sc)
        theta = sc.cell_means()
        for j in range(len(theta)):
            yj = pop.y[pop.cell == j]
            assert abs(yj.mean() - theta[j]) < 3 / math.sqrt(len(yj))

    def test_analytic_means_by_lookup(self):
        sc = small_scenario()
        theta = sc.cell_means().reshape(3, 2)
        ab = np.array([0, 0.5, 0, -0.5, 0, 1.0]).reshape(3, 2)
        for i in range(3):
            for k in range(2):
                assert theta[i, k] == pytest.approx(1.0 + [0.0, 1.0, 2.0][i] + ab[i, k])

    def test_bundled_outcome_table(self):
        sc = load_scenario("unbalanced-3var")
        np.testing.assert_array_equal(sc.outcome["terms"]["age"], [0.5, 1.375, 2.25, 3.125, 4])
        assert sc.population_size == 50000
        assert int(np.prod(sc.shape)) == 100

    def test_truth_reused(self):
        sc = small_scenario()
        pop = synthesize_population(sc)
        y = pop.y
        assert pop.truth[0] == pytest.approx(y.mean())
        names = [m.name for m in pop.estimands]
        k = names.index("a2b1")
        codes = pop.codes
        assert pop.truth[k] == pytest.approx(y[(codes[:, 0] == 2) & (codes[:, 1] == 1)].mean())

    def test_deterministic(self):
        sc = small_scenario()
        a, b = synthesize_population(sc), synthesize_population(sc)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.cell, b.cell)


class TestScenarioValidation:
    def test_coefficient_mismatch(self):
        with pytest.raises(ScenarioError):
            small_scenario(outcome={"scale": 1.0, "terms": {"a": [0.0, 1.0]}})

    def test_bad_scale(self):
        with pytest.raises(ScenarioError):
            small_scenario(outcome={"scale": 0.0, "terms": {}})

    def test_unknown_term(self):
        with pytest.raises(ScenarioError):
            small_scenario(model_terms=["a:zz"])

    def test_roundtrip(self, tmp_path):
        sc = small_scenario()
        sc.to_json(tmp_path / "s.json")
        again = load_scenario(tmp_path / "s.json")
        assert again.to_dict() == sc.to_dict()

    def test_unknown_bundled(self):
        with pytest.raises(ScenarioError):
            load_scenario("no-such-scenario")


class TestSelection:
    def test_intercept_only(self):
        sc = small_scenario(selection={"intercept": -2.0, "terms": {}})
        np.testing.assert_allclose(sc.inclusion_probabilities(), 1 / (1 + math.e**2))

    def test_logistic_link(self):
        sc = small_scenario()
        pi = sc.inclusion_probabilities().reshape(3, 2)
        np.testing.assert_allclose(pi[:, 0], expit(-2 + np.array([0.0, 0.5, 1.0])))

    def test_clamped(self):
        sc = small_scenario(selection={"intercept": -40.0, "terms": {}})
        with pytest.warns(ClampedProbabilityWarning):
            pop = synthesize_population(sc)
        assert pop.pi.min() == 1e-9

    def test_sample_size_and_probabilities(self):
        sc = small_scenario()
        pop = synthesize_population(sc)
        sample, pi = apply_selection(pop, 0)
        expected = pop.pi.sum()
        assert abs(len(sample) - expected) < 4 * math.sqrt(expected)
        assert len(pi) == len(sample)

    def test_replication_streams(self):
        pop = synthesize_population(small_scenario())
        s0, _ = apply_selection(pop, 0)
        s0b, _ = apply_selection(pop, 0)
        s1, _ = apply_selection(pop, 1)
        pd.testing.assert_frame_equal(s0, s0b)
        assert not s0.equals(s1)

    def test_frame(self):
        pop = synthesize_population(small_scenario())
        sample, frame, pi = draw_replication(pop, 0)
        assert frame.n_total == len(sample)
        np.testing.assert_array_equal(frame.N, pop.counts)


def fake_records(values, ses, truth_len=1, method="M"):
    return [{"replication": r, "estimates": {method: [[v, s, v - 1.96 * s, v + 1.96 * s]] * truth_len},
             "failures": [], "weights": {}} for r, (v, s) in enumerate(zip(values, ses))]


class TestMetrics:
    def population(self, truth):
        pop = synthesize_population(small_scenario(estimands={"overall": True}))
        pop.truth = np.array([truth])
        return pop

    def test_exact_estimator(self):
        pop = self.population(2.0)
        m = metrics_from_records(fake_records([2.0] * 10, [0.1] * 10), pop, ["M"])
        assert m.get("overall", "M", "abs_bias") == 0
        assert m.get("overall", "M", "rmse") == 0
        assert m.get("overall", "M", "coverage") == 1

    def test_rmse_decomposition(self):
        rng = np.random.default_rng(0)
        v = 1.0 + rng.normal(0.3, 1.0, 50)
        pop = self.population(1.0)
        m = metrics_from_records(fake_records(v, np.ones(50)), pop, ["M"])
        err = v - 1.0
        rmse, bias = m.get("overall", "M", "rmse"), m.get("overall", "M", "abs_bias")
        assert rmse**2 == pytest.approx(bias**2 + err.var(), abs=1e-9)
        assert rmse >= bias
        assert m.get("overall", "M", "ave_sd") == pytest.approx(1.0)

    def test_coverage_of_correct_intervals(self):
        rng = np.random.default_rng(1)
        pop = self.population(0.0)
        m = metrics_from_records(fake_records(rng.normal(size=50), np.ones(50)), pop, ["M"])
        assert 0.88 <= m.get("overall", "M", "coverage") <= 0.99

    def test_failures_are_skipped(self):
        pop = self.population(0.0)
        recs = fake_records([0.1, 0.2, math.nan], [1, 1, 1])
        m = metrics_from_records(recs, pop, ["M"])
        assert m.get("overall", "M", "n_ok") == 2


class TestRunReplications:
    def test_deterministic_and_order_independent(self):
        sc = small_scenario()
        pop = synthesize_population(sc)
        methods = ["Str-P", "PS-W", "Rake-W", "IP-W"]
        two = run_replications(sc, methods, replications=2, population=pop)
        again = run_replications(sc, methods, replications=2, population=pop)
        assert two.to_csv_string() == again.to_csv_string()
        one = run_replications(sc, methods, replications=1, population=pop)
        assert one.records[0]["estimates"] == two.records[0]["estimates"]

    def test_unknown_method(self):
        with pytest.raises(ScenarioError):
            run_replications(small_scenario(), ["XX"], replications=1)

    def test_failure_does_not_abort(self):
        """A domain with no sample units fails for weighted methods only."""
        sc = small_scenario(selection={"intercept": -2.0, "terms": {"a": [0.0, 0.0, -40.0]}},
                            estimands={"overall": True, "domains": {"a2": {"a": ["a2"]}}},
                            sampler={"n_warmup": 1000, "n_draws": 1000})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = run_replications(sc, ["Str-P", "PS-W"], replications=1)
        assert m.get("overall", "PS-W", "n_ok") == 1
        assert m.get("a2", "PS-W", "n_ok") == 0
        assert m.get("a2", "Str-P", "n_ok") == 1
        assert any(f["method"] == "PS-W" for f in m.records[0]["failures"])

    @pytest.mark.slow
    def test_ignorable_selection_unbiased(self):
        """Selection independent of covariates: every method is unbiased for
        the overall mean within 3 Monte Carlo standard errors."""
        sc = small_scenario(selection={"intercept": -2.5, "terms": {}}, estimands={"overall": True},
                            replications=50)
        m = run_replications(sc)
        for method in m.table.method:
            rmse = m.get("overall", method, "rmse")
            bias = m.get("overall", method, "abs_bias")
            sd = math.sqrt(max(rmse**2 - bias**2, 0.0))
            assert bias < 3 * sd / math.sqrt(m.get("overall", method, "n_ok")), method
