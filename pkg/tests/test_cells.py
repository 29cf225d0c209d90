import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrpweight.cells import (
    CellFrame, DomainError, InputError, SampleOnlyCellWarning, SchemaError, VariableSpec,
    build_cell_frame, domain_mask,
)


def two_binary():
    return [VariableSpec("x", ("A", "B")), VariableSpec("z", ("A", "B"))]


class TestVariableSpec:
    def test_needs_two_levels(self):
        with pytest.raises(SchemaError):
            VariableSpec("x", ("only",))

    def test_unique_levels(self):
        with pytest.raises(SchemaError):
            VariableSpec("x", ("a", "a"))

    def test_roundtrip(self):
        v = VariableSpec("age", ("18-34", "35+"))
        assert VariableSpec.from_dict(v.to_dict()) == v


class TestBuildCellFrame:
    def test_counts_from_population_counts(self):
        counts = pd.DataFrame({"x": ["A", "A", "B", "B"], "z": ["A", "B", "A", "B"], "N": [50] * 4})
        sample = pd.DataFrame({"x": ["A"] * 4, "z": ["A", "A", "A", "B"], "y": [1.0, 2.0, 3.0, 4.0]})
        frame = build_cell_frame(sample, counts, two_binary(), count="N")
        assert frame.J == 4
        assert frame.N_total == 200
        assert frame.n_total == 4
        np.testing.assert_array_equal(frame.n, [3, 1, 0, 0])
        np.testing.assert_allclose(frame.y_bar[:2], [2.0, 4.0])
        assert np.isnan(frame.y_bar[2:]).all()
        np.testing.assert_allclose(frame.s, [1.0, 0.0, 0.0, 0.0])

    def test_large_cross_product(self):
        sizes = [5, 5, 4, 2, 5, 3, 4, 4]
        variables = [VariableSpec(f"v{k}", tuple(f"l{i}" for i in range(s))) for k, s in enumerate(sizes)]
        row = {v.name: v.levels[0] for v in variables}
        frame = build_cell_frame(pd.DataFrame([{**row, "y": 0.0}]), pd.DataFrame([row]), variables)
        assert frame.J == 48000

    def test_weighted_population(self):
        variables = two_binary()
        pop = pd.DataFrame({"x": ["A"] * 4 + ["B"], "z": ["B"] * 4 + ["A"], "w": [2.5] * 4 + [1.0]})
        sample = pd.DataFrame({"x": ["A"], "z": ["B"], "y": [0.0]})
        frame = build_cell_frame(sample, pop, variables, weight="w")
        assert frame.N[frame.parse_cell_id("A|B")] == pytest.approx(10.0)
        assert frame.N_total == pytest.approx(11.0)

    def test_unknown_category_names_row_and_column(self):
        sample = pd.DataFrame({"x": ["A", "C"], "z": ["A", "A"], "y": [0.0, 1.0]})
        pop = pd.DataFrame({"x": ["A"], "z": ["A"]})
        with pytest.raises(SchemaError, match=r"row 1.*'x'.*'C'"):
            build_cell_frame(sample, pop, two_binary())

    def test_empty_sample(self):
        with pytest.raises(InputError):
            build_cell_frame(pd.DataFrame({"x": [], "z": [], "y": []}), pd.DataFrame({"x": ["A"], "z": ["A"]}),
                             two_binary())

    def test_missing_outcome_column(self):
        with pytest.raises(SchemaError, match="'y'"):
            build_cell_frame(pd.DataFrame({"x": ["A"], "z": ["A"]}), pd.DataFrame({"x": ["A"], "z": ["A"]}),
                             two_binary())

    def test_sample_only_cells_flagged(self):
        sample = pd.DataFrame({"x": ["A", "B"], "z": ["A", "B"], "y": [0.0, 1.0]})
        pop = pd.DataFrame({"x": ["A"], "z": ["A"]})
        with pytest.warns(SampleOnlyCellWarning):
            frame = build_cell_frame(sample, pop, two_binary())
        assert frame.sample_only.tolist() == [False, False, False, True]

    def test_observed_cells_subset(self):
        sample = pd.DataFrame({"x": ["A"], "z": ["A"], "y": [0.0]})
        pop = pd.DataFrame({"x": ["A", "B"], "z": ["A", "A"]})
        frame = build_cell_frame(sample, pop, two_binary(), cells="observed")
        assert frame.cell_ids == ["A|A", "B|A"]

    def test_cell_id_bijection(self, small_frame):
        frame, _ = small_frame
        ids = frame.cell_ids
        assert len(set(ids)) == frame.J
        for j in range(frame.J):
            assert frame.parse_cell_id(ids[j]) == j


class TestFrameProperties:
    @given(st.integers(0, 10_000), st.integers(1, 200))
    def test_totals(self, seed, n_sample):
        rng = np.random.default_rng(seed)
        variables = [VariableSpec("a", ("p", "q", "r")), VariableSpec("b", ("s", "t"))]
        pop = pd.DataFrame({"a": rng.choice(["p", "q", "r"], 300), "b": rng.choice(["s", "t"], 300),
                            "w": rng.uniform(0.5, 3.0, 300)})
        sample = pop.sample(n_sample, replace=True, random_state=seed).assign(y=rng.normal(size=n_sample))
        frame = build_cell_frame(sample, pop, variables, weight="w")
        assert frame.n_total == n_sample
        assert frame.N_total == pytest.approx(pop.w.sum(), rel=1e-9)
        assert np.all(np.isfinite(frame.y_bar[frame.n > 0]))

    def test_serialization_roundtrip(self, small_frame):
        frame, variables = small_frame
        again = CellFrame.from_table(frame.to_table(), variables)
        assert again.same_cells(frame)
        np.testing.assert_array_equal(again.n, frame.n)
        np.testing.assert_array_equal(again.N, frame.N)
        np.testing.assert_allclose(again.y_bar, frame.y_bar, equal_nan=True)
        np.testing.assert_allclose(again.s, frame.s)

    @given(st.integers(0, 10_000))
    def test_coarsen_sums_counts(self, seed):
        rng = np.random.default_rng(seed)
        variables = [VariableSpec("a", ("a1", "a2", "a3", "a4")), VariableSpec("b", ("b1", "b2"))]
        pop = pd.DataFrame({"a": rng.choice(variables[0].levels, 200), "b": rng.choice(variables[1].levels, 200)})
        sample = pop.sample(60, random_state=seed).assign(y=rng.normal(size=60))
        frame = build_cell_frame(sample, pop, variables)
        coarse = frame.coarsen("a", {"lo": ["a1", "a2"], "hi": ["a3", "a4"]})
        fine_a = frame.column("a")
        for j in range(coarse.J):
            group = coarse.level_labels(j)
            members = [0, 1] if group[0] == "lo" else [2, 3]
            b = variables[1].levels.index(group[1])
            sel = np.isin(fine_a, members) & (frame.column("b") == b)
            assert coarse.n[j] == frame.n[sel].sum()
            assert coarse.N[j] == pytest.approx(frame.N[sel].sum())


class TestDomainMask:
    def test_all(self, small_frame):
        frame, _ = small_frame
        assert len(domain_mask(frame, "all")) == frame.J
        assert len(domain_mask(frame, None)) == frame.J

    def test_one_level(self, small_frame):
        frame, _ = small_frame
        mask = domain_mask(frame, {"a": ["a2"]})
        brute = [j for j in range(frame.J) if frame.level_labels(j)[0] == "a2"]
        assert sorted(mask.index.tolist()) == brute
        assert len(mask) == frame.J // 3

    def test_conjunction_with_negation(self):
        variables = [VariableSpec("age", ("18-34", "35-44", "45+")), VariableSpec("eth", ("white", "black", "other"))]
        pop = pd.DataFrame({"age": ["18-34"], "eth": ["white"]})
        frame = build_cell_frame(pop.assign(y=0.0), pop, variables)
        mask = domain_mask(frame, {"age": ["18-34"], "eth": {"not": ["white"]}}, "nonwhite_youth")
        assert sorted(frame.cell_id(j) for j in mask.index) == ["18-34|black", "18-34|other"]
        via_callable = domain_mask(frame, lambda c: c["age"] == "18-34" and c["eth"] != "white")
        assert sorted(via_callable.index.tolist()) == sorted(mask.index.tolist())

    def test_empty_domain(self, small_frame):
        frame, _ = small_frame
        with pytest.raises(DomainError):
            domain_mask(frame, lambda c: False)

    def test_unknown_level(self, small_frame):
        frame, _ = small_frame
        with pytest.raises(DomainError):
            domain_mask(frame, {"a": ["nope"]})
