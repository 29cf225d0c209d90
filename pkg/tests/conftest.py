import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from mrpweight.cells import VariableSpec, build_cell_frame

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_tables(levels, n_pop=3000, n_sample=300, seed=0, effect=None):
    """Random unit-level population and sample tables over categorical variables."""
    rng = np.random.default_rng(seed)
    variables = [VariableSpec(name, tuple(labs)) for name, labs in levels.items()]
    pop = pd.DataFrame({v.name: rng.choice(list(v.levels), n_pop) for v in variables})
    sample = pop.sample(n_sample, random_state=seed).reset_index(drop=True)
    y = rng.normal(size=n_sample)
    if effect is not None:
        y = y + effect(sample)
    sample["y"] = y
    return variables, sample, pop


@pytest.fixture
def small_frame():
    """Two variables (3 x 4 levels), 400 sample units from a 5000-unit population."""
    variables, sample, pop = make_tables(
        {"a": ["a1", "a2", "a3"], "b": ["b1", "b2", "b3", "b4"]}, 5000, 400, seed=1,
        effect=lambda s: (s.a == "a2") * 1.0,
    )
    return build_cell_frame(sample, pop, variables), variables


@pytest.fixture
def tiny_frame():
    """One variable with 10 levels and 200 sample units."""
    variables, sample, pop = make_tables({"g": [f"g{k}" for k in range(10)]}, 3000, 200, seed=5,
                                         effect=lambda s: s.g.str[1:].astype(int) * 0.2)
    return build_cell_frame(sample, pop, variables), variables


# ------------------------------------------------------------ acceptance report
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_ACCEPTANCE_TOTAL = 9


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome, then assert it."""

    def record(k: int, ok: bool, detail: str):
        ok = bool(ok)
        prev = _ACCEPTANCE.get(k)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        _ACCEPTANCE[k] = (ok, detail)
        assert ok, f"criterion {k}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, _ACCEPTANCE_TOTAL + 1):
        if k in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k}: NOT RUN (deselected or errored before checking)")
