from __future__ import annotations

import warnings

import pytest

from edrk.cohort import CohortSpec, generate_cohort, label_returns

PINNED_SEED = 7


@pytest.fixture(scope="session")
def small_cohort():
    visits = generate_cohort(CohortSpec(n_visits=2500, seed=11))
    return visits, label_returns(visits)


@pytest.fixture(scope="session")
def pinned_cohort_20k():
    visits = generate_cohort(CohortSpec(n_visits=20_000, seed=PINNED_SEED))
    return visits, label_returns(visits)


@pytest.fixture(scope="session")
def pinned_cohort_40k():
    return generate_cohort(CohortSpec(n_visits=40_000, seed=PINNED_SEED))


TOY_PATIENT = {"esi_level": 2, "age_years": 47.0, "insurance": "Self-Pay", "race": "White", "month": 5}
TOY_SHAP = {"esi_level": 0.412, "age_years": -0.231, "insurance": 0.305, "race": 0.02, "month": -0.001}


@pytest.fixture(scope="session")
def toy_stats(small_cohort):
    """Cohort statistics with every third visit in the high-risk group."""
    from edrk.cohort import cohort_statistics

    visits, _ = small_cohort
    part = {v.visit_id: "high" if i % 3 == 0 else "low" for i, v in enumerate(visits)}
    return cohort_statistics(visits, None, part)


@pytest.fixture
def bundle(toy_stats):
    from edrk.explain import build_context

    return build_context("P000123", TOY_PATIENT, 0.81, toy_stats, TOY_SHAP, base_value=-1.0)


@pytest.fixture(scope="session")
def explained_run(tmp_path_factory):
    """A small offline pipeline run (with-LLM variant only) for narrative tests."""
    from edrk.pipeline import RunConfig, run_pipeline

    cfg = RunConfig.from_dict(
        {
            "seed": 5,
            "cohort": {"n_visits": 2500},
            "variant": "with_llm",
            "extraction": {"fixture_size": 60},
            "models": {
                "gbt_xgb": {"n_trees": [40], "max_depth": [3], "learning_rate": [0.1], "l2_lambda": [1.0]},
            },
            "explain": {"n_narratives": 100},
        }
    )
    out = tmp_path_factory.mktemp("runs")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run, summary = run_pipeline(cfg, out=out)
    return cfg, run, summary


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
