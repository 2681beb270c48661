from __future__ import annotations

import json

import numpy as np
import pytest

from edrk.assess import (
    DEFAULT_RULEBASE,
    ERROR_KINDS,
    EXPECTED_DETECTION,
    assess_batch,
    assess_one,
    check_attribution,
    check_coherence,
    check_consistency,
    check_factual,
    inject_error,
    write_report,
)
from edrk.explain import ClaimSidecar, Narrative, build_context, generate_narrative, numeric_tokens, read_narratives

from conftest import TOY_PATIENT, TOY_SHAP


def sidecar_with(*claims):
    side = ClaimSidecar("P000123")
    for c in claims:
        side.add(**c)
    return side


def age_claim(stated, precision=0):
    return dict(kind="numeric", stated=stated, source="patient", key="patient/age_years", precision=precision,
                text=str(stated), feature="age_years")


def test_rounded_statement_passes(toy_stats):
    b = build_context("P000123", {**TOY_PATIENT, "age_years": 93.04}, 0.81, toy_stats, TOY_SHAP)
    assert check_factual(sidecar_with(age_claim(93)), b) == []


def test_off_by_one_unit_is_minor(toy_stats):
    b = build_context("P000123", {**TOY_PATIENT, "age_years": 93.0}, 0.81, toy_stats, TOY_SHAP)
    [f] = check_factual(sidecar_with(age_claim(92)), b)
    assert (f.dimension, f.severity, f.expected, f.stated) == ("factual", "minor", 93.0, 92)


def test_larger_deviation_is_moderate(bundle):
    [f] = check_factual(sidecar_with(age_claim(50)), bundle)
    assert f.severity == "moderate"


def test_unbacked_cohort_number_is_severe(bundle):
    claim = dict(kind="numeric", stated=12.0, source="cohort_stats", key="high/serum_lactate/mean", precision=1, text="12.0")
    [f] = check_factual(sidecar_with(claim), bundle)
    assert f.severity == "severe"


def test_feature_absent_from_attributions_is_severe(bundle):
    side = sidecar_with(dict(kind="numeric", stated=0.2, source="shap", key="phi/pain_score", precision=2, text="+0.20", feature="pain_score"))
    findings = check_attribution(side, bundle)
    assert any(f.severity == "severe" and f.stated == "pain_score" for f in findings)


def test_empty_rulebase_has_no_consistency_findings(bundle):
    narrative, side = generate_narrative(bundle)
    flipped, fside = inject_error(narrative, side, "sign_flip", np.random.default_rng(0))
    assert check_consistency(fside, bundle, rulebase={}) == []
    assert check_consistency(fside, bundle) != []


def test_features_outside_rulebase_are_logged(bundle, caplog):
    _, side = generate_narrative(bundle)
    with caplog.at_level("INFO", logger="edrk.assess"):
        assert check_consistency(side, bundle, rulebase={"esi_level": -1}) == []
    assert "no consistency rule for insurance" in caplog.text


def test_swapped_rank_is_moderate(bundle):
    _, side = generate_narrative(bundle)
    ranks = [c for c in side.claims if c.kind == "ordering"]
    ranks[0].stated_value, ranks[1].stated_value = ranks[1].stated_value, ranks[0].stated_value
    [f] = check_attribution(side, bundle)
    assert (f.dimension, f.severity) == ("attribution", "moderate")


def test_wrong_top_set_is_severe(bundle):
    _, side = generate_narrative(bundle)
    for c in side.claims:
        if c.feature == "age_years" and c.source == "shap":
            c.feature = "race"
            c.source_key = c.source_key.replace("age_years", "race")
    findings = check_attribution(side, bundle)
    assert any(f.severity == "severe" and "top-k" in f.detail for f in findings)


def test_contribution_rounding_slip_is_minor(bundle):
    _, side = generate_narrative(bundle)
    c = next(c for c in side.claims if c.source == "shap" and c.kind == "numeric")
    c.stated_value = round(c.stated_value + 0.01, 2)
    [f] = check_attribution(side, bundle)
    assert f.severity == "minor"


def test_conflicting_duplicate_claims(bundle):
    narrative, side = generate_narrative(bundle)
    side.add("numeric", 50.0, "patient", "patient/age_years", 1, text="50.0", feature="age_years")
    text = narrative.text + "Age restated as 50.0 here\n"
    findings = check_coherence(Narrative("P000123", text, "High"), side, bundle)
    assert [(f.dimension, f.severity) for f in findings] == [("coherence", "moderate")]


def test_unmapped_text_number_is_flagged(bundle):
    narrative, side = generate_narrative(bundle)
    odd = Narrative(narrative.patient_id, narrative.text + "Seen 4 times\n", narrative.risk_class)
    [f] = check_coherence(odd, side, bundle)
    assert f.severity == "moderate" and f.stated == ["4"]


def test_clean_narrative_has_no_findings(bundle):
    narrative, side = generate_narrative(bundle)
    assert assess_one(narrative, side, bundle) == []


def test_clean_batch_error_rate_zero(bundle):
    narrative, side = generate_narrative(bundle)
    report = assess_batch([(narrative, side)], {"P000123": bundle})
    assert report.n == 1 and report.error_rate == 0.0
    assert report.passed == {"P000123": True}


@pytest.mark.parametrize("kind", ERROR_KINDS)
def test_injected_error_detected(bundle, kind):
    narrative, side = generate_narrative(bundle)
    bad, bad_side = inject_error(narrative, side, kind, np.random.default_rng(3))
    assert bad.text != narrative.text
    findings = assess_one(bad, bad_side, bundle)
    assert EXPECTED_DETECTION[kind] in {(f.dimension, f.severity) for f in findings}
    # the original pair is untouched
    assert assess_one(narrative, side, bundle) == []


@pytest.mark.parametrize("kind", ["numeric", "fabrication"])
def test_injection_keeps_claims_bijective(bundle, kind):
    narrative, side = generate_narrative(bundle)
    bad, bad_side = inject_error(narrative, side, kind, np.random.default_rng(1))
    assert numeric_tokens(bad.text) == [c.text for c in bad_side.numeric()]


def test_numeric_injection_is_the_only_finding(bundle):
    narrative, side = generate_narrative(bundle)
    bad, bad_side = inject_error(narrative, side, "numeric", np.random.default_rng(5))
    [f] = assess_one(bad, bad_side, bundle)
    assert (f.dimension, f.severity) == ("factual", "minor")


def test_unknown_injection_kind(bundle):
    narrative, side = generate_narrative(bundle)
    with pytest.raises(ValueError):
        inject_error(narrative, side, "typo", np.random.default_rng(0))


def test_default_rulebase_signs():
    assert DEFAULT_RULEBASE["visits_past_2_months"] == 1
    assert DEFAULT_RULEBASE["esi_level"] == -1


def test_report_files(tmp_path, bundle):
    narrative, side = generate_narrative(bundle)
    bad, bad_side = inject_error(narrative, side, "class_flip", np.random.default_rng(0))
    report = assess_batch([(bad, bad_side)], {"P000123": bundle})
    write_report(report, tmp_path)
    data = json.loads((tmp_path / "assessment.json").read_text())
    assert data["error_rate"] == 1.0
    assert data["by_dimension"]["coherence"] >= 1
    md = (tmp_path / "assessment.md").read_text()
    assert "| coherence |" in md and "Reviewer notes:" in md


def test_run_batch_with_one_injection(explained_run):
    _, run, _ = explained_run
    items = read_narratives(run / "explain" / "with_llm")
    sources = {s.patient_id: b for _, s, b in items}
    pairs = [(n, s) for n, s, _ in items]
    assert assess_batch(pairs, sources).error_rate == 0.0
    pairs[0] = inject_error(*pairs[0], "numeric", np.random.default_rng(0))
    report = assess_batch(pairs, sources)
    assert report.error_rate == pytest.approx(0.01)
    assert [(f.dimension, f.severity) for f in report.findings] == [("factual", "minor")]
