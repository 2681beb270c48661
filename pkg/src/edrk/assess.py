"""Automated reliability review of narratives against their sources.

Four checks run per narrative: factual values, clinical consistency of
stated directions, internal coherence, and correspondence with the SHAP
vector. Severity comes from a fixed rule table:

* minor: numeric deviation of at most one display unit, risk class unchanged
* moderate: direction or ordering contradiction, internal inconsistency
* severe: risk-class mismatch or a fabricated entity
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .explain import (
    CLASS_RE,
    Claim,
    ClaimSidecar,
    ContextBundle,
    Narrative,
    classify_risk,
    display_name,
    fmt,
    numeric_tokens,
    top_k,
)

log = logging.getLogger(__name__)

DIMENSIONS = ("factual", "clinical_consistency", "coherence", "attribution")
SEVERITIES = ("minor", "moderate", "severe")

# Domain polarity of numeric features: +1 when larger values should raise return risk.
DEFAULT_RULEBASE: dict[str, int] = {
    "visits_past_2_months": +1,
    "esi_level": -1,
    **{
        f: 0
        for f in (
            "hour_of_day", "day_of_month", "month", "gender", "marital_status", "race", "ethnic_group",
            "language", "insurance", "is_weekend", "age_band", "systolic_bp_cat", "diastolic_bp_cat",
            "heart_rate_cat", "temperature_cat", "bmi_cat", "chief_complaint", "alcohol", "exercise",
            "home_environment", "nutrition", "sexual_orientation", "substance_abuse", "tobacco",
        )
    },
}


@dataclass
class Finding:
    patient_id: str
    claim_id: str
    dimension: str
    severity: str
    expected: Any
    stated: Any
    detail: str = ""


@dataclass
class AssessmentReport:
    n: int
    error_rate: float
    findings: list[Finding]
    passed: dict[str, bool]
    by_dimension: dict[str, int]
    notes: list[str] = field(default_factory=list)
    reviewer_notes: str = ""

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "error_rate": self.error_rate,
            "findings": [
                {k: v for k, v in asdict(f).items() if k != "detail"} | {"detail": f.detail} for f in self.findings
            ],
            "passed": self.passed,
            "by_dimension": self.by_dimension,
            "notes": self.notes,
            "reviewer_notes": self.reviewer_notes,
        }

    def markdown(self) -> str:
        failing = sum(1 for ok in self.passed.values() if not ok)
        lines = [
            "# Explanation assessment",
            "",
            f"Narratives reviewed: {self.n}; with findings: {failing}; error rate: {self.error_rate:.2f}",
            "",
            "| dimension | minor | moderate | severe |",
            "|---|---|---|---|",
        ]
        for dim in DIMENSIONS:
            counts = Counter(f.severity for f in self.findings if f.dimension == dim)
            lines.append(f"| {dim} | {counts['minor']} | {counts['moderate']} | {counts['severe']} |")
        if self.findings:
            lines += ["", "| patient | claim | dimension | severity | expected | stated |", "|---|---|---|---|---|---|"]
            for f in self.findings:
                lines.append(f"| {f.patient_id} | {f.claim_id} | {f.dimension} | {f.severity} | {f.expected} | {f.stated} |")
        lines += ["", "Reviewer notes:", "", self.reviewer_notes or "(none)", ""]
        return "\n".join(lines)


# -- source resolution ---------------------------------------------------------------------------


def resolve(claim: Claim, bundle: ContextBundle):
    """Value behind a claim's source_key, or None when nothing backs it."""
    kind, _, rest = claim.source_key.partition("/")
    if claim.source == "patient":
        value = bundle.patient.get(rest)
        return None if value is None or isinstance(value, str) else float(value)
    if claim.source == "cohort_stats":
        return None if bundle.cohort is None else bundle.cohort.lookup(claim.source_key)
    if claim.source == "shap":
        return bundle.shap.get(rest)
    if claim.source == "prediction":
        return classify_risk(bundle.probability, bundle.threshold)
    return None


def _unit(precision: int) -> float:
    return 10.0 ** (-precision)


# -- checks --------------------------------------------------------------------------------------


def check_factual(sidecar: ClaimSidecar, bundle: ContextBundle) -> list[Finding]:
    """Patient and cohort numbers must equal their source rounded to display precision."""
    out = []
    for c in sidecar.claims:
        if c.kind != "numeric" or c.source not in ("patient", "cohort_stats"):
            continue
        source = resolve(c, bundle)
        if source is None or not math.isfinite(source):
            out.append(Finding(sidecar.patient_id, c.claim_id, "factual", "severe", None, c.stated_value, f"no source for {c.source_key}"))
            continue
        precision = c.display_precision or 0
        expected = float(fmt(source * c.scale, precision))
        deviation = abs(float(c.stated_value) - expected)
        if deviation <= 1e-9:
            continue
        severity = "minor" if deviation <= _unit(precision) + 1e-9 else "moderate"
        out.append(Finding(sidecar.patient_id, c.claim_id, "factual", severity, expected, c.stated_value, c.source_key))
    return out


def check_consistency(sidecar: ClaimSidecar, bundle: ContextBundle, rulebase: Mapping[str, int] | None = None, notes: list | None = None) -> list[Finding]:
    """Stated directions must agree with sign(phi) for features covered by the rulebase.

    A disagreement between phi and the domain polarity is a note, since a
    patient below the population mean legitimately pushes the other way.
    """
    rulebase = DEFAULT_RULEBASE if rulebase is None else rulebase
    out = []
    for c in sidecar.claims:
        if c.kind != "direction":
            continue
        if c.feature not in rulebase:
            log.info("no consistency rule for %s; skipped", c.feature)
            continue
        phi = bundle.shap.get(c.feature)
        if phi is None:
            continue  # the attribution check reports unknown features
        expected = "increase" if phi > 0 else "decrease" if phi < 0 else "none"
        if c.stated_value != expected:
            out.append(Finding(sidecar.patient_id, c.claim_id, "clinical_consistency", "moderate", expected, c.stated_value, c.feature))
            continue
        polarity = rulebase[c.feature]
        value = bundle.patient.get(c.feature)
        group = bundle.cohort.get("low") if bundle.cohort is not None else None
        if polarity and notes is not None and group is not None and c.feature in group.numeric and not isinstance(value, str):
            if np.sign(float(value) - group.numeric[c.feature][0]) * polarity * np.sign(phi) < 0:
                notes.append(f"{sidecar.patient_id}: {c.feature} attribution runs against its usual direction")
    return out


def check_coherence(narrative: Narrative, sidecar: ClaimSidecar, bundle: ContextBundle) -> list[Finding]:
    pid = sidecar.patient_id
    out = []
    expected = classify_risk(bundle.probability, bundle.threshold)
    risk_claims = [c for c in sidecar.claims if c.kind == "risk_class"]
    match = CLASS_RE.search(narrative.text)
    stated_text = match.group(1) if match else None
    for c in risk_claims:
        if c.stated_value != expected:
            out.append(Finding(pid, c.claim_id, "coherence", "severe", expected, c.stated_value, "risk class"))
    if stated_text != expected and not any(f.severity == "severe" for f in out):
        out.append(Finding(pid, risk_claims[0].claim_id if risk_claims else "-", "coherence", "severe", expected, stated_text, "risk class in text"))

    by_key: dict[tuple[str, str], list[Claim]] = {}
    for c in sidecar.claims:
        if c.kind == "numeric":
            by_key.setdefault((c.source, c.source_key), []).append(c)
    for claims in by_key.values():
        values = {float(c.stated_value) for c in claims}
        if len(values) > 1:
            out.append(Finding(pid, claims[-1].claim_id, "coherence", "moderate", claims[0].stated_value, claims[-1].stated_value, "conflicting claims on one source"))

    tokens = numeric_tokens(narrative.text)
    texts = [c.text for c in sidecar.numeric()]
    if tokens != texts:
        extra = list((Counter(tokens) - Counter(texts)).elements())
        missing = list((Counter(texts) - Counter(tokens)).elements())
        out.append(Finding(pid, "-", "coherence", "moderate", missing or texts, extra or tokens, "text numbers do not map one-to-one onto claims"))
    return out


def check_attribution(sidecar: ClaimSidecar, bundle: ContextBundle, k: int | None = None) -> list[Finding]:
    pid = sidecar.patient_id
    shap = bundle.shap
    out = []
    contributions = [c for c in sidecar.claims if c.kind == "numeric" and c.source == "shap"]
    named = [c.feature for c in contributions]
    k = len(bundle.top_features) if k is None else min(k, len(shap))
    truth = top_k(shap, k)
    for c in contributions:
        if c.feature not in shap:
            out.append(Finding(pid, c.claim_id, "attribution", "severe", None, c.feature, "feature not in the attribution vector"))
    if set(named) != set(truth):
        out.append(Finding(pid, "-", "attribution", "severe", truth, named, "highlighted features differ from the top-k"))
    else:
        ranks = {c.feature: c.stated_value for c in sidecar.claims if c.kind == "ordering"}
        stated_order = sorted(named, key=lambda f: ranks.get(f, named.index(f) + 1))
        if named != truth or stated_order != truth:
            out.append(Finding(pid, "-", "attribution", "moderate", truth, stated_order if stated_order != truth else named, "rank order"))
    for c in contributions:
        if c.feature not in shap:
            continue
        expected = float(fmt(shap[c.feature], 2))
        deviation = abs(float(c.stated_value) - expected)
        if deviation > 1e-9:
            severity = "minor" if deviation <= 0.01 + 1e-9 else "moderate"
            out.append(Finding(pid, c.claim_id, "attribution", severity, expected, c.stated_value, f"contribution of {c.feature}"))
    return out


def assess_one(narrative: Narrative, sidecar: ClaimSidecar, bundle: ContextBundle, rulebase=None, k: int | None = None, notes=None) -> list[Finding]:
    return (
        check_factual(sidecar, bundle)
        + check_consistency(sidecar, bundle, rulebase, notes)
        + check_coherence(narrative, sidecar, bundle)
        + check_attribution(sidecar, bundle, k)
    )


def assess_batch(pairs: Sequence[tuple[Narrative, ClaimSidecar]], sources: Mapping[str, ContextBundle], rulebase=None, k: int | None = None) -> AssessmentReport:
    if not pairs:
        raise ValueError("nothing to assess")
    findings: list[Finding] = []
    passed: dict[str, bool] = {}
    notes: list[str] = []
    for narrative, sidecar in pairs:
        found = assess_one(narrative, sidecar, sources[sidecar.patient_id], rulebase, k, notes)
        findings.extend(found)
        passed[sidecar.patient_id] = not found
    failing = sum(1 for ok in passed.values() if not ok)
    by_dimension = {d: sum(1 for f in findings if f.dimension == d) for d in DIMENSIONS}
    return AssessmentReport(len(pairs), failing / len(pairs), findings, passed, by_dimension, notes)


def write_report(report: AssessmentReport, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "assessment.json").write_text(json.dumps(report.to_dict(), indent=1, default=str) + "\n")
    (directory / "assessment.md").write_text(report.markdown())


# -- error injection fixtures --------------------------------------------------------------------

ERROR_KINDS = ("numeric", "sign_flip", "class_flip", "fabrication")
EXPECTED_DETECTION = {
    "numeric": ("factual", "minor"),
    "sign_flip": ("clinical_consistency", "moderate"),
    "class_flip": ("coherence", "severe"),
    "fabrication": ("attribution", "severe"),
}
_VERBS = {"increase": "raises", "decrease": "lowers", "none": "does not move"}


def _replace_nth_token(text: str, n: int, new: str) -> str:
    from .explain import NUMERIC_TOKEN, PATIENT_ID_RE

    masked = PATIENT_ID_RE.sub(lambda m: "#" * len(m.group(0)), text)
    spans = [m.span() for m in NUMERIC_TOKEN.finditer(masked)]
    a, b = spans[n]
    return text[:a] + new + text[b:]


def inject_error(narrative: Narrative, sidecar: ClaimSidecar, kind: str, rng: np.random.Generator, rulebase=None) -> tuple[Narrative, ClaimSidecar]:
    """Copy of the pair with one seeded error of ``kind`` in both text and claims."""
    rulebase = DEFAULT_RULEBASE if rulebase is None else rulebase
    side = ClaimSidecar.from_dict(json.loads(json.dumps(sidecar.to_dict())))
    text = narrative.text
    numeric = side.numeric()
    if kind == "numeric":
        candidates = [i for i, c in enumerate(numeric) if c.source in ("patient", "cohort_stats")]
        if not candidates:
            raise ValueError("no patient or cohort number to mutate")
        i = int(rng.choice(candidates))
        c = numeric[i]
        p = c.display_precision or 0
        step = -_unit(p) if float(c.stated_value) >= _unit(p) else _unit(p)
        new = fmt(float(c.stated_value) + step, p)
        text = _replace_nth_token(text, i, new)
        c.stated_value, c.text = float(new), new
    elif kind == "sign_flip":
        candidates = [c for c in side.claims if c.kind == "direction" and c.feature in rulebase and c.stated_value != "none"]
        if not candidates:
            raise ValueError("no direction claim covered by the rulebase")
        c = candidates[int(rng.integers(len(candidates)))]
        flipped = "decrease" if c.stated_value == "increase" else "increase"
        line_head = f"**{display_name(c.feature)}**: SHAP"
        lines = text.split("\n")
        for j, line in enumerate(lines):
            if line_head in line:
                lines[j] = line.replace(f"it {_VERBS[c.stated_value]} the", f"it {_VERBS[flipped]} the")
        text = "\n".join(lines)
        c.stated_value = flipped
    elif kind == "class_flip":
        c = next(c for c in side.claims if c.kind == "risk_class")
        old = c.stated_value
        new = "Low" if old == "High" else "High"
        text = text.replace(f"**{old} Risk**", f"**{new} Risk**").replace(f"{old} Risk Factors", f"{new} Risk Factors")
        text = text.replace(f"{old}-Risk Classification", f"{new}-Risk Classification")
        c.stated_value = new
    elif kind == "fabrication":
        fake = str(rng.choice(["serum_lactate", "troponin_level", "prior_admissions", "pain_score"]))
        value = fmt(float(rng.uniform(0.05, 0.3)), 2, signed=True)
        contributions = [c for c in side.claims if c.kind == "numeric" and c.source == "shap"]
        last = contributions[-1] if contributions else None
        line = f"- **{display_name(fake)}**: SHAP Value Contribution: {value} (an additional factor)"
        lines = text.split("\n")
        anchor = max(j for j, ln in enumerate(lines) if "SHAP Value Contribution" in ln) if last else 1
        lines.insert(anchor + 1, line)
        text = "\n".join(lines)
        claim = Claim(f"c{len(side.claims) + 1:02d}", "numeric", float(value), "shap", f"phi/{fake}", 2, 1.0, value, fake)
        pos = side.claims.index(last) + 1 if last else len(side.claims)
        # keep claims in text order: the new line follows the last contribution line
        after = [c for c in side.claims[pos:] if c.kind == "numeric"]
        side.claims.insert(pos if not after else side.claims.index(after[0]), claim)
    else:
        raise ValueError(f"unknown error kind {kind!r}; choose from {ERROR_KINDS}")
    return Narrative(narrative.patient_id, text, narrative.risk_class, list(narrative.notes)), side
