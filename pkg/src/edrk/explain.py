"""Patient-level narratives with a machine-checkable claim sidecar.

The narrative is a deterministic template over a :class:`ContextBundle`.
Every number printed in the text is mirrored by exactly one claim, in text
order, so the assessor can re-derive each value from its source.
"""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .cohort import CohortStatistics
from .llm import TransportError

RISK_HIGH, RISK_LOW = "High", "Low"

FEATURE_NAMES = {
    "visits_past_2_months": "Number of Visits in Prior Two Months",
    "esi_level": "Acuity Level (ESI)",
    "hour_of_day": "Hour of Day",
    "day_of_month": "Day of Month",
    "month": "Month of Year",
    "gender": "Gender",
    "marital_status": "Marital Status",
    "race": "Race",
    "ethnic_group": "Ethnic Group",
    "language": "Language",
    "insurance": "Insurance",
    "is_weekend": "Weekend Arrival",
    "age_band": "Age Band",
    "systolic_bp_cat": "Systolic Blood Pressure",
    "diastolic_bp_cat": "Diastolic Blood Pressure",
    "heart_rate_cat": "Heart Rate",
    "temperature_cat": "Temperature",
    "bmi_cat": "Body Mass Index",
    "chief_complaint": "Chief Complaint Category",
    "alcohol": "Alcohol Use",
    "exercise": "Exercise",
    "home_environment": "Home Environment",
    "nutrition": "Nutrition",
    "sexual_orientation": "Sexual Orientation",
    "substance_abuse": "Substance Use",
    "tobacco": "Tobacco Use",
}
INTEGER_FEATURES = {"visits_past_2_months", "esi_level", "hour_of_day", "day_of_month", "month"}
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth")

NUMERIC_TOKEN = re.compile(r"(?<![\w.])[+-]?\d+(?:\.\d+)?(?![\w.])")
PATIENT_ID_RE = re.compile(r"Patient ID: \S+")
CLASS_RE = re.compile(r"classified as \*\*(High|Low) Risk\*\*")


def display_name(feature: str) -> str:
    return FEATURE_NAMES.get(feature, feature.replace("_", " ").title())


def classify_risk(probability: float, threshold: float = 0.5) -> str:
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability {probability} outside [0, 1]")
    return RISK_HIGH if probability >= threshold else RISK_LOW


def numeric_tokens(text: str) -> list[str]:
    """Numeric tokens of a narrative, ignoring the patient identifier."""
    return NUMERIC_TOKEN.findall(PATIENT_ID_RE.sub("Patient ID: #", text))


def fmt(value: float, precision: int, signed: bool = False) -> str:
    rounded = round(float(value), precision)
    if rounded == 0:
        rounded = 0.0  # no "-0.00"
    return f"{rounded:+.{precision}f}" if signed else f"{rounded:.{precision}f}"


# -- data types ----------------------------------------------------------------------------------


@dataclass
class Claim:
    claim_id: str
    kind: str  # numeric | direction | ordering | risk_class
    stated_value: Any
    source: str  # patient | cohort_stats | shap | prediction
    source_key: str
    display_precision: int | None = None
    scale: float = 1.0
    text: str | None = None  # exact token printed in the narrative (numeric claims)
    feature: str | None = None


@dataclass
class ClaimSidecar:
    patient_id: str
    claims: list[Claim] = field(default_factory=list)

    def add(self, kind, stated, source, key, precision=None, scale=1.0, text=None, feature=None) -> Claim:
        claim = Claim(f"c{len(self.claims) + 1:02d}", kind, stated, source, key, precision, scale, text, feature)
        self.claims.append(claim)
        return claim

    def numeric(self) -> list[Claim]:
        return [c for c in self.claims if c.kind == "numeric"]

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "claims": [asdict(c) for c in self.claims]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClaimSidecar":
        return cls(data["patient_id"], [Claim(**c) for c in data["claims"]])


@dataclass
class Narrative:
    patient_id: str
    text: str
    risk_class: str
    notes: list[str] = field(default_factory=list)


@dataclass
class ContextBundle:
    patient_id: str
    patient: dict[str, Any]  # harmonized (raw and binned) values by source field
    probability: float
    threshold: float
    risk_class: str
    shap: dict[str, float]  # grouped attributions, margin scale
    base_value: float
    top_features: list[str]
    cohort: CohortStatistics | None
    risk_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    partial: bool = False

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "patient": {k: (v.item() if hasattr(v, "item") else v) for k, v in self.patient.items()},
            "probability": self.probability,
            "threshold": self.threshold,
            "risk_class": self.risk_class,
            "shap": self.shap,
            "base_value": self.base_value,
            "top_features": self.top_features,
            "cohort": None if self.cohort is None else self.cohort.to_dict(),
            "risk_ranges": {k: list(v) for k, v in self.risk_ranges.items()},
            "partial": self.partial,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ContextBundle":
        return cls(
            data["patient_id"],
            dict(data["patient"]),
            data["probability"],
            data["threshold"],
            data["risk_class"],
            dict(data["shap"]),
            data["base_value"],
            list(data["top_features"]),
            None if data["cohort"] is None else CohortStatistics.from_dict(data["cohort"]),
            {k: tuple(v) for k, v in data["risk_ranges"].items()},
            data["partial"],
        )

    def group_key(self) -> str:
        return "high" if self.risk_class == RISK_HIGH else "low"


def top_k(shap: Mapping[str, float], k: int) -> list[str]:
    """Features by descending |phi|, ties by name."""
    return [f for f, _ in sorted(shap.items(), key=lambda t: (-abs(t[1]), t[0]))][:k]


def risk_ranges(table, predicted_high: np.ndarray, features: Sequence[str]) -> dict[str, tuple[float, float]]:
    """Min/max of each numeric feature over rows predicted high risk."""
    out = {}
    sub = table[np.asarray(predicted_high, dtype=bool)]
    for f in features:
        if f in sub.columns and len(sub) and np.issubdtype(sub[f].dtype, np.number):
            out[f] = (float(sub[f].min()), float(sub[f].max()))
    return out


def build_context(
    patient_id: str,
    patient: Mapping[str, Any],
    probability: float,
    cohort: CohortStatistics | None,
    shap: Mapping[str, float],
    base_value: float = 0.0,
    threshold: float = 0.5,
    k: int = 3,
    ranges: Mapping[str, tuple[float, float]] | None = None,
) -> ContextBundle:
    unknown = set(shap) - set(patient)
    if unknown:
        raise ValueError(f"attributions reference features missing from the patient record: {sorted(unknown)}")
    risk = classify_risk(probability, threshold)
    features = top_k(shap, max(0, min(k, len(shap))))
    partial = cohort is None or cohort.get("high" if risk == RISK_HIGH else "low") is None or cohort.get("low") is None or cohort.get("high") is None
    return ContextBundle(
        patient_id=patient_id,
        patient=dict(patient),
        probability=float(probability),
        threshold=float(threshold),
        risk_class=risk,
        shap={f: float(v) for f, v in shap.items()},
        base_value=float(base_value),
        top_features=features,
        cohort=cohort,
        risk_ranges={f: tuple(v) for f, v in (ranges or {}).items() if f in features},
        partial=partial,
    )


# -- generation ----------------------------------------------------------------------------------


def _is_numeric(value) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool)


def generate_narrative(bundle: ContextBundle, k: int = 3) -> tuple[Narrative, ClaimSidecar]:
    notes = []
    if k > len(bundle.shap):
        notes.append(f"k={k} clamped to the {len(bundle.shap)} available features")
    k = max(0, min(k, len(bundle.shap)))
    features = top_k(bundle.shap, k)
    risk = bundle.risk_class
    group = bundle.group_key()
    side = ClaimSidecar(bundle.patient_id)
    lines = [
        "## Patient Risk Classification and Explanation",
        "",
        f"Patient ID: {bundle.patient_id} has been classified as **{risk} Risk** of a return emergency department "
        "visit within the thirty-day window, based on the model output and its SHAP attributions.",
    ]
    side.add("risk_class", risk, "prediction", "prediction/risk_class")
    if not features:
        return Narrative(bundle.patient_id, "\n".join(lines) + "\n", risk, notes), side

    lines += ["", f"## Risk Assessment Summary: {risk} Risk Factors", ""]
    for rank, f in enumerate(features):
        phi = bundle.shap[f]
        contrib = fmt(phi, 2, signed=True)
        direction = "increase" if phi > 0 else "decrease" if phi < 0 else "none"
        verb = {"increase": "raises", "decrease": "lowers", "none": "does not move"}[direction]
        side.add("numeric", float(contrib), "shap", f"phi/{f}", 2, 1.0, contrib, f)
        side.add("ordering", rank + 1, "shap", f"rank/{f}", feature=f)
        side.add("direction", direction, "shap", f"phi/{f}", feature=f)
        lines.append(
            f"- **{display_name(f)}**: SHAP Value Contribution: {contrib} (ranked {ORDINALS[rank]} among the "
            f"highlighted factors; it {verb} the predicted return risk)"
        )

    lines += ["", f"## Analysis of Patient's {risk}-Risk Classification", ""]
    for f in features:
        value = bundle.patient.get(f)
        if _is_numeric(value):
            lines.append(f"- {display_name(f)}: the patient's value is weighed against the {group}-risk group profile below.")
        else:
            lines.append(f"- {display_name(f)}: the patient's category is **{value}**.")

    lines += ["", "## Comparison with Population Statistics", ""]
    if bundle.partial or bundle.cohort is None:
        lines.append("Population statistics for the comparison group are unavailable, so no comparison is made.")
        notes.append("partial context: comparison suppressed")
        return Narrative(bundle.patient_id, "\n".join(lines) + "\n", risk, notes), side

    cohort = bundle.cohort
    for f in features:
        value = bundle.patient.get(f)
        if _is_numeric(value):
            mean_key, std_key = f"{group}/{f}/mean", f"{group}/{f}/std"
            mean, std = cohort.lookup(mean_key), cohort.lookup(std_key)
            if mean is None or std is None:
                lines.append(f"- {display_name(f)}: no {group}-risk group statistics recorded.")
                continue
            p = 0 if f in INTEGER_FEATURES else 1
            v_txt, m_txt, s_txt = fmt(value, p), fmt(mean, 1), fmt(std, 1)
            side.add("numeric", float(v_txt), "patient", f"patient/{f}", p, 1.0, v_txt, f)
            side.add("numeric", float(m_txt), "cohort_stats", mean_key, 1, 1.0, m_txt, f)
            side.add("numeric", float(s_txt), "cohort_stats", std_key, 1, 1.0, s_txt, f)
            lines.append(f"- {display_name(f)}: patient value {v_txt}; {group}-risk group mean {m_txt} ± {s_txt}")
        else:
            prev_key = f"{group}/{f}/{value}/prevalence"
            rate_key = f"bin_rate/{f}/{value}"
            prev, rate = cohort.lookup(prev_key), cohort.lookup(rate_key)
            if prev is None or rate is None:
                lines.append(f"- {display_name(f)}: no statistics recorded for category {value}.")
                continue
            prev_txt, rate_txt = fmt(100 * prev, 1), fmt(100 * rate, 1)
            side.add("numeric", float(prev_txt), "cohort_stats", prev_key, 1, 100.0, prev_txt, f)
            side.add("numeric", float(rate_txt), "cohort_stats", rate_key, 1, 100.0, rate_txt, f)
            lines.append(
                f"- {display_name(f)} ({value}): {prev_txt}% of the {group}-risk group share this category, "
                f"and {rate_txt}% of visits in this category were predicted high risk"
            )
    return Narrative(bundle.patient_id, "\n".join(lines) + "\n", risk, notes), side


# -- optional rewrite pass -----------------------------------------------------------------------

POLISH_INSTRUCTION = (
    "Rewrite the following clinical risk explanation as fluent prose for a clinician. "
    "Keep the section headings. Copy every number exactly as written, do not add or drop any number."
)


def llm_polish(narrative: Narrative, sidecar: ClaimSidecar, client) -> Narrative:
    """Rewrite via ``client``; rejected unless the numeric tokens match the sidecar exactly."""
    if client is None or getattr(client, "offline", False):
        return narrative
    try:
        reply = client.complete([{"role": "user", "content": f"{POLISH_INSTRUCTION}\n\n{narrative.text}"}])
    except TransportError as exc:
        warnings.warn(f"polish skipped for {narrative.patient_id}: {exc}", stacklevel=2)
        return narrative
    expected = Counter(c.text for c in sidecar.numeric())
    if Counter(numeric_tokens(reply)) != expected:
        warnings.warn(f"polish rejected for {narrative.patient_id}: numeric tokens changed", stacklevel=2)
        return narrative
    if not CLASS_RE.search(reply) or CLASS_RE.search(reply).group(1) != narrative.risk_class:
        warnings.warn(f"polish rejected for {narrative.patient_id}: risk statement changed", stacklevel=2)
        return narrative
    return Narrative(narrative.patient_id, reply if reply.endswith("\n") else reply + "\n", narrative.risk_class, narrative.notes + ["polished"])


# -- files ---------------------------------------------------------------------------------------


def write_narratives(directory: str | Path, items: Sequence[tuple[Narrative, ClaimSidecar, ContextBundle]]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for narrative, sidecar, bundle in items:
        pid = narrative.patient_id
        (directory / f"{pid}.md").write_text(narrative.text)
        (directory / f"{pid}.claims.json").write_text(json.dumps(sidecar.to_dict(), indent=1) + "\n")
        (directory / f"{pid}.context.json").write_text(json.dumps(bundle.to_dict(), indent=1, sort_keys=True) + "\n")
        manifest.append({"patient_id": pid, "narrative": f"{pid}.md", "claims": f"{pid}.claims.json", "context": f"{pid}.context.json"})
    (directory / "manifest.json").write_text(json.dumps({"pairs": manifest}, indent=1) + "\n")
    return directory


def read_narratives(directory: str | Path) -> list[tuple[Narrative, ClaimSidecar, ContextBundle]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = []
    for entry in manifest["pairs"]:
        sidecar = ClaimSidecar.from_dict(json.loads((directory / entry["claims"]).read_text()))
        bundle = ContextBundle.from_dict(json.loads((directory / entry["context"]).read_text()))
        text = (directory / entry["narrative"]).read_text()
        match = CLASS_RE.search(text)
        out.append((Narrative(entry["patient_id"], text, match.group(1) if match else ""), sidecar, bundle))
    return out
