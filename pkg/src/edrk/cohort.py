"""Visit-level data model, eligibility, 30-day return labels and the synthetic cohort generator."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from . import texts

UNKNOWN = "Unknown"
RETURN_WINDOW = timedelta(days=30)
VITAL_KINDS = ("systolic_bp", "diastolic_bp", "heart_rate", "temperature", "bmi")

CSV_COLUMNS = (
    "patient_id",
    "visit_id",
    "arrival",
    "age_years",
    "gender",
    "marital_status",
    "race",
    "ethnic_group",
    "language",
    "insurance",
    "esi_level",
    "icd_code",
    "chief_complaint_text",
    "visits_past_2_months",
)

# Population characteristics of the source cohort, in percent.
TARGET_MARGINALS: dict[str, dict[str, float]] = {
    "gender": {"M": 55.06, "F": 44.94},
    "marital_status": {
        "Single": 63.07,
        "Married": 17.79,
        "Divorced": 9.78,
        "Widowed": 3.89,
        "Unknown": 3.17,
        "Separated": 2.09,
        "Life Partner": 0.21,
    },
    "race": {
        "White": 50.32,
        "Black or African American": 45.57,
        "Other": 2.38,
        "Decline/Refuse": 1.25,
        "Unknown": 0.48,
    },
    "ethnic_group": {
        "Non-Hispanic/Latino": 95.20,
        "Unknown": 1.98,
        "Not Reported": 1.69,
        "Hispanic/Latino": 1.07,
        "Multiple": 0.06,
    },
    "language": {"English": 96.66, "Other": 3.33, "Sign Language": 0.01},
    "insurance": {
        "Government Insurance": 34.47,
        "Self-Pay": 33.74,
        "Private Insurance": 22.71,
        "Other": 9.08,
    },
    "esi_level": {"3": 48.13, "2": 27.68, "4": 20.46, "5": 2.93, "1": 0.80},
    "weekend": {"False": 73.30, "True": 26.70},
    "systolic_bp": {"Elevated": 37.92, "Hypertension": 33.51, "Normal": 28.14, "Low": 0.44},
    "diastolic_bp": {"Normal": 41.98, "Elevated": 29.27, "Hypertension": 24.36, "Low": 4.40},
    "temperature": {"Normal": 95.64, "Fever": 2.98, "Below Normal": 1.27, "Hypothermia": 0.12},
    "heart_rate": {"Normal": 83.10, "Tachycardia": 14.62, "Bradycardia": 2.28},
    "age_band": {"31_45": 38.17, "18_30": 26.46, "46_60": 22.76, "Over_60": 12.61},
    "bmi": {"Normal Weight": 38.39, "Overweight": 29.00, "Obese": 28.86, "Underweight": 3.75},
    "chief_complaint": {"Pain": 45.82, "Psychiatric": 36.25, "Injury": 9.32, "Infection": 8.15, "Unclear": 0.46},
    "tobacco": {
        "Current Use": 35.52,
        "Unclear/Other": 34.07,
        "No Use": 21.39,
        "Former Use": 8.05,
        "Occasional Use": 0.89,
        "Prescribed Use": 0.08,
    },
    "nutrition": {
        "Unclear/Other": 79.64,
        "Moderate Nutrition": 10.75,
        "Good Nutrition": 4.51,
        "Poor Nutrition": 2.73,
        "Special Diet": 1.30,
        "Assistance Required": 1.06,
    },
    "home_environment": {
        "Unclear/Other": 69.02,
        "Independent": 16.12,
        "Family Support": 8.83,
        "Homeless": 3.21,
        "Living with Friends": 1.66,
        "Assisted Living": 0.75,
        "Unstable Housing": 0.40,
    },
    "alcohol": {
        "Unclear/Other": 35.40,
        "No Alcohol Use": 31.27,
        "Current Alcohol Use": 17.39,
        "Past Alcohol Use": 8.19,
        "Occasional Use": 7.58,
        "Recovering": 0.16,
    },
    "exercise": {
        "Unclear/Other": 60.35,
        "No Exercise": 30.89,
        "Light Exercise": 5.50,
        "Moderate Exercise": 2.80,
        "Vigorous Exercise": 0.39,
        "Physical Therapy": 0.08,
    },
    "sexual_orientation": {
        "Unclear/Other": 91.89,
        "Heterosexual": 5.57,
        "Gender Non-Binary": 1.75,
        "Homosexual": 0.43,
        "Transgender": 0.17,
        "Bisexual": 0.16,
        "Asexual": 0.01,
        "Queer/Other": 0.01,
    },
    "substance_abuse": {
        "No Use": 38.88,
        "Unclear/Other": 33.48,
        "Recreational Use": 10.59,
        "Current Use": 10.23,
        "Former Use": 5.74,
        "Prescribed Use": 1.07,
    },
}

# Moments of prior-visit counts: mean 1.03, sd 2.75, range 0-52.
VISITS_MEAN = 1.03
VISITS_STD = 2.75
VISITS_MAX = 52

CATEGORICAL_FIELDS = ("gender", "marital_status", "race", "ethnic_group", "language", "insurance")
CLOSED_SETS: dict[str, frozenset[str]] = {
    name: frozenset(TARGET_MARGINALS[name]) | {UNKNOWN} for name in CATEGORICAL_FIELDS
}

# Arrival hour weights: raised cosine peaking mid-afternoon (mean 12.7 h, sd 6.5 h).
_HOURS = np.arange(24)
HOUR_WEIGHTS = 1.0 + 0.3453 * np.cos(2 * np.pi * (_HOURS - 15.84) / 24)
HOUR_WEIGHTS = HOUR_WEIGHTS / HOUR_WEIGHTS.sum()

ICD_CODES = {
    "F32.9": 0.18,
    "F33.2": 0.06,
    "F41.1": 0.10,
    "F41.9": 0.08,
    "F10.20": 0.10,
    "F10.129": 0.04,
    "F19.20": 0.07,
    "F14.10": 0.04,
    "F20.9": 0.08,
    "F25.0": 0.04,
    "F31.9": 0.08,
    "F43.10": 0.05,
    "F29": 0.04,
    "F60.3": 0.04,
}

AGE_RANGES = {"18_30": (18, 30), "31_45": (31, 45), "46_60": (46, 60), "Over_60": (61, 90)}

# Per-category sampling ranges for vital values, kept clear of the bin cut-offs.
VITAL_RANGES = {
    "systolic_bp": {"Low": (75, 89), "Normal": (90, 119), "Elevated": (120, 129), "Hypertension": (130, 185)},
    "diastolic_bp": {"Low": (45, 59), "Normal": (60, 79), "Elevated": (80, 89), "Hypertension": (90, 115)},
    "heart_rate": {"Bradycardia": (45, 59), "Normal": (60, 100), "Tachycardia": (101, 140)},
    "temperature": {
        "Hypothermia": (33.5, 34.8),
        "Below Normal": (35.1, 36.0),
        "Normal": (36.2, 37.9),
        "Fever": (38.2, 40.0),
    },
    "bmi": {"Underweight": (15.0, 18.3), "Normal Weight": (18.6, 24.8), "Overweight": (25.1, 29.8), "Obese": (30.1, 45.0)},
}

DEFAULT_LABEL_COEFFICIENTS: dict[str, float] = {
    "visits_past_2_months": 1.0,
    "esi_level=1": 0.35,
    "esi_level=2": 0.35,
    "esi_level=4": -0.2,
    "esi_level=5": -0.35,
    "insurance=Self-Pay": 0.25,
    "insurance=Government Insurance": 0.2,
    "insurance=Private Insurance": -0.25,
    "age_band=18_30": 0.1,
    "age_band=Over_60": -0.25,
    "gender=M": 0.1,
    "marital_status=Single": 0.1,
    "chief_complaint=Psychiatric": 0.75,
    "chief_complaint=Unclear": 0.3,
    "chief_complaint=Injury": -0.2,
    "substance_abuse=Current Use": 0.9,
    "substance_abuse=Recreational Use": 0.4,
    "substance_abuse=Former Use": 0.25,
    "home_environment=Homeless": 1.0,
    "home_environment=Unstable Housing": 0.8,
    "home_environment=Living with Friends": 0.3,
    "alcohol=Current Alcohol Use": 0.5,
    "alcohol=Recovering": 0.3,
    "tobacco=Current Use": 0.2,
}

NUMERIC_COVARIATES = ("visits_past_2_months", "esi_level", "hour_of_day")


class CalibrationError(ValueError):
    """The label model cannot be calibrated to the requested return rate."""


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    visit_id: str
    arrival: datetime
    age_years: int
    gender: str
    marital_status: str
    race: str
    ethnic_group: str
    language: str
    insurance: str
    esi_level: int
    icd_code: str
    chief_complaint_text: str
    sdoh_texts: Mapping[str, str]
    vitals_raw: tuple[tuple[str, float, datetime], ...]
    visits_past_2_months: int
    # generator sidecar: gold categories behind the free-text fields
    gold: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.esi_level not in (1, 2, 3, 4, 5):
            raise ValueError(f"{self.visit_id}: esi_level must be 1-5, got {self.esi_level}")
        if self.visits_past_2_months < 0:
            raise ValueError(f"{self.visit_id}: visits_past_2_months must be >= 0")
        if self.age_years < 0:
            raise ValueError(f"{self.visit_id}: negative age")
        for name in CATEGORICAL_FIELDS:
            value = getattr(self, name)
            if value not in CLOSED_SETS[name]:
                raise ValueError(f"{self.visit_id}: {name}={value!r} is not in the closed set")


@dataclass
class CohortSpec:
    n_visits: int = 20_000
    marginals: dict[str, dict[str, float]] = field(default_factory=dict)
    label_coefficients: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LABEL_COEFFICIENTS))
    target_return_rate: float = 0.266
    seed: int = 0
    repeat_visit_prob: float = 0.10
    vitals_missing_rate: float = 0.03

    def __post_init__(self):
        merged = normalized_marginals()
        for name, table in (self.marginals or {}).items():
            total = float(sum(table.values()))
            if total <= 0:
                raise ValueError(f"marginal {name!r} has no mass")
            merged[name] = {k: v / total for k, v in table.items()}
        self.marginals = merged
        self.validate()

    def validate(self):
        if self.n_visits < 1:
            raise ValueError("n_visits must be positive")
        if not 0.0 < self.target_return_rate < 1.0:
            raise ValueError("target_return_rate must lie in (0, 1)")
        for name, table in self.marginals.items():
            if abs(sum(table.values()) - 1.0) > 1e-9:
                raise ValueError(f"marginal {name!r} does not sum to 1")
            if any(p < 0 for p in table.values()):
                raise ValueError(f"marginal {name!r} has a negative probability")

    @classmethod
    def from_dict(cls, data: Mapping) -> "CohortSpec":
        data = dict(data)
        coefs = dict(DEFAULT_LABEL_COEFFICIENTS)
        if "label_coefficients" in data:
            coefs = dict(data.pop("label_coefficients"))
        return cls(label_coefficients=coefs, **data)


def normalized_marginals() -> dict[str, dict[str, float]]:
    """Target rows rescaled to sum to one (several rows are off by 0.01pp)."""
    out = {}
    for name, table in TARGET_MARGINALS.items():
        total = sum(table.values())
        out[name] = {k: v / total for k, v in table.items()}
    return out


# -- eligibility and labels ---------------------------------------------------------


def filter_eligible(visits: Iterable[VisitRecord]) -> list[VisitRecord]:
    """Adults (age >= 18) with an ICD-10 code in chapter F, in input order."""
    return [
        v
        for v in visits
        if v.age_years >= 18 and v.icd_code.strip()[:1].upper() == "F"
    ]


def label_returns(visits: Sequence[VisitRecord]) -> dict[str, bool]:
    """Flag visits followed by another visit of the same patient within 30 days.

    The window is arrival-to-arrival: strictly after the index arrival and at
    most 30 x 24 hours later.
    """
    seen = set()
    by_patient: dict[str, list[tuple[datetime, str]]] = defaultdict(list)
    for v in visits:
        if v.visit_id in seen:
            raise ValueError(f"duplicate visit_id {v.visit_id!r}")
        seen.add(v.visit_id)
        by_patient[v.patient_id].append((v.arrival, v.visit_id))

    labels: dict[str, bool] = {}
    for items in by_patient.values():
        items.sort()
        times = [t for t, _ in items]
        for i, (t, vid) in enumerate(items):
            # first later arrival (ties with t are not "after")
            j = i + 1
            while j < len(items) and times[j] <= t:
                j += 1
            labels[vid] = j < len(items) and times[j] - t <= RETURN_WINDOW
    return {v.visit_id: labels[v.visit_id] for v in visits}


# -- generator -------------------------------------------------------------------------


def _zero_inflated_geometric_params(mean: float, std: float) -> tuple[float, float]:
    """(P(zero), geometric p) so that 0 w.p. pi, else 1 + Geom(p) hits mean and sd."""
    second = std**2 + mean**2
    p = 2.0 / (second / mean + 1.0)
    return 1.0 - mean * p, p


def sample_prior_visits(n: int, rng: np.random.Generator) -> np.ndarray:
    pi0, p = _zero_inflated_geometric_params(VISITS_MEAN, VISITS_STD)
    counts = rng.geometric(p, size=n)
    counts[rng.random(n) < pi0] = 0
    return np.minimum(counts, VISITS_MAX)


def _sample_categorical(table: Mapping[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    cats = list(table)
    probs = np.array([table[c] for c in cats], dtype=float)
    idx = rng.choice(len(cats), size=n, p=probs / probs.sum())
    return np.array(cats, dtype=object)[idx]


def _design(coefficients: Mapping[str, float], columns: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    names = sorted(coefficients)
    n = len(next(iter(columns.values())))
    X = np.zeros((n, len(names)))
    beta = np.zeros(len(names))
    for j, key in enumerate(names):
        coef = float(coefficients[key])
        if not math.isfinite(coef):
            raise CalibrationError(f"label coefficient {key!r} is not finite")
        beta[j] = coef
        if "=" in key:
            feat, cat = key.split("=", 1)
            if feat not in columns:
                raise ValueError(f"label model refers to unknown feature {feat!r}")
            X[:, j] = columns[feat].astype(str) == cat
        elif key == "visits_past_2_months":
            X[:, j] = np.log1p(columns[key])
        elif key in NUMERIC_COVARIATES:
            X[:, j] = columns[key]
        else:
            raise ValueError(f"label model refers to unknown covariate {key!r}")
    return X, beta


def calibrate_intercept(margin: np.ndarray, target: float) -> float:
    """Intercept b with mean(sigmoid(b + margin)) == target."""

    def gap(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(b + margin))))) - target

    lo, hi = -40.0, 40.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise CalibrationError(f"return rate {target} unreachable with the given coefficients")
    b = brentq(gap, lo, hi, xtol=1e-12)
    if abs(gap(b)) > 1e-3:
        raise CalibrationError(f"calibration stalled at rate {gap(b) + target:.4f}, target {target}")
    return b


def _day_pools(start: date, end: date):
    days = np.arange(np.datetime64(start), np.datetime64(end) + 1)
    weekday = (days.astype("datetime64[D]").view("int64") - 4) % 7  # 0 = Monday
    weekend = weekday >= 5
    return days[weekend], days[~weekend]


def _pick_gap(prev: np.datetime64, weekend: bool, lo: int, hi: int, rng: np.random.Generator) -> int:
    gaps = np.arange(lo, hi + 1)
    weekday = ((prev + gaps).view("int64") - 4) % 7
    ok = gaps[(weekday >= 5) == weekend]
    return int(ok[rng.integers(len(ok))])


def _vital_readings(kind: str, category: str, arrival: datetime, rng: np.random.Generator):
    lo, hi = VITAL_RANGES[kind][category]
    decimal = kind in ("temperature", "bmi")
    if decimal:
        value = round(float(rng.integers(round(lo * 10), round(hi * 10) + 1)) / 10, 1)
        step = 0.1
    else:
        value = float(rng.integers(lo, hi + 1))
        step = 1.0
    n_read = 1 if kind == "bmi" else int(rng.integers(1, 4))
    if n_read == 1:
        values = [value]
    else:
        d = step * int(rng.integers(1, 4))
        values = [value - d, value + d] if n_read == 2 else [value - d, value, value + d]
        if decimal:
            values = [round(v, 1) for v in values]
    out = []
    for i, v in enumerate(values):
        out.append((kind, v, arrival + timedelta(minutes=5 + 45 * i)))
    return out


def generate_cohort(spec: CohortSpec) -> list[VisitRecord]:
    """Draw a synthetic cohort matching the target marginals.

    Return labels come from a logistic model over the sampled categories whose
    intercept is calibrated to ``spec.target_return_rate``; visit chains and
    arrival gaps are then laid out so that :func:`label_returns` recovers
    exactly those labels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_visits
    m = spec.marginals

    cols: dict[str, np.ndarray] = {}
    for name in (*CATEGORICAL_FIELDS, "esi_level", "weekend", "age_band", *VITAL_KINDS,
                 texts.CHIEF_COMPLAINT, *texts.SDOH_KINDS):
        cols[name] = _sample_categorical(m[name], n, rng)
    cols["visits_past_2_months"] = sample_prior_visits(n, rng)
    cols["hour_of_day"] = rng.choice(24, size=n, p=HOUR_WEIGHTS)
    cols["esi_level"] = cols["esi_level"].astype(int)

    X, beta = _design(spec.label_coefficients, cols)
    margin = X @ beta
    intercept = calibrate_intercept(margin, spec.target_return_rate)
    prob = 1.0 / (1.0 + np.exp(-(intercept + margin)))
    returned = rng.random(n) < prob
    returned[-1] = False  # the final visit has no successor to return to

    # visit i+1 continues visit i's patient after a return, or occasionally later on
    cont = returned[:-1] | (rng.random(n - 1) < spec.repeat_visit_prob)
    patient_idx = np.concatenate([[0], np.cumsum(~cont)])

    weekend_days, weekday_days = _day_pools(date(2018, 1, 1), date(2022, 12, 31))
    is_weekend = cols["weekend"] == "True"
    minutes = rng.integers(0, 60, size=n)
    day = np.empty(n, dtype="datetime64[D]")
    for i in range(n):
        if i == 0 or not cont[i - 1]:
            pool = weekend_days if is_weekend[i] else weekday_days
            day[i] = pool[rng.integers(len(pool))]
        elif returned[i - 1]:
            day[i] = day[i - 1] + _pick_gap(day[i - 1], bool(is_weekend[i]), 1, 29, rng)
        else:
            day[i] = day[i - 1] + _pick_gap(day[i - 1], bool(is_weekend[i]), 31, 365, rng)

    ages = np.empty(n, dtype=int)
    for band, (lo, hi) in AGE_RANGES.items():
        mask = cols["age_band"] == band
        ages[mask] = rng.integers(lo, hi + 1, size=int(mask.sum()))

    icd = _sample_categorical(ICD_CODES, n, rng)
    complaint_texts = texts.render_texts(texts.CHIEF_COMPLAINT, cols[texts.CHIEF_COMPLAINT], rng)
    sdoh = {kind: texts.render_texts(kind, cols[kind], rng) for kind in texts.SDOH_KINDS}

    visits = []
    for i in range(n):
        d = day[i].astype(object)
        arrival = datetime(d.year, d.month, d.day, int(cols["hour_of_day"][i]), int(minutes[i]), tzinfo=timezone.utc)
        vitals = []
        for kind in VITAL_KINDS:
            if rng.random() < spec.vitals_missing_rate:
                continue
            vitals.extend(_vital_readings(kind, cols[kind][i], arrival, rng))
        gold = {texts.CHIEF_COMPLAINT: cols[texts.CHIEF_COMPLAINT][i]}
        gold.update({kind: cols[kind][i] for kind in texts.SDOH_KINDS})
        visits.append(
            VisitRecord(
                patient_id=f"P{patient_idx[i] + 1:06d}",
                visit_id=f"V{i + 1:06d}",
                arrival=arrival,
                age_years=int(ages[i]),
                gender=cols["gender"][i],
                marital_status=cols["marital_status"][i],
                race=cols["race"][i],
                ethnic_group=cols["ethnic_group"][i],
                language=cols["language"][i],
                insurance=cols["insurance"][i],
                esi_level=int(cols["esi_level"][i]),
                icd_code=icd[i],
                chief_complaint_text=complaint_texts[i],
                sdoh_texts={kind: sdoh[kind][i] for kind in texts.SDOH_KINDS},
                vitals_raw=tuple(vitals),
                visits_past_2_months=int(cols["visits_past_2_months"][i]),
                gold=gold,
            )
        )
    return visits


# -- statistics ------------------------------------------------------------------------


@dataclass
class GroupStatistics:
    size: int
    available: bool
    numeric: dict[str, tuple[float, float]] = field(default_factory=dict)
    categorical: dict[str, dict[str, float]] = field(default_factory=dict)
    return_rate: float | None = None


@dataclass
class CohortStatistics:
    groups: dict[str, GroupStatistics]

    @property
    def total(self) -> int:
        return sum(g.size for g in self.groups.values())

    def get(self, group: str) -> GroupStatistics | None:
        g = self.groups.get(group)
        return g if g is not None and g.available else None

    def high_rate_within(self, feature: str, category: str) -> float | None:
        """Share of high-risk visits among visits with ``feature == category``."""
        hi, lo = self.get("high"), self.get("low")
        if hi is None or lo is None:
            return None
        n_hi = hi.categorical.get(feature, {}).get(category, 0.0) * hi.size
        n_lo = lo.categorical.get(feature, {}).get(category, 0.0) * lo.size
        if n_hi + n_lo == 0:
            return None
        return n_hi / (n_hi + n_lo)

    def lookup(self, key: str):
        """Resolve ``group/feature/mean|std`` or ``group/feature/category/prevalence``."""
        parts = key.split("/")
        if len(parts) == 3 and parts[0] == "bin_rate":
            return self.high_rate_within(parts[1], parts[2])
        g = self.get(parts[0]) if parts else None
        if g is None:
            return None
        if len(parts) == 3 and parts[2] in ("mean", "std"):
            stats = g.numeric.get(parts[1])
            return None if stats is None else stats[0 if parts[2] == "mean" else 1]
        if len(parts) == 4 and parts[3] == "prevalence":
            return g.categorical.get(parts[1], {}).get(parts[2])
        return None

    def to_dict(self) -> dict:
        return {
            name: {
                "size": g.size,
                "available": g.available,
                "return_rate": g.return_rate,
                "numeric": {k: {"mean": m, "std": s} for k, (m, s) in g.numeric.items()},
                "categorical": g.categorical,
            }
            for name, g in self.groups.items()
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CohortStatistics":
        groups = {}
        for name, g in data.items():
            groups[name] = GroupStatistics(
                size=g["size"],
                available=g["available"],
                numeric={k: (v["mean"], v["std"]) for k, v in g["numeric"].items()},
                categorical={k: dict(v) for k, v in g["categorical"].items()},
                return_rate=g.get("return_rate"),
            )
        return cls(groups)


def visit_frame(visits: Sequence[VisitRecord]) -> pd.DataFrame:
    """Flat per-visit table of the structured fields plus calendar parts."""
    rows = []
    for v in visits:
        rows.append(
            {
                "visit_id": v.visit_id,
                "patient_id": v.patient_id,
                "age_years": v.age_years,
                **{name: getattr(v, name) for name in CATEGORICAL_FIELDS},
                "esi_level": v.esi_level,
                "visits_past_2_months": v.visits_past_2_months,
                "hour_of_day": v.arrival.hour,
                "day_of_month": v.arrival.day,
                "month": v.arrival.month,
            }
        )
    return pd.DataFrame(rows).set_index("visit_id")


def cohort_statistics(visits, labels: Mapping[str, bool] | None, risk_partition: Mapping[str, str]) -> CohortStatistics:
    """Per risk group (``"low"``/``"high"``) means, sds and category prevalences.

    ``visits`` is a list of :class:`VisitRecord` or a table indexed by visit_id.
    Standard deviations are population (ddof=0) values.
    """
    frame = visits if isinstance(visits, pd.DataFrame) else visit_frame(visits)
    missing = [vid for vid in frame.index if vid not in risk_partition]
    if missing:
        raise ValueError(f"{len(missing)} visits have no risk-group assignment")
    groups_of = np.array([risk_partition[vid] for vid in frame.index])
    numeric_cols = [
        c for c in frame.columns
        if pd.api.types.is_numeric_dtype(frame[c]) and not pd.api.types.is_bool_dtype(frame[c])
    ]
    categorical_cols = [c for c in frame.columns if c not in numeric_cols and c != "patient_id"]

    groups = {}
    for name in ("low", "high"):
        sub = frame[groups_of == name]
        if len(sub) == 0:
            groups[name] = GroupStatistics(size=0, available=False)
            continue
        numeric = {}
        for c in numeric_cols:
            values = sub[c].to_numpy(dtype=float)
            values = values[~np.isnan(values)]
            if len(values):
                numeric[c] = (float(values.mean()), float(values.std()))
        categorical = {}
        for c in categorical_cols:
            counts = sub[c].astype(str).value_counts()
            categorical[c] = {k: float(v) / len(sub) for k, v in sorted(counts.items())}
        rate = None
        if labels is not None:
            rate = float(np.mean([bool(labels[vid]) for vid in sub.index]))
        groups[name] = GroupStatistics(len(sub), True, numeric, categorical, rate)
    return CohortStatistics(groups)


def observed_marginals(visits: Sequence[VisitRecord]) -> dict[str, dict[str, float]]:
    """Empirical category shares of a cohort, keyed like :data:`TARGET_MARGINALS`."""
    from .harmonize import DEFAULT_SCHEMES, average_vitals, bin_age, bin_clinical

    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    totals: dict[str, int] = defaultdict(int)

    def add(name, value):
        counts[name][str(value)] += 1
        totals[name] += 1

    for v in visits:
        for name in CATEGORICAL_FIELDS:
            add(name, getattr(v, name))
        add("esi_level", v.esi_level)
        add("weekend", v.arrival.weekday() >= 5)
        add("age_band", bin_age(v.age_years))
        for kind, value in average_vitals(v.vitals_raw).items():
            add(kind, bin_clinical(DEFAULT_SCHEMES[kind], value))
        for name, value in v.gold.items():
            add(name, value)
    return {name: {k: c / totals[name] for k, c in table.items()} for name, table in counts.items()}


# -- file formats ------------------------------------------------------------------------


def _ts(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_ts(s: str) -> datetime:
    t = datetime.fromisoformat(s.replace("Z", "+00:00"))
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def write_cohort(visits: Sequence[VisitRecord], directory: str | Path, *, include_gold: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "visits.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for v in visits:
            row = [getattr(v, c) for c in CSV_COLUMNS]
            row[CSV_COLUMNS.index("arrival")] = _ts(v.arrival)
            writer.writerow(row)
    with open(directory / "sdoh.jsonl", "w", encoding="utf-8") as fh:
        for v in visits:
            fh.write(json.dumps({"visit_id": v.visit_id, "sdoh_texts": dict(v.sdoh_texts)}) + "\n")
    with open(directory / "vitals.jsonl", "w", encoding="utf-8") as fh:
        for v in visits:
            vitals = [[k, val, _ts(t)] for k, val, t in v.vitals_raw]
            fh.write(json.dumps({"visit_id": v.visit_id, "vitals": vitals}) + "\n")
    if include_gold and any(v.gold for v in visits):
        with open(directory / "gold.jsonl", "w", encoding="utf-8") as fh:
            for v in visits:
                fh.write(json.dumps({"visit_id": v.visit_id, "gold": dict(v.gold)}) + "\n")
    return directory


def _read_jsonl(path: Path) -> dict[str, dict]:
    out = {}
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    out[rec["visit_id"]] = rec
    return out


def read_cohort(directory: str | Path) -> list[VisitRecord]:
    directory = Path(directory)
    sdoh = _read_jsonl(directory / "sdoh.jsonl")
    vitals = _read_jsonl(directory / "vitals.jsonl")
    gold = _read_jsonl(directory / "gold.jsonl")
    visits = []
    with open(directory / "visits.csv", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"visits.csv header must be exactly {','.join(CSV_COLUMNS)}")
        for row in reader:
            vid = row["visit_id"]
            raw = vitals.get(vid, {}).get("vitals", [])
            visits.append(
                VisitRecord(
                    patient_id=row["patient_id"],
                    visit_id=vid,
                    arrival=_parse_ts(row["arrival"]),
                    age_years=int(row["age_years"]),
                    gender=row["gender"],
                    marital_status=row["marital_status"],
                    race=row["race"],
                    ethnic_group=row["ethnic_group"],
                    language=row["language"],
                    insurance=row["insurance"],
                    esi_level=int(row["esi_level"]),
                    icd_code=row["icd_code"],
                    chief_complaint_text=row["chief_complaint_text"],
                    sdoh_texts=sdoh.get(vid, {}).get("sdoh_texts", {}),
                    vitals_raw=tuple((k, float(val), _parse_ts(t)) for k, val, t in raw),
                    visits_past_2_months=int(row["visits_past_2_months"]),
                    gold=gold.get(vid, {}).get("gold", {}),
                )
            )
    return visits
