"""Raw visits to a model-ready feature matrix.

Order of operations in :class:`Harmonizer`: sentinel recode, rare-category
collapse, sparse-categorical drop and ``"Unknown"`` fill, KNN imputation of the
continuous block, clinical binning of vitals and age, one-hot encoding and
z-scoring.  Everything data-dependent is fitted on the training rows only.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .cohort import UNKNOWN, VITAL_KINDS, VisitRecord

MISSING_SENTINELS = ("Unknown", "Missing Response")
INF = math.inf


@dataclass(frozen=True)
class BinScheme:
    """Ordered cut-offs ``(bound, category, inclusive)``.

    A value falls in the first category whose bound it is below (or equal to,
    when ``inclusive``).  The last bound must be ``+inf`` so the categories
    cover the whole real line.
    """

    kind: str
    thresholds: tuple[tuple[float, str, bool], ...]

    def __post_init__(self):
        bounds = [b for b, _, _ in self.thresholds]
        if not bounds or bounds[-1] != INF:
            raise ValueError(f"{self.kind}: last bound must be +inf")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"{self.kind}: bounds must be strictly increasing")

    @property
    def categories(self) -> list[str]:
        return [name for _, name, _ in self.thresholds]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "thresholds": [[None if b == INF else b, name, inc] for b, name, inc in self.thresholds],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BinScheme":
        return cls(
            data["kind"],
            tuple((INF if b is None else float(b), name, bool(inc)) for b, name, inc in data["thresholds"]),
        )


DEFAULT_SCHEMES: dict[str, BinScheme] = {
    "bmi": BinScheme(
        "bmi",
        ((18.5, "Underweight", False), (25.0, "Normal Weight", False), (30.0, "Overweight", False), (INF, "Obese", True)),
    ),
    "systolic_bp": BinScheme(
        "systolic_bp",
        ((90.0, "Low", False), (120.0, "Normal", False), (130.0, "Elevated", False), (INF, "Hypertension", True)),
    ),
    "diastolic_bp": BinScheme(
        "diastolic_bp",
        ((60.0, "Low", False), (80.0, "Normal", False), (90.0, "Elevated", False), (INF, "Hypertension", True)),
    ),
    "heart_rate": BinScheme(
        "heart_rate",
        ((60.0, "Bradycardia", False), (100.0, "Normal", True), (INF, "Tachycardia", True)),
    ),
    "temperature": BinScheme(
        "temperature",
        ((35.0, "Hypothermia", False), (36.1, "Below Normal", False), (38.0, "Normal", True), (INF, "Fever", True)),
    ),
    "age": BinScheme(
        "age",
        ((30.0, "18_30", True), (45.0, "31_45", True), (60.0, "46_60", True), (INF, "Over_60", True)),
    ),
}


def bin_clinical(scheme: BinScheme, value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"cannot bin non-finite value {value!r}")
    for bound, name, inclusive in scheme.thresholds:
        if value < bound or (inclusive and value == bound):
            return name
    raise AssertionError("unreachable: last bound is +inf")


def bin_age(age_years: int) -> str:
    if age_years < 18:
        raise ValueError(f"age {age_years} is below the adult cohort minimum of 18")
    return bin_clinical(DEFAULT_SCHEMES["age"], float(age_years))


def average_vitals(vitals_raw: Iterable[tuple]) -> dict[str, float]:
    """Arithmetic mean of the readings per vital kind; absent kinds are omitted."""
    sums: dict[str, list[float]] = {}
    for kind, value, *_ in vitals_raw:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite {kind} reading {value!r}")
        sums.setdefault(kind, []).append(value)
    return {kind: float(np.mean(vals)) for kind, vals in sums.items()}


@dataclass(frozen=True)
class TemporalFeatures:
    hour_of_day: int
    day_of_month: int
    month: int
    is_weekend: bool


def derive_temporal(arrival: datetime) -> TemporalFeatures:
    return TemporalFeatures(arrival.hour, arrival.day, arrival.month, arrival.weekday() >= 5)


def recode_unknown(table: pd.DataFrame) -> pd.DataFrame:
    """Replace ``"Unknown"`` / ``"Missing Response"`` cells with NaN."""
    out = table.copy()
    for col in out.columns:
        if out[col].dtype == object:
            out[col] = out[col].where(~out[col].isin(MISSING_SENTINELS), np.nan)
    return out


def sparse_categoricals(table: pd.DataFrame, threshold: float = 0.20, columns: Sequence[str] | None = None) -> list[str]:
    """Categorical columns whose missing fraction is strictly above ``threshold``."""
    if columns is None:
        columns = [c for c in table.columns if table[c].dtype == object]
    return [c for c in columns if float(table[c].isna().mean()) > threshold]


def drop_sparse_categoricals(table: pd.DataFrame, threshold: float = 0.20, columns: Sequence[str] | None = None) -> pd.DataFrame:
    """Drop categoricals missing in more than ``threshold`` of rows; fill the rest with ``"Unknown"``."""
    if columns is None:
        columns = [c for c in table.columns if table[c].dtype == object]
    dropped = sparse_categoricals(table, threshold, columns)
    out = table.drop(columns=dropped)
    for c in columns:
        if c not in dropped:
            out[c] = out[c].where(out[c].notna(), UNKNOWN)
    return out


def collapse_rare(table: pd.DataFrame, column: str, min_share: float, other: str = "Other") -> pd.DataFrame:
    """Merge categories rarer than ``min_share`` (of observed values) into ``other``."""
    out = table.copy()
    shares = out[column].value_counts(normalize=True)
    rare = set(shares[shares < min_share].index)
    out[column] = out[column].where(~out[column].isin(rare), other)
    return out


class KnnImputer:
    """Mean of the k nearest donor rows, nan-aware Euclidean distance.

    Distances use the columns observed in both rows, scaled by
    sqrt(n_columns / n_shared).  Ties go to the lower donor index.
    """

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k

    def fit(self, donors: np.ndarray) -> "KnnImputer":
        self.donors_ = np.asarray(donors, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            means = np.nanmean(self.donors_, axis=0)
        self.col_means_ = np.where(np.isnan(means), 0.0, means)
        return self

    def _exact(self, row: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Scaled squared nan-Euclidean distances from ``row`` to donors ``idx``."""
        D = self.donors_[idx]
        both = ~np.isnan(D) & ~np.isnan(row)
        diff = np.where(both, D - np.where(np.isnan(row), 0.0, row), 0.0)
        n_shared = both.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = D.shape[1] / n_shared * (diff**2).sum(axis=1)
        out[n_shared == 0] = np.inf
        return out

    def _nearest(self, row: np.ndarray, approx: np.ndarray, tol: float) -> np.ndarray:
        """Indices of the k nearest donors (finite distance), lower index first among ties.

        ``approx`` screens candidates; the final choice uses exact distances.
        """
        finite = np.flatnonzero(np.isfinite(approx))
        if len(finite) <= self.k:
            return finite
        kth = np.partition(approx[finite], self.k - 1)[self.k - 1]
        cand = finite[approx[finite] <= kth + tol]
        exact = self._exact(row, cand)
        kth = np.partition(exact, self.k - 1)[self.k - 1]
        closer = cand[exact < kth]
        tied = cand[exact == kth]
        return np.concatenate([closer, tied[: self.k - len(closer)]])

    def transform(self, X: np.ndarray, chunk: int = 256) -> np.ndarray:
        X = np.array(X, dtype=float)
        self.flagged_rows_ = []
        D = self.donors_
        d_obs = (~np.isnan(D)).astype(float)
        Dz = np.nan_to_num(D)
        todo = np.flatnonzero(np.isnan(X).any(axis=1))
        if len(todo) == 0:
            return X
        # bound on the rounding error of the expanded squared distance
        scale = float(np.max(Dz**2, initial=0.0)) + float(np.nanmax(np.abs(X[todo]), initial=0.0)) ** 2
        tol = 1e-9 * D.shape[1] ** 2 * (1.0 + scale)
        for start in range(0, len(todo), chunk):
            rows = todo[start : start + chunk]
            R = X[rows]
            r_obs = (~np.isnan(R)).astype(float)
            Rz = np.nan_to_num(R)
            shared = r_obs @ d_obs.T
            sq = (Rz**2) @ d_obs.T + r_obs @ (Dz**2).T - 2.0 * Rz @ Dz.T
            with np.errstate(divide="ignore", invalid="ignore"):
                approx = D.shape[1] / shared * np.maximum(sq, 0.0)
            approx[shared == 0] = np.inf
            for i, a in zip(rows, approx):
                row = X[i].copy()
                if np.isnan(row).all():
                    X[i] = self.col_means_
                    self.flagged_rows_.append(int(i))
                    continue
                for c in np.flatnonzero(np.isnan(row)):
                    nearest = self._nearest(row, np.where(d_obs[:, c] > 0, a, np.inf), tol)
                    if len(nearest) == 0:
                        X[i, c] = self.col_means_[c]
                        self.flagged_rows_.append(int(i))
                    else:
                        X[i, c] = D[nearest, c].mean()
        return X


def knn_impute(matrix: np.ndarray, k: int = 5, donors: np.ndarray | None = None) -> np.ndarray:
    """Fill NaNs from the k nearest rows of ``donors`` (default: the matrix itself)."""
    matrix = np.asarray(matrix, dtype=float)
    return KnnImputer(k).fit(matrix if donors is None else donors).transform(matrix)


# -- encoding ----------------------------------------------------------------------------------


@dataclass
class FeatureMatrix:
    X: np.ndarray
    columns: list[str]
    kinds: list[str]  # "continuous" | "onehot"
    column_meta: list[dict]  # {"source": field, "category": str|None}
    y: np.ndarray
    row_ids: list[str]
    groups: list[str]
    # index of the original row for oversampled duplicates, -1 for originals
    origin: np.ndarray = None
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.origin is None:
            self.origin = np.full(len(self.y), -1, dtype=int)

    def __len__(self):
        return len(self.y)

    @property
    def sources(self) -> list[str]:
        seen = []
        for meta in self.column_meta:
            if meta["source"] not in seen:
                seen.append(meta["source"])
        return seen

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(
            self.X[idx],
            list(self.columns),
            list(self.kinds),
            list(self.column_meta),
            self.y[idx],
            [self.row_ids[i] for i in idx],
            [self.groups[i] for i in idx],
            self.origin[idx],
            self.normalization,
        )

    def onehot_groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for j, (kind, meta) in enumerate(zip(self.kinds, self.column_meta)):
            if kind == "onehot":
                out.setdefault(meta["source"], []).append(j)
        return out

    def decode(self) -> pd.DataFrame:
        """Categories recovered by argmax per one-hot group; continuous columns de-standardised."""
        data = {}
        for j, (kind, meta) in enumerate(zip(self.kinds, self.column_meta)):
            if kind == "continuous":
                mu, sd = self.normalization.get(meta["source"], (0.0, 1.0))
                data[meta["source"]] = self.X[:, j] * sd + mu
        for source, cols in self.onehot_groups().items():
            block = self.X[:, cols]
            cats = np.array([self.column_meta[j]["category"] for j in cols], dtype=object)
            data[source] = np.where(block.sum(axis=1) > 0, cats[block.argmax(axis=1)], None)
        return pd.DataFrame(data, index=self.row_ids)

    def save(self, directory: str | Path, name: str = "features") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.X, columns=self.columns)
        frame.insert(0, "visit_id", self.row_ids)
        frame.insert(1, "patient_id", self.groups)
        frame["label"] = self.y
        frame.to_csv(directory / f"{name}.csv", index=False, float_format="%.17g", lineterminator="\n")
        meta = {
            "columns": self.columns,
            "kinds": self.kinds,
            "column_meta": self.column_meta,
            "normalization": {k: list(v) for k, v in self.normalization.items()},
        }
        (directory / f"{name}.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path, name: str = "features") -> "FeatureMatrix":
        directory = Path(directory)
        meta = json.loads((directory / f"{name}.json").read_text())
        frame = pd.read_csv(directory / f"{name}.csv", dtype={"visit_id": str, "patient_id": str}, float_precision="round_trip")
        return cls(
            frame[meta["columns"]].to_numpy(dtype=float),
            meta["columns"],
            meta["kinds"],
            meta["column_meta"],
            frame["label"].to_numpy(dtype=int),
            frame["visit_id"].tolist(),
            frame["patient_id"].tolist(),
            normalization={k: tuple(v) for k, v in meta["normalization"].items()},
        )


class Encoder:
    """One-hot for categoricals (``"Unknown"`` is an ordinary level), z-score for continuous."""

    def fit(self, table: pd.DataFrame, continuous: Sequence[str], categorical: Sequence[str]) -> "Encoder":
        self.continuous = list(continuous)
        self.categorical = list(categorical)
        self.levels = {c: sorted(table[c].astype(str).unique()) for c in self.categorical}
        self.params = {}
        for c in self.continuous:
            values = table[c].to_numpy(dtype=float)
            if np.isnan(values).any():
                raise ValueError(f"continuous column {c!r} still has missing values")
            sd = float(values.std())
            self.params[c] = (float(values.mean()), sd if sd > 0 else 1.0)
        return self

    @property
    def columns(self) -> list[tuple[str, str, str | None]]:
        cols = [(c, "continuous", None) for c in self.continuous]
        for c in self.categorical:
            cols.extend((f"{c}={level}", "onehot", level) for level in self.levels[c])
        return cols

    def transform(self, table: pd.DataFrame, y=None, groups=None) -> FeatureMatrix:
        blocks = []
        meta = []
        for c in self.continuous:
            values = table[c].to_numpy(dtype=float)
            if np.isnan(values).any():
                raise ValueError(f"continuous column {c!r} has missing values")
            mu, sd = self.params[c]
            blocks.append(((values - mu) / sd)[:, None])
            meta.append({"source": c, "category": None})
        for c in self.categorical:
            values = table[c].astype(str).to_numpy()
            levels = self.levels[c]
            unseen = sorted(set(values) - set(levels))
            if unseen:
                warnings.warn(f"{c}: unseen categories {unseen} encoded as all-zero", stacklevel=2)
            blocks.append((values[:, None] == np.array(levels)[None, :]).astype(float))
            meta.extend({"source": c, "category": level} for level in levels)
        X = np.hstack(blocks) if blocks else np.zeros((len(table), 0))
        names = [name for name, _, _ in self.columns]
        kinds = [kind for _, kind, _ in self.columns]
        n = len(table)
        return FeatureMatrix(
            X,
            names,
            kinds,
            meta,
            np.zeros(n, dtype=int) if y is None else np.asarray(y),
            [str(i) for i in table.index],
            [str(g) for g in groups] if groups is not None else [str(i) for i in table.index],
            normalization=dict(self.params),
        )


def encode(table: pd.DataFrame, continuous: Sequence[str], categorical: Sequence[str], fit_rows=None, y=None) -> FeatureMatrix:
    """Fit the encoder on ``fit_rows`` (default all rows) and transform the whole table."""
    fit_table = table if fit_rows is None else table.iloc[fit_rows]
    return Encoder().fit(fit_table, continuous, categorical).transform(table, y=y)


# -- harmonizer --------------------------------------------------------------------------------

STRUCTURED_CATEGORICALS = (
    "gender",
    "marital_status",
    "race",
    "ethnic_group",
    "language",
    "insurance",
    "is_weekend",
)
CONTINUOUS = ("visits_past_2_months", "esi_level", "hour_of_day", "day_of_month", "month")


@dataclass
class HarmonizeConfig:
    k: int = 5
    drop_threshold: float = 0.20
    schemes: dict[str, BinScheme] = field(default_factory=lambda: dict(DEFAULT_SCHEMES))
    collapse: dict[str, float] = field(default_factory=lambda: {"sexual_orientation": 0.01})

    @classmethod
    def from_dict(cls, data: Mapping) -> "HarmonizeConfig":
        schemes = dict(DEFAULT_SCHEMES)
        for kind, s in data.get("schemes", {}).items():
            schemes[kind] = BinScheme.from_dict(s)
        return cls(
            k=int(data.get("k", 5)),
            drop_threshold=float(data.get("drop_threshold", 0.20)),
            schemes=schemes,
            collapse=dict(data.get("collapse", {"sexual_orientation": 0.01})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "HarmonizeConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "drop_threshold": self.drop_threshold,
            "schemes": {k: s.to_dict() for k, s in self.schemes.items()},
            "collapse": self.collapse,
        }


def raw_table(visits: Sequence[VisitRecord], extracted: Mapping[str, Mapping[str, str]] | None = None) -> pd.DataFrame:
    """One row per visit: structured fields, temporal parts, averaged vitals, extracted categories."""
    rows = []
    for v in visits:
        t = derive_temporal(v.arrival)
        vitals = average_vitals(v.vitals_raw)
        row = {
            "visit_id": v.visit_id,
            "patient_id": v.patient_id,
            "age_years": float(v.age_years),
            "gender": v.gender,
            "marital_status": v.marital_status,
            "race": v.race,
            "ethnic_group": v.ethnic_group,
            "language": v.language,
            "insurance": v.insurance,
            "is_weekend": str(t.is_weekend),
            "visits_past_2_months": float(v.visits_past_2_months),
            "esi_level": float(v.esi_level),
            "hour_of_day": float(t.hour_of_day),
            "day_of_month": float(t.day_of_month),
            "month": float(t.month),
        }
        for kind in VITAL_KINDS:
            row[kind] = vitals.get(kind, np.nan)
        if extracted is not None:
            row.update(extracted.get(v.visit_id, {}))
        rows.append(row)
    return pd.DataFrame(rows).set_index("visit_id")


class Harmonizer:
    """Fit-on-train / transform-anywhere wrapper around the harmonization steps."""

    def __init__(self, config: HarmonizeConfig | None = None):
        self.config = config or HarmonizeConfig()

    def _categoricals(self, table: pd.DataFrame, extra: Sequence[str]) -> list[str]:
        return [c for c in (*STRUCTURED_CATEGORICALS, *extra) if c in table.columns]

    def _prepare(self, table: pd.DataFrame) -> pd.DataFrame:
        out = recode_unknown(table)
        for column, rare in self.collapse_map_.items():
            if column in out.columns:
                out[column] = out[column].where(~out[column].isin(rare), "Other")
        return out

    def fit(self, table: pd.DataFrame, extra_categoricals: Sequence[str] = ()) -> "Harmonizer":
        cfg = self.config
        self.collapse_map_ = {}
        for column, share in cfg.collapse.items():
            if column in table.columns:
                shares = table[column].value_counts(normalize=True)
                self.collapse_map_[column] = sorted(shares[shares < share].index)
        prepared = self._prepare(table)
        categoricals = self._categoricals(prepared, extra_categoricals)
        self.dropped_ = sparse_categoricals(prepared, cfg.drop_threshold, categoricals)
        self.categoricals_ = [c for c in categoricals if c not in self.dropped_]
        self.imputer_ = KnnImputer(cfg.k).fit(prepared[list(CONTINUOUS) + list(VITAL_KINDS) + ["age_years"]].to_numpy(float))
        filled = self._fill(prepared)
        self.encoder_ = Encoder().fit(filled, CONTINUOUS, self.categoricals_ + self._binned)
        return self

    @property
    def _binned(self) -> list[str]:
        return [f"{kind}_cat" for kind in VITAL_KINDS] + ["age_band"]

    def _fill(self, prepared: pd.DataFrame) -> pd.DataFrame:
        out = prepared.drop(columns=[c for c in self.dropped_ if c in prepared.columns])
        for c in self.categoricals_:
            out[c] = out[c].where(out[c].notna(), UNKNOWN)
        block = list(CONTINUOUS) + list(VITAL_KINDS) + ["age_years"]
        imputed = self.imputer_.transform(out[block].to_numpy(float))
        out[block] = imputed
        for kind in VITAL_KINDS:
            scheme = self.config.schemes[kind]
            out[f"{kind}_cat"] = [bin_clinical(scheme, v) for v in out[kind]]
        out["age_band"] = [bin_clinical(self.config.schemes["age"], v) for v in out["age_years"]]
        return out

    def transform(self, table: pd.DataFrame, labels: Mapping[str, bool] | None = None) -> FeatureMatrix:
        filled = self._fill(self._prepare(table))
        y = None if labels is None else [int(bool(labels[vid])) for vid in table.index]
        fm = self.encoder_.transform(filled, y=y, groups=table["patient_id"].tolist())
        return fm

    def readable(self, table: pd.DataFrame) -> pd.DataFrame:
        """Harmonized but unencoded values, one column per model source field."""
        filled = self._fill(self._prepare(table))
        return filled[list(CONTINUOUS) + self.categoricals_ + self._binned]
