"""End-to-end experiment: cohort, extraction, features, models, attributions, narratives, review.

Every stage reads and writes plain files under one run directory, so a stage
can be rerun on its own from the command line.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd

from . import texts
from ._random import derive_seed
from .assess import assess_batch, write_report
from .attribution import global_importance, group_shap, importance_svg, tree_shap
from .cohort import CohortSpec, cohort_statistics, generate_cohort, label_returns, read_cohort, write_cohort
from .explain import FEATURE_NAMES, build_context, classify_risk, generate_narrative, llm_polish, read_narratives, risk_ranges, write_narratives
from .extract import complaint_report, evaluate_corpus, extract_visits, fixture_corpus, sdoh_report
from .harmonize import CONTINUOUS, FeatureMatrix, HarmonizeConfig, Harmonizer, raw_table
from .learn import DISPLAY_NAMES, TrainedModel, evaluate, grid_search, oversample, train
from .learn.selection import split_indices
from .llm import EndpointSettings, HttpChatClient, OfflineClient

log = logging.getLogger(__name__)

VARIANTS = ("without_llm", "with_llm")
MODEL_ROWS = ("mlp", "adaboost", "logistic", "gbt_plain", "gbt_xgb")
ROW_FAMILY = {"mlp": "mlp", "adaboost": "adaboost", "logistic": "logistic", "gbt_plain": "gbt", "gbt_xgb": "gbt"}
LLM_FEATURES = (texts.CHIEF_COMPLAINT, *texts.SDOH_KINDS)

DEFAULT_GRIDS = {
    "mlp": {"hidden_units": [16, 32], "epochs": [15], "step": [0.02], "batch": [128]},
    "adaboost": {"n_stumps": [50, 100]},
    "logistic": {"l2": [1e-4, 1e-2], "epochs": [500], "step": [1.0]},
    "gbt_plain": {"n_trees": [120], "max_depth": [3], "learning_rate": [0.1], "l2_lambda": [0.0]},
    "gbt_xgb": {"n_trees": [120], "max_depth": [3], "learning_rate": [0.1], "l2_lambda": [1.0]},
}


class ConfigError(ValueError):
    """The run configuration is malformed or references missing files."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    seed: int = 0
    cohort: dict = field(default_factory=lambda: {"n_visits": 4000})
    harmonize: dict = field(default_factory=dict)
    extraction: dict = field(default_factory=lambda: {"mode": "offline", "shots": 10, "max_in_flight": 4, "fixture_size": 500})
    models: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_GRIDS.items()})
    variant: str = "both"
    split: dict = field(default_factory=lambda: {"ratio": 0.8, "grouped": True})
    cv_folds: int = 3
    explain: dict = field(default_factory=lambda: {"n_narratives": 100, "k": 3, "threshold": 0.5, "model": "gbt_xgb", "polish": False})
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, data: Mapping, base: Path | None = None) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls()
        for key, value in data.items():
            if key in ("cohort", "harmonize") and isinstance(value, str):
                path = Path(value) if base is None or Path(value).is_absolute() else base / value
                if not path.exists():
                    raise ConfigError(f"{key} file {path} does not exist")
                value = json.loads(path.read_text())
            if isinstance(getattr(cfg, key), dict) and isinstance(value, dict) and key != "models":
                value = {**getattr(cfg, key), **value}
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        if self.variant not in (*VARIANTS, "both"):
            raise ConfigError(f"variant must be one of {VARIANTS + ('both',)}")
        if self.extraction.get("mode") not in ("offline", "endpoint"):
            raise ConfigError("extraction.mode must be 'offline' or 'endpoint'")
        if self.extraction["mode"] == "endpoint" and not {"url", "model"} <= set(self.extraction.get("endpoint", {})):
            raise ConfigError("endpoint mode needs extraction.endpoint.url and .model")
        unknown = set(self.models) - set(MODEL_ROWS)
        if unknown:
            raise ConfigError(f"unknown model rows {sorted(unknown)}")
        for row, grid in self.models.items():
            if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
                raise ConfigError(f"models.{row} must map names to nonempty candidate lists")
        if self.explain.get("model") not in MODEL_ROWS:
            raise ConfigError("explain.model must name a model row")
        if ROW_FAMILY[self.explain["model"]] != "gbt":
            raise ConfigError("narratives need a tree model (gbt_plain or gbt_xgb)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        try:
            CohortSpec.from_dict({**self.cohort, "seed": 0})
            HarmonizeConfig.from_dict(self.harmonize)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def variants(self) -> tuple[str, ...]:
        return VARIANTS if self.variant == "both" else (self.variant,)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def make_client(cfg: RunConfig, offline: bool):
    if offline or cfg.extraction["mode"] == "offline":
        return OfflineClient()
    return HttpChatClient(EndpointSettings(**cfg.extraction["endpoint"]))


def new_run_dir(base: str | Path) -> Path:
    """Fresh timestamped directory; never reuses an existing one."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("run-%Y%m%dT%H%M%SZ")
    path = base / stamp
    n = 1
    while path.exists():
        n += 1
        path = base / f"{stamp}-{n}"
    path.mkdir()
    return path


def _dump(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# -- stages --------------------------------------------------------------------------------------


def stage_generate(cfg: RunConfig, run: Path):
    spec = CohortSpec.from_dict({**cfg.cohort, "seed": cfg.cohort.get("seed", derive_seed(cfg.seed, "cohort"))})
    visits = generate_cohort(spec)
    write_cohort(visits, run / "cohort")
    return visits


def stage_extract(cfg: RunConfig, run: Path, client, visits=None):
    visits = read_cohort(run / "cohort") if visits is None else visits
    ex = cfg.extraction
    seed = derive_seed(cfg.seed, "extract")
    extracted = extract_visits(visits, client, ex.get("shots", 10), seed, ex.get("max_in_flight", 4))
    out = run / "extract"
    _dump(out / "extracted.json", extracted)
    size = int(ex.get("fixture_size", 500))
    results = {}
    for task in LLM_FEATURES:
        results[task] = evaluate_corpus(fixture_corpus(task, size, seed), client, ex.get("shots", 10), seed)
    shots = ex.get("shots", 10)
    cc_data, cc_md = complaint_report({f"few-shot ({shots}), {'offline rules' if client.offline else 'endpoint'}": results[texts.CHIEF_COMPLAINT]})
    sd_data, sd_md = sdoh_report({k: results[k] for k in texts.SDOH_KINDS})
    _dump(out / "complaint_report.json", cc_data)
    (out / "complaint_report.md").write_text(cc_md)
    _dump(out / "sdoh_report.json", sd_data)
    (out / "sdoh_report.md").write_text(sd_md)
    return extracted, {task: m.accuracy for task, m in results.items()}


def stage_harmonize(cfg: RunConfig, run: Path, visits=None, extracted=None, variants=None):
    """Patient-grouped split on the raw table, then per-variant fit on the training rows."""
    visits = read_cohort(run / "cohort") if visits is None else visits
    variants = variants or cfg.variants()
    if "with_llm" in variants and extracted is None:
        extracted = json.loads((run / "extract" / "extracted.json").read_text())
    labels = label_returns(visits)
    table = raw_table(visits, extracted)
    y = np.array([int(labels[vid]) for vid in table.index])
    groups = table["patient_id"].tolist() if cfg.split.get("grouped", True) else None
    tr, te = split_indices(y, cfg.split.get("ratio", 0.8), derive_seed(cfg.seed, "split"), groups)
    _dump(run / "harmonize" / "split.json", {"train": table.index[tr].tolist(), "test": table.index[te].tolist()})
    out = {}
    for variant in variants:
        extra = LLM_FEATURES if variant == "with_llm" else ()
        sub = table.drop(columns=[c for c in LLM_FEATURES if c in table.columns and c not in extra])
        harm = Harmonizer(HarmonizeConfig.from_dict(cfg.harmonize)).fit(sub.iloc[tr], extra)
        d = run / "harmonize" / variant
        train_fm = harm.transform(sub.iloc[tr], labels)
        test_fm = harm.transform(sub.iloc[te], labels)
        train_fm.save(d, "train")
        test_fm.save(d, "test")
        harm.readable(sub.iloc[tr]).to_csv(d / "readable_train.csv", lineterminator="\n")
        harm.readable(sub.iloc[te]).to_csv(d / "readable_test.csv", lineterminator="\n")
        _dump(d / "harmonizer.json", {"config": harm.config.to_dict(), "dropped": harm.dropped_, "collapsed": harm.collapse_map_})
        out[variant] = (train_fm, test_fm)
    return out


def _load_features(run: Path, variant: str):
    d = run / "harmonize" / variant
    return FeatureMatrix.load(d, "train"), FeatureMatrix.load(d, "test")


def stage_train(cfg: RunConfig, run: Path, variant: str, data=None, n_jobs: int = 1) -> dict[str, dict]:
    train_fm, test_fm = data if data is not None else _load_features(run, variant)
    balanced = oversample(train_fm, derive_seed(cfg.seed, "oversample", variant))
    rows = {}
    d = run / "train" / variant
    d.mkdir(parents=True, exist_ok=True)
    for row in MODEL_ROWS:
        if row not in cfg.models:
            continue
        family = ROW_FAMILY[row]
        seed = derive_seed(cfg.seed, "model", variant, row)
        best, cv = grid_search(family, cfg.models[row], train_fm, cfg.cv_folds, seed, n_jobs)
        model = train(family, best, balanced, seed)
        model.metadata.update({"cv_auc": cv, "variant": variant, "row": row})
        model.save(d / f"{row}.model.json")
        metrics = evaluate(model, test_fm, cfg.explain.get("threshold", 0.5))
        rows[row] = {"model": DISPLAY_NAMES[row], "hyperparameters": best, "cv_auc": cv, **metrics.to_report()}
        log.info("%s %s auc=%.4f", variant, row, metrics.auc_roc or float("nan"))
    _dump(d / "metrics.json", rows)
    (d / "metrics.md").write_text(metrics_table(rows, variant))
    return rows


def metrics_table(rows: Mapping[str, Mapping], variant: str) -> str:
    title = "with LLM-extracted features" if variant == "with_llm" else "without LLM-extracted features"
    lines = [f"Models {title}", "", "| Model | Accuracy | Precision | Recall | F1-score | AUC | AUC-PR |", "|---|---|---|---|---|---|---|"]
    for r in rows.values():
        cells = [f"{r[k]:.2f}" if r[k] is not None else "-" for k in ("accuracy", "precision", "recall", "f1_score", "auc", "auc_pr")]
        lines.append(f"| {r['model']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _read_readable(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path, index_col=0, dtype=str, keep_default_na=False)
    for c in CONTINUOUS:
        frame[c] = frame[c].astype(float)
    return frame


def stage_explain(cfg: RunConfig, run: Path, variant: str, client=None, data=None):
    """Attributions for the test split and narratives for a seeded sample of test patients."""
    ex = cfg.explain
    train_fm, test_fm = data if data is not None else _load_features(run, variant)
    model = TrainedModel.load(run / "train" / variant / f"{ex['model']}.model.json")
    d = run / "harmonize" / variant
    readable_train = _read_readable(d / "readable_train.csv")
    readable_test = _read_readable(d / "readable_test.csv")

    phi, base = tree_shap(model, test_fm.X, train_fm.X)
    grouped, sources = group_shap(phi, test_fm.column_meta)
    ranking = global_importance(grouped, sources)
    out = run / "attribution" / variant
    _dump(out / "importance.json", ranking.to_dict())
    (out / "importance.svg").write_text(importance_svg(ranking, "SHAP feature importance for ED return", labels=FEATURE_NAMES))

    threshold = float(ex.get("threshold", 0.5))
    p_train = model.predict_proba(train_fm)
    partition = {vid: ("high" if p >= threshold else "low") for vid, p in zip(train_fm.row_ids, p_train)}
    labels = dict(zip(train_fm.row_ids, train_fm.y.astype(bool)))
    stats = cohort_statistics(readable_train.loc[train_fm.row_ids], labels, partition)
    _dump(out / "cohort_statistics.json", stats.to_dict())
    ranges = risk_ranges(readable_train.loc[train_fm.row_ids], p_train >= threshold, sources)

    p_test = model.predict_proba(test_fm)
    first_visit = {}
    for i, pid in enumerate(test_fm.groups):
        first_visit.setdefault(pid, i)
    patients = sorted(first_visit)
    rng = np.random.default_rng(derive_seed(cfg.seed, "narratives", variant))
    n = min(int(ex.get("n_narratives", 100)), len(patients))
    chosen = sorted(rng.choice(len(patients), size=n, replace=False))
    k = int(ex.get("k", 3))
    items = []
    for j in chosen:
        pid = patients[j]
        i = first_visit[pid]
        record = readable_test.loc[test_fm.row_ids[i]].to_dict()
        shap = {s: float(v) for s, v in zip(sources, grouped[i])}
        bundle = build_context(pid, record, float(p_test[i]), stats, shap, base, threshold, k, ranges)
        narrative, sidecar = generate_narrative(bundle, k)
        if ex.get("polish") and client is not None:
            narrative = llm_polish(narrative, sidecar, client)
        items.append((narrative, sidecar, bundle))
    write_narratives(run / "explain" / variant, items)
    top = ranking.items[:10]
    return items, [{"feature": f, "mean_abs_shap": v} for f, v in top]


def stage_assess(cfg: RunConfig, run: Path, variant: str, items=None):
    items = read_narratives(run / "explain" / variant) if items is None else items
    report = assess_batch([(n, s) for n, s, _ in items], {s.patient_id: b for _, s, b in items}, k=int(cfg.explain.get("k", 3)))
    write_report(report, run / "assess" / variant)
    return report


# -- whole run -----------------------------------------------------------------------------------


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def _round(value, digits: int = 6):
    if isinstance(value, float):
        return round(value, digits)
    if isinstance(value, dict):
        return {k: _round(v, digits) for k, v in value.items()}
    if isinstance(value, list):
        return [_round(v, digits) for v in value]
    return value


def run_pipeline(cfg: RunConfig, out: str | Path | None = None, client=None, offline: bool = False, run_dir: Path | None = None) -> tuple[Path, dict]:
    """Execute every stage; returns the run directory and the summary written to it."""
    run = run_dir or new_run_dir(out or cfg.output_dir)
    _dump(run / "config.json", cfg.to_dict())
    client = client if client is not None else make_client(cfg, offline)
    started = time.perf_counter()
    visits = _stage("generate", stage_generate, cfg, run)
    extraction = None
    extracted = None
    if "with_llm" in cfg.variants():
        extracted, extraction = _stage("extract", stage_extract, cfg, run, client, visits)
    features = _stage("harmonize", stage_harmonize, cfg, run, visits, extracted)
    summary: dict[str, Any] = {
        "seed": cfg.seed,
        "n_visits": len(visits),
        "return_rate": float(np.mean(list(label_returns(visits).values()))),
        "variants": {},
    }
    if extraction is not None:
        summary["extraction_accuracy"] = extraction
    for variant in cfg.variants():
        rows = _stage("train", stage_train, cfg, run, variant, features[variant])
        items, top = _stage("explain", stage_explain, cfg, run, variant, client, features[variant])
        report = _stage("assess", stage_assess, cfg, run, variant, items)
        summary["variants"][variant] = {
            "rows": [{"model": r["model"], **{k: r[k] for k in ("accuracy", "precision", "recall", "f1_score", "auc", "auc_pr")}} for r in rows.values()],
            "hyperparameters": {row: r["hyperparameters"] for row, r in rows.items()},
            "top_features": top,
            "assessment": {"n": report.n, "error_rate": report.error_rate},
            "risk_classes": dict(sorted({c: sum(1 for n, _, _ in items if n.risk_class == c) for c in ("High", "Low")}.items())),
        }
    if set(VARIANTS) <= set(summary["variants"]):
        auc = {v: {r["model"]: r["auc"] for r in summary["variants"][v]["rows"]} for v in VARIANTS}
        summary["auc_gain_with_llm"] = {m: auc["with_llm"][m] - auc["without_llm"][m] for m in auc["with_llm"] if m in auc["without_llm"]}
    summary = _round(summary)
    _dump(run / "summary.json", summary)
    log.info("run finished in %.1fs: %s", time.perf_counter() - started, run)
    return run, summary


def check_summary(summary: Mapping) -> list[str]:
    """Problems with a finished run, for the acceptance exit code."""
    problems = []
    gains = summary.get("auc_gain_with_llm", {})
    for model in ("GradientBoosting", "XGBoost"):
        if model in gains and not gains[model] > 0:
            problems.append(f"{model}: with-LLM AUC does not exceed without-LLM AUC")
    for variant, block in summary.get("variants", {}).items():
        if block["assessment"]["error_rate"] != 0.0:
            problems.append(f"{variant}: clean narratives produced findings")
    return problems


__all__ = [
    "ConfigError",
    "RunConfig",
    "StageError",
    "VARIANTS",
    "check_summary",
    "classify_risk",
    "run_pipeline",
]
