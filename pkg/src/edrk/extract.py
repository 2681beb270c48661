"""Few-shot classification of chief complaints and SDoH notes, plus evaluation.

``classify`` builds a deterministic few-shot prompt, sends it to a chat client
and validates the reply against the task's closed label set.  The offline client
answers with :func:`rule_fallback_classify`, so the whole path runs without a
model endpoint.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import texts
from ._random import rng_for
from .cohort import normalized_marginals
from .llm import ChatClient

ALLOWED_SHOTS = (5, 10, 20)

# Keyword tiers, highest priority first.  Patterns are case-insensitive regexes.
COMPLAINT_RULES: list[tuple[str, tuple[str, ...]]] = [
    (
        "Psychiatric",
        (r"suicid", r"\bsi\b", r"voices", r"depress", r"anxiety", r"paranoi", r"psych", r"manic", r"mania",
         r"homicid", r"panic", r"withdrawal", r"hallucinat", r"bipolar", r"schizo", r"overdose"),
    ),
    (
        "Injury",
        (r"\bfell\b", r"\bfall\b", r"lacerat", r"assault", r"\bmvc\b", r"sprain", r"\bbite\b", r"fractur",
         r"\bhit\b", r"deformity", r"injur", r"trauma", r"wound"),
    ),
    (
        "Infection",
        (r"fever", r"cough", r"\buti\b", r"cellulitis", r"abscess", r"\bflu\b", r"flu-like", r"chills",
         r"pneumonia", r"infect", r"sepsis"),
    ),
    ("Pain", (r"pain", r"ache\b", r"migraine", r"cramp")),
]

SDOH_RULES: dict[str, list[tuple[str, tuple[str, ...]]]] = {
    "tobacco": [
        ("Prescribed Use", (r"nicotine patch", r"varenicline", r"chantix", r"nicotine gum")),
        ("Former Use", (r"\bquit\b", r"former", r"ex-smoker")),
        ("No Use", (r"denies", r"never", r"non-smoker")),
        ("Occasional Use", (r"occasional", r"socially")),
        ("Current Use", (r"smok", r"\bppd\b", r"vape", r"chew", r"cigarette", r"tobacco")),
    ],
    "alcohol": [
        ("Recovering", (r"recovery", r"\baa\b", r"sober")),
        ("Past Alcohol Use", (r"\bquit\b", r"stopped", r"history of")),
        ("No Alcohol Use", (r"denies", r"does not drink", r"never")),
        ("Occasional Use", (r"occasional", r"social", r"weekends")),
        ("Current Alcohol Use", (r"drink", r"etoh", r"beer", r"wine", r"liquor")),
    ],
    "substance_abuse": [
        ("Prescribed Use", (r"suboxone", r"methadone", r"as prescribed")),
        ("Former Use", (r"former", r"clean for", r"stopped")),
        ("No Use", (r"denies", r"no illicit", r"never used")),
        ("Recreational Use", (r"recreational", r"marijuana", r"\bweed\b", r"socially")),
        ("Current Use", (r"\bmeth\b", r"heroin", r"\bivdu\b", r"cocaine", r"fentanyl")),
    ],
    "exercise": [
        ("Physical Therapy", (r"physical therapy", r"rehab")),
        ("No Exercise", (r"no exercise", r"sedentary", r"does not exercise")),
        ("Vigorous Exercise", (r"marathon", r"crossfit", r"vigorous")),
        ("Moderate Exercise", (r"\bgym\b", r"\bjog", r"\bbikes?\b", r"times a week", r"twice weekly")),
        ("Light Exercise", (r"\bwalks?\b", r"stretch", r"yoga")),
    ],
    "home_environment": [
        ("Assisted Living", (r"assisted living", r"group home", r"nursing home")),
        ("Homeless", (r"homeless", r"shelter", r"street")),
        ("Unstable Housing", (r"couch", r"eviction", r"motel")),
        ("Living with Friends", (r"friend", r"roommate")),
        ("Family Support", (r"mother", r"father", r"wife", r"husband", r"kids", r"family", r"parents")),
        ("Independent", (r"alone", r"independently", r"by self")),
    ],
    "nutrition": [
        ("Assistance Required", (r"assistance", r"tube feed", r"meals on wheels")),
        ("Special Diet", (r"diabetic", r"gluten", r"sodium", r"\bdiet\b")),
        ("Poor Nutrition", (r"\bpoor\b", r"skips meals", r"malnourish", r"food insecure")),
        ("Good Nutrition", (r"good appetite", r"well nourished")),
        ("Moderate Nutrition", (r"\bfair\b", r"adequate", r"\bok\b")),
    ],
    "sexual_orientation": [
        ("Transgender", (r"transgender",)),
        ("Gender Non-Binary", (r"non-?binary",)),
        ("Queer/Other", (r"\bqueer\b", r"pansexual")),
        ("Bisexual", (r"\bbisexual\b",)),
        ("Asexual", (r"\basexual\b",)),
        ("Homosexual", (r"\bgay\b", r"lesbian", r"\bhomosexual\b")),
        ("Heterosexual", (r"heterosexual", r"\bstraight\b")),
    ],
}

_COMPILED: dict[str, list[tuple[str, re.Pattern]]] = {}


def _rules(task: str) -> list[tuple[str, re.Pattern]]:
    if task not in _COMPILED:
        table = COMPLAINT_RULES if task == texts.CHIEF_COMPLAINT else SDOH_RULES[task]
        _COMPILED[task] = [(label, re.compile("|".join(pats), re.IGNORECASE)) for label, pats in table]
    return _COMPILED[task]


def rule_fallback_classify(task: str, text: str) -> str:
    """Keyword classifier: the first matching priority tier wins, else the unclear label."""
    texts.label_set(task)
    for label, pattern in _rules(task):
        if pattern.search(text):
            return label
    return texts.unclear_label(task)


# -- prompts -------------------------------------------------------------------------------------

INSTRUCTIONS = {
    texts.CHIEF_COMPLAINT: "Classify the emergency department chief complaint into one category.",
}
for _kind in texts.SDOH_KINDS:
    INSTRUCTIONS[_kind] = f"Classify the social history note about {texts.SDOH_DISPLAY[_kind].lower()} into one category."

ANSWER_LINE = "Answer with exactly one label from the allowed labels, copied verbatim."
STRICT_SUFFIX = "Reply with the label text only. No punctuation, no explanation."


@dataclass(frozen=True)
class Exemplar:
    text: str
    label: str


@dataclass
class PromptSpec:
    task: str
    shots: int = 10
    shot_bank: Sequence[Exemplar] = ()
    system_instruction: str = ""
    seed: int = 0
    label_set: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.label_set = texts.label_set(self.task)
        if self.shots not in ALLOWED_SHOTS:
            raise ValueError(f"shots must be one of {ALLOWED_SHOTS}, got {self.shots}")
        if not self.shot_bank:
            self.shot_bank = default_shot_bank(self.task, seed=self.seed)
        if not self.system_instruction:
            self.system_instruction = INSTRUCTIONS[self.task]
        bad = [ex.label for ex in self.shot_bank if ex.label not in self.label_set]
        if bad:
            raise ValueError(f"shot labels outside the label set: {sorted(set(bad))}")
        if self.shots > len(self.shot_bank):
            raise ValueError(f"{self.shots} shots requested but the bank holds {len(self.shot_bank)}")
        self._header = None

    def select_shots(self) -> list[Exemplar]:
        """Round-robin over labels (label-set order), seeded draw within and across labels."""
        rng = rng_for(self.seed, "shots", self.task, self.shots)
        pools = {}
        for label in self.label_set:
            members = [ex for ex in self.shot_bank if ex.label == label]
            pools[label] = [members[i] for i in rng.permutation(len(members))]
        picked: list[Exemplar] = []
        depth = 0
        while len(picked) < self.shots:
            for label in self.label_set:
                if depth < len(pools[label]) and len(picked) < self.shots:
                    picked.append(pools[label][depth])
            depth += 1
        return [picked[i] for i in rng.permutation(len(picked))]

    def header(self) -> str:
        if self._header is None:
            lines = [
                self.system_instruction,
                f"Task: {self.task}",
                "Allowed labels: " + " | ".join(self.label_set),
                "",
                "Examples:",
            ]
            for ex in self.select_shots():
                lines += [f"Text: {_one_line(ex.text) or '(blank)'}", f"Label: {ex.label}", ""]
            self._header = "\n".join(lines)
        return self._header


def _one_line(text: str) -> str:
    return " ".join(text.split())


def default_shot_bank(task: str, seed: int = 0, per_label: int = 6) -> list[Exemplar]:
    """Labelled exemplars rendered from the phrase bank, ``per_label`` per category."""
    rng = rng_for(seed, "shot_bank", task)
    bank = []
    for label in texts.label_set(task):
        for _ in range(per_label):
            bank.append(Exemplar(texts.render_text(task, label, rng), label))
    return bank


def build_prompt(spec: PromptSpec, text: str) -> str:
    query = _one_line(text)
    if not query:
        raise ValueError("empty text has no prompt; classify() short-circuits it")
    return f"{spec.header()}\nText: {query}\n{ANSWER_LINE}"


def parse_label(reply: str, label_set: Sequence[str]) -> str | None:
    """Label named by ``reply``, tolerating case, quotes, a ``Label:`` prefix and a trailing period."""
    cleaned = reply.strip().splitlines()[0].strip() if reply and reply.strip() else ""
    cleaned = re.sub(r"^(label|answer)\s*:\s*", "", cleaned, flags=re.IGNORECASE)
    cleaned = cleaned.strip(" \t\"'`*.").lower()
    for label in label_set:
        if cleaned == label.lower():
            return label
    return None


def classify(spec: PromptSpec, text: str, client: ChatClient) -> str:
    """One label from ``spec.label_set``; transport errors propagate, labels are never invented."""
    if not text or not text.strip():
        return texts.unclear_label(spec.task)
    prompt = build_prompt(spec, text)
    reply = client.complete([{"role": "user", "content": prompt}])
    label = parse_label(reply, spec.label_set)
    if label is None:
        reply = client.complete([{"role": "user", "content": f"{prompt}\n{STRICT_SUFFIX}"}])
        label = parse_label(reply, spec.label_set)
    return label if label is not None else texts.unclear_label(spec.task)


def classify_batch(spec: PromptSpec, items: Mapping[str, str], client: ChatClient, max_in_flight: int = 4) -> dict[str, str]:
    """Classify ``{id: text}`` with at most ``max_in_flight`` concurrent requests."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    spec.header()  # build once before threads share it
    ids = list(items)
    if max_in_flight == 1 or getattr(client, "offline", False):
        return {i: classify(spec, items[i], client) for i in ids}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        labels = list(pool.map(lambda i: classify(spec, items[i], client), ids))
    return dict(zip(ids, labels))


def extract_visits(visits, client: ChatClient, shots: int = 10, seed: int = 0, max_in_flight: int = 4) -> dict[str, dict[str, str]]:
    """Extracted chief-complaint and SDoH categories per visit_id."""
    out: dict[str, dict[str, str]] = {v.visit_id: {} for v in visits}
    tasks = (texts.CHIEF_COMPLAINT, *texts.SDOH_KINDS)
    for task in tasks:
        spec = PromptSpec(task, shots=shots, seed=seed)
        if task == texts.CHIEF_COMPLAINT:
            items = {v.visit_id: v.chief_complaint_text for v in visits}
        else:
            items = {v.visit_id: v.sdoh_texts.get(task, "") for v in visits}
        for vid, label in classify_batch(spec, items, client, max_in_flight).items():
            out[vid][task] = label
    return out


# -- evaluation ----------------------------------------------------------------------------------


@dataclass
class ClassificationMetrics:
    labels: list[str]
    confusion: np.ndarray  # rows = gold, columns = predicted
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    per_class: dict[str, dict[str, float]]
    zero_support: list[str]

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "specificity": self.specificity,
            "f1": self.f1,
            "labels": self.labels,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
            "zero_support": self.zero_support,
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def evaluate_classifier(predictions: Sequence[str], gold: Sequence[str], labels: Sequence[str] | None = None) -> ClassificationMetrics:
    """Accuracy and one-vs-rest metrics, support-weighted over classes present in ``gold``."""
    if len(predictions) != len(gold):
        raise ValueError("predictions and gold differ in length")
    if len(gold) == 0:
        raise ValueError("nothing to evaluate")
    if labels is None:
        labels = sorted(set(gold) | set(predictions))
    labels = list(labels)
    index = {label: i for i, label in enumerate(labels)}
    unknown = (set(gold) | set(predictions)) - set(index)
    if unknown:
        raise ValueError(f"labels outside the shared set: {sorted(unknown)}")
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    np.add.at(cm, ([index[g] for g in gold], [index[p] for p in predictions]), 1)

    n = cm.sum()
    per_class = {}
    zero_support = []
    for i, label in enumerate(labels):
        tp = cm[i, i]
        fp = cm[:, i].sum() - tp
        fn = cm[i, :].sum() - tp
        tn = n - tp - fp - fn
        support = int(cm[i, :].sum())
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        per_class[label] = {
            "support": support,
            "precision": p,
            "recall": r,
            "specificity": _ratio(tn, tn + fp),
            "f1": _ratio(2 * p * r, p + r),
        }
        if support == 0:
            zero_support.append(label)

    weights = np.array([per_class[label]["support"] for label in labels], dtype=float) / n

    def weighted(metric):
        return float(sum(w * per_class[label][metric] for w, label in zip(weights, labels)))

    return ClassificationMetrics(
        labels=labels,
        confusion=cm,
        accuracy=float(np.trace(cm) / n),
        precision=weighted("precision"),
        recall=weighted("recall"),
        specificity=weighted("specificity"),
        f1=weighted("f1"),
        per_class=per_class,
        zero_support=zero_support,
    )


# -- fixtures and reports ------------------------------------------------------------------------


def fixture_corpus(task: str, n: int = 500, seed: int = 0) -> list[dict]:
    """Templated texts with gold labels drawn from the cohort marginals."""
    rng = rng_for(seed, "fixture", task)
    marginal = normalized_marginals()[task]
    labels = list(marginal)
    probs = np.array([marginal[label] for label in labels])
    drawn = [labels[i] for i in rng.choice(len(labels), size=n, p=probs / probs.sum())]
    return [
        {"id": f"{task}-{i:04d}", "task": task, "text": texts.render_text(task, label, rng), "gold_label": label}
        for i, label in enumerate(drawn)
    ]


def write_jsonl(records: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def evaluate_corpus(corpus: Sequence[Mapping], client: ChatClient, shots: int = 10, seed: int = 0) -> ClassificationMetrics:
    task = corpus[0]["task"]
    if any(rec["task"] != task for rec in corpus):
        raise ValueError("corpus mixes tasks")
    spec = PromptSpec(task, shots=shots, seed=seed)
    preds = classify_batch(spec, {rec["id"]: rec["text"] for rec in corpus}, client)
    return evaluate_classifier([preds[rec["id"]] for rec in corpus], [rec["gold_label"] for rec in corpus], texts.label_set(task))


# Published scores (accuracy, precision, recall, F1), kept for side-by-side display only.
REFERENCE_COMPLAINT_SCORES = {
    "XGBoost": (0.59, 0.48, 0.59, 0.53),
    "Random Forest": (0.59, 0.44, 0.59, 0.50),
    "SVM": (0.62, 0.41, 0.62, 0.50),
    "BlueBERT": (0.63, 0.56, 0.63, 0.59),
    "Llama 3 8B few-shot (20)": (0.803, 0.88, 0.80, 0.75),
    "Llama 3 8B few-shot (5)": (0.816, 0.91, 0.81, 0.77),
    "Llama 3 8B few-shot (10)": (0.882, 0.95, 0.88, 0.86),
}
REFERENCE_SDOH_SCORES = {
    "alcohol": (0.95, 0.99, 0.95, 0.96),
    "exercise": (0.70, 0.74, 0.70, 0.70),
    "home_environment": (0.63, 0.78, 0.63, 0.67),
    "nutrition": (0.68, 0.89, 0.68, 0.72),
    "sexual_orientation": (0.75, 0.90, 0.75, 0.79),
    "substance_abuse": (0.85, 0.99, 0.85, 0.89),
    "tobacco": (0.95, 0.99, 0.95, 0.96),
}


def _row(name: str, m: ClassificationMetrics) -> dict:
    return {
        "name": name,
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "specificity": m.specificity,
        "f1_score": m.f1,
        "n": m.n,
    }


def complaint_report(results: Mapping[str, ClassificationMetrics]) -> tuple[dict, str]:
    """Chief-complaint comparison table: measured rows followed by reference rows."""
    rows = [_row(name, m) for name, m in results.items()]
    md = ["| Model | Accuracy | Precision | Recall | Specificity | F1-Score |", "|---|---|---|---|---|---|"]
    for r in rows:
        md.append(f"| {r['name']} | {r['accuracy']:.3f} | {r['precision']:.2f} | {r['recall']:.2f} | {r['specificity']:.2f} | {r['f1_score']:.2f} |")
    md += ["", "Reference scores:", "", "| Model | Accuracy | Precision | Recall | F1-Score |", "|---|---|---|---|---|"]
    for name, (a, p, r, f) in REFERENCE_COMPLAINT_SCORES.items():
        md.append(f"| {name} | {a} | {p} | {r} | {f} |")
    data = {"rows": rows, "reference": {k: dict(zip(("accuracy", "precision", "recall", "f1_score"), v)) for k, v in REFERENCE_COMPLAINT_SCORES.items()}}
    return data, "\n".join(md) + "\n"


def sdoh_report(results: Mapping[str, ClassificationMetrics]) -> tuple[dict, str]:
    """Per-kind SDoH table (rows in alphabetical kind order) with reference columns."""
    rows = []
    md = [
        "| Category | Accuracy | Precision (Weighted) | Sensitivity/Recall (Weighted) | Specificity (Weighted) | F1 Score (Weighted) | Reference F1 |",
        "|---|---|---|---|---|---|---|",
    ]
    for kind in sorted(results):
        m = results[kind]
        r = _row(texts.SDOH_DISPLAY[kind], m)
        rows.append(r)
        ref = REFERENCE_SDOH_SCORES.get(kind)
        md.append(
            f"| {r['name']} | {r['accuracy']:.2f} | {r['precision']:.2f} | {r['recall']:.2f} | "
            f"{r['specificity']:.2f} | {r['f1_score']:.2f} | {ref[3] if ref else '-'} |"
        )
    return {"rows": rows}, "\n".join(md) + "\n"
