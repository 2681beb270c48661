from __future__ import annotations

import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrk import texts
from edrk.extract import (
    PromptSpec,
    build_prompt,
    classify,
    classify_batch,
    complaint_report,
    evaluate_classifier,
    evaluate_corpus,
    fixture_corpus,
    parse_label,
    read_jsonl,
    rule_fallback_classify,
    sdoh_report,
    write_jsonl,
)
from edrk.llm import API_KEY_ENV, EndpointSettings, HttpChatClient, OfflineClient, TransportError

CC = texts.CHIEF_COMPLAINT


class ScriptedClient:
    offline = False

    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, messages):
        self.prompts.append(messages[-1]["content"])
        return self.replies.pop(0)


def test_complaint_labels():
    assert set(texts.label_set(CC)) == {"Infection", "Injury", "Pain", "Psychiatric", "Unclear"}


@pytest.mark.parametrize(
    "text,label",
    [
        ("suicidal ideation", "Psychiatric"),
        ("fever and productive cough", "Infection"),
        ("fell off ladder, wrist deformity", "Injury"),
        ("chest pain since this morning", "Pain"),
        ("pain all over and hearing voices", "Psychiatric"),
        ("requesting a sandwich", "Unclear"),
    ],
)
def test_rule_examples(text, label):
    assert rule_fallback_classify(CC, text) == label


def test_rules_are_case_insensitive():
    assert rule_fallback_classify(CC, "SUICIDAL") == "Psychiatric"


def test_prompt_structure():
    spec = PromptSpec(CC, shots=10, seed=1)
    prompt = build_prompt(spec, "chest pain")
    assert prompt.count("\nLabel: ") == 10
    for label in texts.label_set(CC):
        assert label in prompt.split("Examples:")[0]
    assert prompt.rstrip().splitlines()[-1].startswith("Answer with exactly one label")
    assert "Text: chest pain" in prompt


def test_prompt_lists_sdoh_labels():
    spec = PromptSpec("alcohol", shots=10)
    prompt = build_prompt(spec, "denies etoh")
    header = prompt.split("Examples:")[0]
    for label in texts.label_set("alcohol"):
        assert label in header


def test_prompt_is_deterministic():
    a = build_prompt(PromptSpec(CC, shots=20, seed=9), "knee pain")
    b = build_prompt(PromptSpec(CC, shots=20, seed=9), "knee pain")
    assert a == b


@pytest.mark.parametrize("shots", [5, 10, 20])
def test_shots_are_label_stratified(shots):
    spec = PromptSpec(CC, shots=shots, seed=2)
    picked = spec.select_shots()
    counts = [sum(ex.label == label for ex in picked) for label in spec.label_set]
    assert len(picked) == shots
    assert max(counts) - min(counts) <= 1


def test_invalid_shot_count():
    with pytest.raises(ValueError):
        PromptSpec(CC, shots=7)


def test_empty_text_short_circuits():
    client = ScriptedClient([])
    assert classify(PromptSpec(CC), "   ", client) == "Unclear"
    assert client.prompts == []


def test_retry_then_unclear():
    client = ScriptedClient(["I think it is a cold", "Definitely a cold"])
    assert classify(PromptSpec(CC), "runny nose", client) == "Unclear"
    assert len(client.prompts) == 2
    assert client.prompts[1].endswith("No punctuation, no explanation.")


def test_retry_recovers():
    client = ScriptedClient(["maybe infection?", "Label: Infection."])
    assert classify(PromptSpec(CC), "fever", client) == "Infection"


def test_unclear_other_for_sdoh():
    client = ScriptedClient(["???", "???"])
    assert classify(PromptSpec("tobacco"), "hmm", client) == texts.unclear_label("tobacco")


def test_parse_label_tolerance():
    labels = texts.label_set(CC)
    assert parse_label('"pain"', labels) == "Pain"
    assert parse_label("Answer: Injury.\nbecause", labels) == "Injury"
    assert parse_label("Pain or Injury", labels) is None


def test_transport_error_propagates():
    class Broken:
        offline = False

        def complete(self, messages):
            raise TransportError("down")

    with pytest.raises(TransportError):
        classify(PromptSpec(CC), "fever", Broken())


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=60), st.sampled_from([CC, *texts.SDOH_KINDS]))
def test_offline_output_in_label_set(text, task):
    label = classify(PromptSpec(task), text, OfflineClient())
    assert label in texts.label_set(task)


def test_offline_deterministic():
    corpus = fixture_corpus(CC, 100, seed=4)
    items = {r["id"]: r["text"] for r in corpus}
    a = classify_batch(PromptSpec(CC, seed=4), items, OfflineClient())
    b = classify_batch(PromptSpec(CC, seed=4), items, OfflineClient())
    assert a == b


def test_offline_client_agrees_with_rules():
    for rec in fixture_corpus(CC, 80, seed=1):
        assert classify(PromptSpec(CC), rec["text"], OfflineClient()) == rule_fallback_classify(CC, rec["text"])


def test_http_client_body_and_key(monkeypatch):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "Pain"}}]})

    monkeypatch.setenv(API_KEY_ENV, "secret")
    client = HttpChatClient(EndpointSettings("http://llm.test/v1/chat/completions", "llama3-8b"), transport=httpx.MockTransport(handler))
    assert classify(PromptSpec(CC), "back pain", client) == "Pain"
    assert seen["body"]["temperature"] == 0
    assert seen["body"]["model"] == "llama3-8b"
    assert seen["body"]["messages"][0]["role"] == "user"
    assert seen["auth"] == "Bearer secret"


def test_http_client_raises_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    settings_ = EndpointSettings("http://llm.test/x", "m", retries=2, backoff=0.0)
    client = HttpChatClient(settings_, api_key="", transport=httpx.MockTransport(handler))
    with pytest.raises(TransportError):
        client.complete([{"role": "user", "content": "x"}])
    assert len(calls) == 3


# -- evaluation --


def test_perfect_predictions():
    gold = ["a", "b", "c", "a"]
    m = evaluate_classifier(gold, gold)
    assert (m.accuracy, m.precision, m.recall, m.specificity, m.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_two_class_hand_confusion():
    # TP=2, FP=1, FN=1, TN=2 for class "p"
    gold = ["p", "p", "p", "n", "n", "n"]
    pred = ["p", "p", "n", "p", "n", "n"]
    m = evaluate_classifier(pred, gold)
    pc = m.per_class["p"]
    assert pc["precision"] == pytest.approx(2 / 3)
    assert pc["recall"] == pytest.approx(2 / 3)
    assert pc["specificity"] == pytest.approx(2 / 3)
    assert m.confusion.sum() == 6


def test_zero_support_flagged():
    m = evaluate_classifier(["a", "a"], ["a", "a"], labels=["a", "b"])
    assert m.zero_support == ["b"]
    assert m.precision == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_classifier(["a"], ["a", "b"])
    with pytest.raises(ValueError):
        evaluate_classifier([], [])


labels_st = st.lists(st.sampled_from("abcd"), min_size=1, max_size=60)


@settings(max_examples=200)
@given(st.data())
def test_weighted_recombination_and_micro_recall(data):
    gold = data.draw(labels_st)
    pred = data.draw(st.lists(st.sampled_from("abcd"), min_size=len(gold), max_size=len(gold)))
    m = evaluate_classifier(pred, gold, labels=list("abcd"))
    n = len(gold)
    for metric, attr in (("precision", "precision"), ("recall", "recall"), ("f1", "f1"), ("specificity", "specificity")):
        recombined = sum(m.per_class[c]["support"] / n * m.per_class[c][metric] for c in "abcd")
        assert abs(recombined - getattr(m, attr)) < 1e-12
    for c in "abcd":
        pc = m.per_class[c]
        if pc["precision"] + pc["recall"] > 0:
            assert pc["f1"] == pytest.approx(2 * pc["precision"] * pc["recall"] / (pc["precision"] + pc["recall"]))
    micro_recall = np.trace(m.confusion) / m.confusion.sum()
    assert micro_recall == pytest.approx(m.accuracy, abs=1e-15)
    assert m.recall == pytest.approx(m.accuracy, abs=1e-12)  # support-weighted recall is micro recall
    for value in (m.accuracy, m.precision, m.recall, m.specificity, m.f1):
        assert 0.0 <= value <= 1.0


def test_weighted_metrics_match_sklearn():
    from sklearn.metrics import precision_recall_fscore_support

    rng = np.random.default_rng(0)
    for _ in range(20):
        gold = rng.choice(list("abcde"), size=120).tolist()
        pred = rng.choice(list("abcde"), size=120).tolist()
        m = evaluate_classifier(pred, gold)
        p, r, f, _ = precision_recall_fscore_support(gold, pred, average="weighted", zero_division=0)
        assert m.precision == pytest.approx(p, abs=1e-12)
        assert m.recall == pytest.approx(r, abs=1e-12)
        assert m.f1 == pytest.approx(f, abs=1e-12)


def test_fixture_corpus_shape(tmp_path):
    corpus = fixture_corpus("tobacco", 50, seed=3)
    assert {r["task"] for r in corpus} == {"tobacco"}
    assert all(r["gold_label"] in texts.label_set("tobacco") for r in corpus)
    path = tmp_path / "c.jsonl"
    write_jsonl(corpus, path)
    assert read_jsonl(path) == corpus


def test_complaint_fixture_accuracy():
    m = evaluate_corpus(fixture_corpus(CC, 500, seed=0), OfflineClient())
    assert m.n == 500
    assert m.accuracy >= 0.85


def test_sdoh_report_has_seven_rows():
    results = {k: evaluate_corpus(fixture_corpus(k, 100, seed=0), OfflineClient()) for k in texts.SDOH_KINDS}
    data, md = sdoh_report(results)
    names = [r["name"] for r in data["rows"]]
    assert len(names) == 7
    assert names[0] == texts.SDOH_DISPLAY["alcohol"] and names[-1] == texts.SDOH_DISPLAY["tobacco"]
    assert md.count("\n| ") == 7  # body rows; the header opens the string


def test_complaint_report_includes_reference_rows():
    m = evaluate_corpus(fixture_corpus(CC, 60, seed=0), OfflineClient())
    data, md = complaint_report({"offline": m})
    assert data["reference"]["Llama 3 8B few-shot (10)"]["accuracy"] == 0.882
    assert "| offline |" in md
