import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mriqa.evaluation import (
    CLASSES, DEFAULT_JUDGE_RUNS, Empty, JudgeScore, LengthMismatch, accuracy, aggregate_scores,
    classification_report, confusion, judge_many, judge_prompt, judge_request, macro_f1, parse_score,
    per_class_f1,
)
from mriqa.llm_client import LlmClientConfig, MalformedResponse
from mriqa.qa_gen import QualityLabel
from oracles import brute_macro_f1

CRAFTED = [[50, 10, 0], [5, 20, 5], [0, 10, 0]]


def _expand(cm):
    preds, truths = [], []
    for t, row in enumerate(cm):
        for p, n in enumerate(row):
            preds += [CLASSES[p]] * n
            truths += [CLASSES[t]] * n
    return preds, truths


def test_crafted_matrix():
    preds, truths = _expand(CRAFTED)
    cm = confusion(preds, truths)
    assert cm.tolist() == CRAFTED
    assert accuracy(cm) == pytest.approx(70 / 100, abs=1e-12)
    assert macro_f1(cm) == pytest.approx(brute_macro_f1(CRAFTED), abs=1e-12)
    assert per_class_f1(cm)[2] == 0.0  # class with no true positives


def test_perfect_and_all_wrong():
    labels = [QualityLabel.Good, QualityLabel.Medium, QualityLabel.Bad] * 4
    cm = confusion(labels, labels)
    assert accuracy(cm) == 1.0 and macro_f1(cm) == 1.0
    shifted = labels[1:] + labels[:1]
    assert accuracy(confusion(shifted, labels)) == 0.0
    assert macro_f1(confusion(shifted, labels)) == 0.0


def test_label_spellings():
    cm = confusion(["good", "Medium", 0], [QualityLabel.Good, "medium", "Bad"])
    assert np.trace(cm) == 3


def test_errors():
    with pytest.raises(LengthMismatch):
        confusion([QualityLabel.Good], [])
    with pytest.raises(Empty):
        confusion([], [])
    with pytest.raises(Empty):
        macro_f1(np.zeros((3, 3)))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.integers(0, 30), min_size=3, max_size=3), min_size=3, max_size=3))
def test_macro_f1_matches_brute_force(cm):
    if sum(map(sum, cm)) == 0:
        return
    assert macro_f1(np.array(cm)) == pytest.approx(brute_macro_f1(cm), abs=1e-12)
    assert 0.0 <= macro_f1(np.array(cm)) <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CLASSES), st.sampled_from(CLASSES)), min_size=1, max_size=50),
       st.randoms(use_true_random=False))
def test_permutation_invariance(pairs, random):
    shuffled = list(pairs)
    random.shuffle(shuffled)
    a = classification_report([p for p, _ in pairs], [t for _, t in pairs])
    b = classification_report([p for p, _ in shuffled], [t for _, t in shuffled])
    assert a == b


# ---------------------------------------------------------------- judge

def test_prompt_template():
    assert judge_prompt("ok scan") == (
        "Assess the following MRI quality description [ok scan] on a 0-100 scale "
        "for artifact identification and diagnostic relevance."
    )


@pytest.mark.parametrize("text,value", [("87", 87.0), ("Score: 72.5/100", 72.5), ("0", 0.0), ("100.", 100.0)])
def test_parse_score(text, value):
    assert parse_score(text) == value


@pytest.mark.parametrize("text", ["excellent", "105", "-3", ""])
def test_parse_score_rejects(text):
    with pytest.raises(MalformedResponse):
        parse_score(text)


def test_parse_score_json_mode():
    assert parse_score('{"score": 64}', json_mode=True) == 64.0
    with pytest.raises(MalformedResponse):
        parse_score('{"grade": 64}', json_mode=True)


def _client(url):
    return LlmClientConfig(endpoint=url, timeout=5, max_retries=0, backoff=0.01, api_key_env="JUDGE_API_KEY")


@pytest.mark.parametrize("reply,expected", [("87", 87.0), ("excellent", None), ("105", None)])
def test_judge_against_mock(mock_llm, reply, expected):
    srv = mock_llm(lambda body: reply)
    if expected is None:
        with pytest.raises(MalformedResponse):
            judge_request("desc", _client(srv.url))
    else:
        assert judge_request("desc", _client(srv.url)).score == expected
    assert srv.requests[0]["messages"][0]["content"] == judge_prompt("desc")


def test_judge_many_runs_and_order(mock_llm):
    def respond(body):
        text = body["messages"][0]["content"]
        return "90" if "[alpha]" in text else "60"

    srv = mock_llm(respond)
    scores = judge_many({"b": "beta", "a": "alpha"}, _client(srv.url), concurrency=3)
    assert [(s.item_id, s.run) for s in scores] == [("a", r) for r in range(3)] + [("b", r) for r in range(3)]
    assert len(srv.requests) == 2 * DEFAULT_JUDGE_RUNS
    summary = aggregate_scores(scores)
    assert summary.per_item_mean == {"a": 90.0, "b": 60.0}
    assert summary.overall_mean == 75.0


def test_aggregate_is_unweighted_over_items():
    scores = [JudgeScore("a", r, 80.0) for r in range(4)] + [JudgeScore("b", 0, 40.0)]
    s = aggregate_scores(scores)
    assert s.overall_mean == 60.0
    assert s.per_item_std == {"a": 0.0, "b": 0.0}
    assert json.loads(json.dumps(s.to_json()))["per_item"]["a"]["mean"] == 80.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 100)), min_size=1, max_size=20),
       st.randoms(use_true_random=False))
def test_aggregate_order_independent(items, random):
    scores = [JudgeScore(i, n, float(v)) for n, (i, v) in enumerate(items)]
    shuffled = list(scores)
    random.shuffle(shuffled)
    assert aggregate_scores(scores) == aggregate_scores(shuffled)


def test_score_range_enforced():
    with pytest.raises(ValueError):
        JudgeScore("a", 0, 100.5)
    with pytest.raises(Empty):
        aggregate_scores([])
