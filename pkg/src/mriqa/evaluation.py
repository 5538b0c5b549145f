"""Three-tier classification scores and LLM-judge aggregation."""
from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .llm_client import LlmClientConfig, MalformedResponse, chat
from .qa_gen import QualityLabel

# row/column order of every confusion matrix
CLASSES = (QualityLabel.Good, QualityLabel.Medium, QualityLabel.Bad)

JUDGE_PROMPT = (
    "Assess the following MRI quality description [{description}] on a 0-100 scale "
    "for artifact identification and diagnostic relevance."
)
DEFAULT_JUDGE_RUNS = 3

_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


class LengthMismatch(ValueError):
    pass


class Empty(ValueError):
    pass


def _as_label(x) -> QualityLabel:
    if isinstance(x, QualityLabel):
        return x
    if isinstance(x, str):
        return QualityLabel[x.strip().capitalize()]
    return QualityLabel(int(x))


def confusion(preds: Sequence, truths: Sequence) -> np.ndarray:
    """3x3 counts indexed ``[true, predicted]`` in Good, Medium, Bad order."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise Empty("nothing to score")
    pos = {c: i for i, c in enumerate(CLASSES)}
    cm = np.zeros((3, 3), dtype=np.int64)
    for p, t in zip(preds, truths):
        cm[pos[_as_label(t)], pos[_as_label(p)]] += 1
    return cm


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise Empty("confusion matrix is empty")
    return float(np.trace(cm)) / float(total)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class; a zero precision+recall denominator gives 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    denom = predicted + actual
    # F1 = 2 TP / (2 TP + FP + FN) = 2 TP / (predicted + actual)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm: np.ndarray) -> float:
    if np.asarray(cm).sum() <= 0:
        raise Empty("confusion matrix is empty")
    return float(np.mean(per_class_f1(cm)))


# --------------------------------------------------------------------------
# judge
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class JudgeScore:
    item_id: str
    run: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 100.0:
            raise ValueError(f"score {self.score} outside [0, 100]")


def judge_prompt(description: str) -> str:
    return JUDGE_PROMPT.format(description=description)


def parse_score(text: str, json_mode: bool = False) -> float:
    """First number token in *text* (or the ``score`` field in JSON mode)."""
    if json_mode:
        try:
            value = float(json.loads(text)["score"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"expected JSON with a score field: {text[:80]!r}") from exc
    else:
        m = _NUMBER.search(text)
        if m is None:
            raise MalformedResponse(f"no score in judge response {text[:80]!r}")
        value = float(m.group())
    if not math.isfinite(value) or not 0.0 <= value <= 100.0:
        raise MalformedResponse(f"judge score {value} outside [0, 100]")
    return value


def judge_request(description: str, client: LlmClientConfig, item_id: str = "item",
                  run: int = 0, json_mode: bool = False) -> JudgeScore:
    messages = [{"role": "user", "content": judge_prompt(description)}]
    return JudgeScore(item_id, run, parse_score(chat(client, messages), json_mode))


def judge_many(descriptions: dict[str, str], client: LlmClientConfig,
               runs: int = DEFAULT_JUDGE_RUNS, concurrency: int = 1) -> list[JudgeScore]:
    """Score every description *runs* times; results ordered by (item, run)."""
    jobs = [(item, r) for item in sorted(descriptions) for r in range(runs)]

    def one(job):
        item, r = job
        return judge_request(descriptions[item], client, item, r)

    if concurrency <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(one, jobs))


@dataclass(frozen=True)
class ScoreSummary:
    per_item_mean: dict[str, float]
    per_item_std: dict[str, float]
    overall_mean: float

    def to_json(self) -> dict:
        return {"overall_mean": self.overall_mean,
                "per_item": {k: {"mean": self.per_item_mean[k], "std": self.per_item_std[k]}
                             for k in sorted(self.per_item_mean)}}


def aggregate_scores(scores: Sequence[JudgeScore]) -> ScoreSummary:
    """Mean over runs per item, then the unweighted mean over items."""
    if not scores:
        raise Empty("no judge scores")
    by_item: dict[str, list[float]] = {}
    for s in scores:
        by_item.setdefault(s.item_id, []).append(s.score)
    means = {k: float(np.mean(sorted(v))) for k, v in by_item.items()}
    stds = {k: float(np.std(sorted(v))) for k, v in by_item.items()}
    overall = float(np.mean([means[k] for k in sorted(means)]))
    return ScoreSummary(means, stds, overall)


def classification_report(preds: Sequence, truths: Sequence) -> dict:
    cm = confusion(preds, truths)
    return {
        "classes": [str(c) for c in CLASSES],
        "confusion": cm.tolist(),
        "accuracy": accuracy(cm),
        "macro_f1": macro_f1(cm),
        "per_class_f1": per_class_f1(cm).tolist(),
    }
