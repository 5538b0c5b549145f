"""Template question-answer generation from quality metrics and artifact provenance.

The deterministic templates are the backend of record. An external LLM may
paraphrase the pairs, but every rewrite is checked and rejected if it alters
a quality label, an artifact name or any numeric literal.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .artifact_sim import ProvenanceRecord
from .llm_client import LlmClientConfig, MalformedResponse, NetworkError, chat
from .metrics import QualityMetrics

log = logging.getLogger(__name__)

TASKS = ("Classification", "Artifact", "Analysis")


class QualityLabel(enum.IntEnum):
    Bad = 0
    Medium = 1
    Good = 2

    def __str__(self) -> str:
        return self.name


LABEL_RE = re.compile(r"\b(Good|Medium|Bad)\b")
NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class UndefinedInputs(ValueError):
    pass


class MissingImage(KeyError):
    pass


@dataclass(frozen=True)
class LabelThresholds:
    """Rule thresholds; calibrated on phantoms, not taken from any dataset."""

    snr_hi: float = 15.0
    snr_lo: float = 5.0
    efc_lo: float = 0.45
    efc_hi: float = 0.75

    def __post_init__(self):
        if not (self.snr_lo <= self.snr_hi and self.efc_lo <= self.efc_hi):
            raise ValueError(f"inconsistent thresholds: {self}")


def derive_label(m: QualityMetrics, th: LabelThresholds = LabelThresholds()) -> QualityLabel:
    missing = [n for n in ("snr1", "efc") if not m.is_defined(n)]
    if missing:
        raise UndefinedInputs(f"label needs defined {', '.join(missing)}")
    if m.snr1 < th.snr_lo or m.efc > th.efc_hi:
        return QualityLabel.Bad
    if m.snr1 >= th.snr_hi and m.efc <= th.efc_lo:
        return QualityLabel.Good
    return QualityLabel.Medium


def label_from_provenance(prov: ProvenanceRecord | None) -> QualityLabel:
    """Metric-free label used when metric extraction is ablated."""
    if prov is None or prov.is_noop:
        return QualityLabel.Good
    worst = max(s.severity for s, r in zip(prov.steps, prov.realized) if not r.get("noop"))
    return QualityLabel.Bad if worst >= 0.6 else QualityLabel.Medium


@dataclass(frozen=True)
class QAPair:
    task: str
    question: str
    answer: str
    volume_id: str
    label: QualityLabel
    metrics_snapshot: QualityMetrics | None = None
    provenance: ProvenanceRecord | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be nonempty")


# --------------------------------------------------------------------------
# phrase tables
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArtifactPhrases:
    name: str
    cause: str
    feature: str
    remedy: str


PHRASES: dict[str, ArtifactPhrases] = {
    "motion": ArtifactPhrases(
        name="motion artifact",
        cause="k-space disruption from patient movement between acquisition shots",
        feature="ghosting or blur along the phase-encode direction",
        remedy="a motion-robust PROPELLER-style radial acquisition together with better patient immobilization",
    ),
    "ghosting": ArtifactPhrases(
        name="periodic line ghosting artifact",
        cause="amplitude inconsistencies that alternate between phase-encode lines",
        feature="displaced replicas of the anatomy shifted along the phase-encode axis",
        remedy="checking gradient and receiver stability or swapping the phase-encode direction",
    ),
    "aliasing": ArtifactPhrases(
        name="aliasing artifact",
        cause="undersampling of phase-encode lines below the Nyquist rate",
        feature="wrap-around fold-over of anatomy from outside the field of view",
        remedy="enlarging the field of view or enabling phase oversampling",
    ),
    "noise": ArtifactPhrases(
        name="excess thermal noise artifact",
        cause="low received signal relative to thermal noise in k-space",
        feature="grainy texture and a raised Rician noise floor in the background",
        remedy="increasing the number of averages, using larger voxels or a higher-sensitivity receive coil",
    ),
    "bias_field": ArtifactPhrases(
        name="bias field inhomogeneity artifact",
        cause="spatially varying receive coil sensitivity",
        feature="smooth intensity shading across the field of view",
        remedy="retrospective bias-field correction or prescan intensity normalization",
    ),
}

SIGNAL_EFFECTS = {
    QualityLabel.Good: "signal is strong relative to background noise and energy is well focused in the anatomy",
    QualityLabel.Medium: "signal is adequate but noise or energy dispersion is noticeable",
    QualityLabel.Bad: "signal is weak relative to noise or energy is strongly dispersed outside the anatomy",
}
USABILITY = {
    QualityLabel.Good: "The volume is usable for downstream processing such as segmentation and volumetry without correction.",
    QualityLabel.Medium: "The volume is usable for downstream processing with caution; results should be checked after correction.",
    QualityLabel.Bad: "The volume is not recommended for downstream processing and reacquisition should be considered.",
}

Q_CLASSIFICATION = "What is the overall quality level of this MRI volume, and how do its signal characteristics affect usability?"
Q_ARTIFACT = "Which artifacts are present in this MRI volume, what causes them, and how do they appear?"
Q_ANALYSIS = "Is this MRI volume suitable for downstream processing, and what acquisition changes would improve it?"


def _fmt(x: float) -> str:
    return f"{x:.2f}" if abs(x) >= 0.1 else f"{x:.3g}"


def _severity_word(s: float) -> str:
    return "mild" if s < 1 / 3 else ("moderate" if s < 2 / 3 else "severe")


def _applied(prov: ProvenanceRecord | None) -> list[tuple[str, float]]:
    if prov is None:
        return []
    seen: dict[str, float] = {}
    for spec, realized in zip(prov.steps, prov.realized):
        if realized.get("noop"):
            continue
        seen[spec.kind] = max(seen.get(spec.kind, 0.0), spec.severity)
    return list(seen.items())


def _classification_answer(label, m, use_metrics):
    parts = [f"Quality level: {label}."]
    if use_metrics and m is not None:
        shown = [("SNR", "snr1"), ("CNR", "cnr"), ("EFC", "efc"), ("FBER", "fber"), ("CJV", "cjv")]
        readings = [f"{title} {_fmt(getattr(m, key))}" for title, key in shown if m.is_defined(key)]
        if readings:
            parts.append("Measured " + ", ".join(readings) + ".")
        flagged = sorted(k for k, _ in m.undefined.items())
        if flagged:
            parts.append("Undefined indicators: " + ", ".join(flagged) + ".")
    parts.append(f"The {SIGNAL_EFFECTS[label]}.")
    parts.append(USABILITY[label])
    return " ".join(parts)


def _artifact_answer(applied, use_metrics):
    if not applied:
        return "No dominant artifact detected; the image shows no characteristic k-space or intensity degradation."
    sentences = []
    for kind, sev in applied:
        ph = PHRASES[kind]
        sev_txt = f"{_severity_word(sev)} (severity {sev:.2f})" if use_metrics else _severity_word(sev)
        sentences.append(f"A {sev_txt} {ph.name} is present, caused by {ph.cause}, appearing as {ph.feature}.")
    return " ".join(sentences)


def _analysis_answer(label, applied):
    parts = [USABILITY[label]]
    if applied:
        fixes = [f"for the {PHRASES[k].name}, consider {PHRASES[k].remedy}" for k, _ in applied]
        parts.append("Suggested optimization: " + "; ".join(fixes) + ".")
    elif label == QualityLabel.Good:
        parts.append("No acquisition changes are needed.")
    else:
        parts.append("Suggested optimization: review coil selection, averaging and field-of-view settings.")
    return " ".join(parts)


def generate_qa(m: QualityMetrics | None, prov: ProvenanceRecord | None = None, *,
                volume_id: str = "vol", thresholds: LabelThresholds = LabelThresholds(),
                use_metrics: bool = True, label: QualityLabel | None = None) -> list[QAPair]:
    """One Classification, Artifact and Analysis pair for a volume.

    With ``use_metrics=False`` no numeric value appears in any answer and the
    label comes from provenance unless given explicitly.
    """
    if label is None:
        label = derive_label(m, thresholds) if use_metrics else label_from_provenance(prov)
    applied = _applied(prov)
    snapshot = m if use_metrics else None
    common = dict(volume_id=volume_id, label=label, metrics_snapshot=snapshot, provenance=prov)
    return [
        QAPair("Classification", Q_CLASSIFICATION, _classification_answer(label, m, use_metrics), **common),
        QAPair("Artifact", Q_ARTIFACT, _artifact_answer(applied, use_metrics), **common),
        QAPair("Analysis", Q_ANALYSIS, _analysis_answer(label, applied), **common),
    ]


def named_kinds(text: str) -> set[str]:
    return {kind for kind, ph in PHRASES.items() if ph.name in text}


# --------------------------------------------------------------------------
# LLM paraphrase
# --------------------------------------------------------------------------

PARAPHRASE_SYSTEM_PROMPT = (
    "You rewrite question-answer pairs about MRI image quality so they read naturally. "
    "Keep the meaning. Do not change any quality label word (Good, Medium, Bad), any artifact name, "
    "or any number; copy numbers exactly as written. Reply with a JSON object with keys "
    '"question" and "answer" and nothing else.'
)


def _invariants(text: str) -> tuple[Counter, Counter, set]:
    return Counter(LABEL_RE.findall(text)), Counter(NUMBER_RE.findall(text)), named_kinds(text)


def validate_rewrite(original: QAPair, question: str, answer: str) -> str | None:
    """Return why a rewrite is rejected, or None if acceptable."""
    if not isinstance(question, str) or not isinstance(answer, str):
        return "non-text fields"
    if not question.strip() or not answer.strip():
        return "empty text"
    for field_name, old, new in (("question", original.question, question), ("answer", original.answer, answer)):
        o_lab, o_num, o_kind = _invariants(old)
        n_lab, n_num, n_kind = _invariants(new)
        if o_lab != n_lab:
            return f"{field_name}: label tokens changed {dict(o_lab)} -> {dict(n_lab)}"
        if o_num != n_num:
            return f"{field_name}: numeric literals changed"
        if o_kind != n_kind:
            return f"{field_name}: artifact names changed"
    return None


def _parse_rewrite(content: str) -> tuple[str, str]:
    text = content.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text[text.find("{"):]
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise MalformedResponse("no JSON object in response")
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise MalformedResponse(str(exc)) from exc
    if not isinstance(obj, dict) or "question" not in obj or "answer" not in obj:
        raise MalformedResponse("response lacks question/answer")
    return obj["question"], obj["answer"]


def _paraphrase_one(pair: QAPair, client: LlmClientConfig) -> QAPair:
    user = json.dumps({"question": pair.question, "answer": pair.answer}, ensure_ascii=False)
    messages = [{"role": "system", "content": PARAPHRASE_SYSTEM_PROMPT}, {"role": "user", "content": user}]
    try:
        question, answer = _parse_rewrite(chat(client, messages))
    except (NetworkError, MalformedResponse) as exc:
        log.warning("paraphrase of %s/%s failed, keeping template: %s", pair.volume_id, pair.task, exc)
        return pair
    reason = validate_rewrite(pair, question, answer)
    if reason:
        log.warning("paraphrase of %s/%s rejected, keeping template: %s", pair.volume_id, pair.task, reason)
        return pair
    return replace(pair, question=question, answer=answer)


def llm_paraphrase(pairs: Sequence[QAPair], client: LlmClientConfig, workers: int = 1) -> list[QAPair]:
    """Rewrite pairs through the LLM; output order always matches input order."""
    if workers <= 1:
        return [_paraphrase_one(p, client) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: _paraphrase_one(p, client), pairs))


# --------------------------------------------------------------------------
# sampling and export
# --------------------------------------------------------------------------

def stratum_count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 0.5))


def sample_qa(pairs: Sequence[QAPair], fraction: float, seed: int = 0) -> list[QAPair]:
    """Stratified-by-task subset keeping ``round(fraction * n_task)`` per task.

    Selected pairs keep their original relative order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    pairs = list(pairs)
    if fraction == 1.0:
        return pairs
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    keep: set[int] = set()
    for task in TASKS:
        idx = [i for i, p in enumerate(pairs) if p.task == task]
        k = stratum_count(fraction, len(idx))
        if k:
            keep.update(int(i) for i in rng.permutation(idx)[:k])
    return [p for i, p in enumerate(pairs) if i in keep]


def pair_ids(pairs: Iterable[QAPair]) -> list[str]:
    counts: Counter = Counter()
    out = []
    for p in pairs:
        key = (p.volume_id, p.task)
        out.append(f"{p.volume_id}-{p.task.lower()}-{counts[key]}")
        counts[key] += 1
    return out


def corpus_records(pairs: Sequence[QAPair], image_paths: Mapping[str, str]) -> list[dict]:
    records = []
    for pid, p in zip(pair_ids(pairs), pairs):
        if p.volume_id not in image_paths:
            raise MissingImage(f"no image path for volume {p.volume_id!r}")
        records.append({
            "id": pid,
            "image": str(image_paths[p.volume_id]),
            "conversations": [
                {"from": "human", "value": p.question},
                {"from": "assistant", "value": p.answer},
            ],
        })
    return records


def export_jsonl(pairs: Sequence[QAPair], image_paths: Mapping[str, str], path: str | Path) -> int:
    """Write the instruction-tuning corpus; returns the number of lines."""
    records = corpus_records(pairs, image_paths)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return len(records)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


REVIEW_COLUMNS = ("volume_id", "task", "question", "answer", "label")


def export_review_tsv(pairs: Sequence[QAPair], path: str | Path) -> None:
    """Flat TSV for human expert review of generated pairs."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REVIEW_COLUMNS)
        for p in pairs:
            w.writerow([p.volume_id, p.task, p.question, p.answer, str(p.label)])


def pairs_to_json(pairs: Sequence[QAPair]) -> list[dict]:
    return [{
        "task": p.task, "question": p.question, "answer": p.answer,
        "volume_id": p.volume_id, "label": str(p.label),
        "metrics_snapshot": None if p.metrics_snapshot is None else p.metrics_snapshot.to_json(),
        "provenance": None if p.provenance is None else p.provenance.to_json(),
    } for p in pairs]


def pairs_from_json(items: Sequence[dict]) -> list[QAPair]:
    return [QAPair(
        task=d["task"], question=d["question"], answer=d["answer"], volume_id=d["volume_id"],
        label=QualityLabel[d["label"]],
        metrics_snapshot=None if d.get("metrics_snapshot") is None else QualityMetrics.from_json(d["metrics_snapshot"]),
        provenance=None if d.get("provenance") is None else ProvenanceRecord.from_json(d["provenance"]),
    ) for d in items]
