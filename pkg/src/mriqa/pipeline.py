"""Batch orchestration: volumes -> masks -> metrics -> labels/QA -> corpus and reports.

Each volume is processed independently; a failure is recorded in the run
report and never aborts the batch. Results are merged by volume index, so
output files do not depend on worker scheduling.
"""
from __future__ import annotations

import html
import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from . import metrics as metrics_mod
from .artifact_sim import KINDS, ArtifactSpec, ProvenanceRecord, apply_artifacts
from .evaluation import aggregate_scores, judge_many
from .llm_client import LlmClientConfig
from .metrics import METRIC_NAMES, QualityMetrics
from .qa_gen import (
    LabelThresholds, QAPair, QualityLabel, derive_label, export_jsonl, export_review_tsv,
    generate_qa, label_from_provenance, llm_paraphrase, sample_qa,
)
from .volume_io import PhantomSpec, Volume, generate_phantom, read_nifti, write_nifti

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    """One artifact distribution: severity ~ U[lo, hi]."""

    kind: str
    severity: tuple[float, float]
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "PlanEntry":
        if obj.get("kind") not in KINDS:
            raise ConfigError(f"artifact plan kind must be one of {KINDS}, got {obj.get('kind')!r}")
        sev = obj.get("severity", 0.5)
        lo, hi = (float(sev), float(sev)) if isinstance(sev, (int, float)) else (float(sev[0]), float(sev[1]))
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"severity range {sev} must satisfy 0 <= lo <= hi <= 1")
        return cls(obj["kind"], (lo, hi), dict(obj.get("params", {})))


@dataclass(frozen=True)
class PhantomBatch:
    count: int = 10
    dims: tuple[int, int, int] = (64, 64, 64)
    tissue_intensity: float = 100.0
    semi_axes: tuple[float, float, float] = (20.0, 24.0, 18.0)
    background_noise_sigma: float = 5.0
    inner_intensity: float | None = None
    inner_semi_axes: tuple[float, float, float] | None = None

    def spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(tuple(self.dims), self.tissue_intensity, tuple(self.semi_axes),
                           self.background_noise_sigma, seed, self.inner_intensity,
                           None if self.inner_semi_axes is None else tuple(self.inner_semi_axes))


@dataclass
class PipelineConfig:
    output_dir: Path
    inputs: list[Path] = field(default_factory=list)
    phantoms: PhantomBatch | None = None
    clean_count: int = 0
    artifact_plan: list[PlanEntry] = field(default_factory=list)
    thresholds: LabelThresholds = LabelThresholds()
    qa_fraction: float = 1.0
    use_metrics: bool = True
    llm: LlmClientConfig | None = None
    judge: LlmClientConfig | None = None
    judge_runs: int = 3
    seed: int = 0
    jobs: int = 1
    write_volumes: bool = True

    def validate(self) -> None:
        if not 0.0 < self.qa_fraction <= 1.0:
            raise ConfigError(f"qa_fraction must lie in (0, 1], got {self.qa_fraction}")
        if not self.inputs and self.phantoms is None:
            raise ConfigError("config needs input paths or a phantom batch")
        if self.phantoms is not None and self.phantoms.count < 1:
            raise ConfigError("phantom count must be >= 1")
        if self.clean_count < 0 or self.jobs < 1 or self.judge_runs < 1:
            raise ConfigError("clean_count >= 0, jobs >= 1 and judge_runs >= 1 are required")

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "PipelineConfig":
        obj = dict(obj)
        known = {"output_dir", "inputs", "phantoms", "clean_count", "artifact_plan", "thresholds",
                 "qa_fraction", "use_metrics", "llm", "judge", "judge_runs", "seed", "jobs", "write_volumes"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = base_dir or Path(".")
        if "output_dir" not in obj:
            raise ConfigError("output_dir is required")
        try:
            cfg = cls(
                output_dir=base / obj["output_dir"],
                inputs=[base / p for p in obj.get("inputs", [])],
                phantoms=None if obj.get("phantoms") is None else PhantomBatch(**obj["phantoms"]),
                clean_count=int(obj.get("clean_count", 0)),
                artifact_plan=[PlanEntry.from_dict(e) for e in obj.get("artifact_plan", [])],
                thresholds=LabelThresholds(**obj.get("thresholds", {})),
                qa_fraction=float(obj.get("qa_fraction", 1.0)),
                use_metrics=bool(obj.get("use_metrics", True)),
                llm=None if obj.get("llm") is None else LlmClientConfig.from_dict(obj["llm"], "LLM_API_KEY"),
                judge=None if obj.get("judge") is None else LlmClientConfig.from_dict(obj["judge"], "JUDGE_API_KEY"),
                judge_runs=int(obj.get("judge_runs", 3)),
                seed=int(obj.get("seed", 0)),
                jobs=int(obj.get("jobs", 1)),
                write_volumes=bool(obj.get("write_volumes", True)),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


@dataclass
class VolumeResult:
    index: int
    volume_id: str
    ok: bool
    error: str | None = None
    label: QualityLabel | None = None
    metrics: QualityMetrics | None = None
    provenance: ProvenanceRecord | None = None
    pairs: list[QAPair] = field(default_factory=list)
    image: str | None = None


@dataclass
class RunReport:
    rows: list[VolumeResult]
    corpus_lines: int
    metric_summary: dict[str, dict[str, float]]
    output_dir: Path
    judge_summary: dict | None = None

    @property
    def failures(self) -> list[VolumeResult]:
        return [r for r in self.rows if not r.ok]

    @property
    def successes(self) -> list[VolumeResult]:
        return [r for r in self.rows if r.ok]

    def to_json(self) -> dict:
        return {
            "volumes": [{
                "index": r.index, "volume_id": r.volume_id, "status": "ok" if r.ok else "failed",
                "error": r.error, "label": None if r.label is None else str(r.label),
                "artifacts": [] if r.provenance is None else r.provenance.kinds,
                "pairs": len(r.pairs), "image": r.image,
            } for r in self.rows],
            "n_ok": len(self.successes),
            "n_failed": len(self.failures),
            "corpus_lines": self.corpus_lines,
            "metric_summary": self.metric_summary,
            "judge": self.judge_summary,
        }


# --------------------------------------------------------------------------

def _volume_id(index: int, path: Path | None) -> str:
    if path is None:
        return f"phantom{index:03d}"
    stem = re.sub(r"\.nii(\.gz)?$", "", path.name)
    return f"{index:03d}_" + re.sub(r"[^A-Za-z0-9_.-]+", "_", stem)


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), *keys]).generate_state(1, dtype=np.uint64)[0])


def plan_for(cfg: PipelineConfig, index: int) -> list[ArtifactSpec]:
    if index < cfg.clean_count or not cfg.artifact_plan:
        return []
    entry = cfg.artifact_plan[(index - cfg.clean_count) % len(cfg.artifact_plan)]
    rng = np.random.default_rng(_derived_seed(cfg.seed, 1, index))
    lo, hi = entry.severity
    severity = lo if hi == lo else float(rng.uniform(lo, hi))
    return [ArtifactSpec(entry.kind, round(severity, 6), _derived_seed(cfg.seed, 2, index), entry.params)]


def thumbnail(v: Volume, path: Path) -> None:
    """Middle axial slice, min-max scaled to 8 bits."""
    sl = np.asarray(v.data[:, :, v.dims[2] // 2], dtype=np.float64).T[::-1]
    lo, hi = float(sl.min()), float(sl.max())
    img = np.zeros(sl.shape, np.uint8) if hi <= lo else np.round((sl - lo) / (hi - lo) * 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(img)).save(path, format="PNG")


def _process(cfg: PipelineConfig, index: int, path: Path | None) -> VolumeResult:
    vid = _volume_id(index, path)
    try:
        if path is None:
            vol, _ = generate_phantom(cfg.phantoms.spec(_derived_seed(cfg.seed, 0, index)))
        else:
            vol = read_nifti(path)
        specs = plan_for(cfg, index)
        vol, prov = apply_artifacts(vol, specs)
        prov = prov if specs else None

        m = None
        if cfg.use_metrics:
            m, _, _ = metrics_mod.metrics_for(vol)
            label = derive_label(m, cfg.thresholds)
        else:
            label = label_from_provenance(prov)
        pairs = generate_qa(m, prov, volume_id=vid, thresholds=cfg.thresholds,
                            use_metrics=cfg.use_metrics, label=label)

        image = Path("images") / f"{vid}.png"
        thumbnail(vol, cfg.output_dir / image)
        if cfg.write_volumes:
            write_nifti(vol, cfg.output_dir / "volumes" / f"{vid}.nii.gz")
        return VolumeResult(index, vid, True, label=label, metrics=m, provenance=prov,
                            pairs=pairs, image=image.as_posix())
    except Exception as exc:  # per-volume isolation
        log.warning("volume %s failed: %s", vid, exc)
        return VolumeResult(index, vid, False, error=f"{type(exc).__name__}: {exc}")


def metric_summary(results: list[VolumeResult]) -> dict[str, dict[str, float]]:
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r.metrics, name) for r in results
                if r.ok and r.metrics is not None and r.metrics.is_defined(name)]
        if vals:
            a = np.array(vals, dtype=np.float64)
            out[name] = {"n": len(vals), "mean": float(a.mean()), "std": float(a.std()),
                         "min": float(a.min()), "max": float(a.max())}
    return out


def _fmt(x: float | None) -> str:
    return "NA" if x is None or not math.isfinite(x) else repr(float(x))


def write_metrics_tsv(results: list[VolumeResult], path: Path) -> None:
    cols = ["volume_id", "status", "label", "artifacts", *METRIC_NAMES]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in results:
            kinds = ",".join(r.provenance.kinds) if r.provenance else ""
            vals = [_fmt(getattr(r.metrics, n)) if r.metrics else "NA" for n in METRIC_NAMES]
            row = [r.volume_id, "ok" if r.ok else "failed", str(r.label) if r.label is not None else "NA", kinds or "-", *vals]
            fh.write("\t".join(row) + "\n")


def write_html(report: RunReport, path: Path) -> None:
    e = html.escape
    head = "".join(f"<th>{e(c)}</th>" for c in ["volume", "status", "label", "artifacts", "thumbnail", *METRIC_NAMES])
    rows = []
    for r in report.rows:
        kinds = ", ".join(r.provenance.kinds) if r.provenance else "-"
        thumb = f'<img src="{e(r.image)}" width="96">' if r.image else e(r.error or "")
        vals = "".join(
            f"<td>{'NA' if r.metrics is None or not r.metrics.is_defined(n) else f'{getattr(r.metrics, n):.4g}'}</td>"
            for n in METRIC_NAMES)
        rows.append(f"<tr><td>{e(r.volume_id)}</td><td>{'ok' if r.ok else 'failed'}</td>"
                    f"<td>{e(str(r.label) if r.label is not None else 'NA')}</td><td>{e(kinds)}</td><td>{thumb}</td>{vals}</tr>")
    summary = "".join(
        f"<tr><td>{e(k)}</td><td>{v['n']}</td><td>{v['mean']:.4g}</td><td>{v['std']:.4g}</td>"
        f"<td>{v['min']:.4g}</td><td>{v['max']:.4g}</td></tr>" for k, v in report.metric_summary.items())
    doc = f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>MRI quality report</title>
<style>body{{font-family:sans-serif}}table{{border-collapse:collapse}}td,th{{border:1px solid #999;padding:2px 6px;font-size:12px}}</style>
</head><body>
<h1>MRI quality report</h1>
<p>{len(report.successes)} volumes processed, {len(report.failures)} failed, {report.corpus_lines} corpus lines.</p>
<h2>Volumes</h2>
<table><tr>{head}</tr>
{chr(10).join(rows)}
</table>
<h2>Metric summary</h2>
<table><tr><th>metric</th><th>n</th><th>mean</th><th>std</th><th>min</th><th>max</th></tr>
{summary}
</table>
</body></html>
"""
    path.write_text(doc, encoding="utf-8")


def run(cfg: PipelineConfig) -> RunReport:
    cfg.validate()
    out = Path(cfg.output_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        if cfg.write_volumes:
            (out / "volumes").mkdir(exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    jobs: list[Path | None] = list(cfg.inputs) if cfg.inputs else [None] * cfg.phantoms.count
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(lambda a: _process(cfg, *a), enumerate(jobs)))
    else:
        results = [_process(cfg, i, p) for i, p in enumerate(jobs)]
    results.sort(key=lambda r: r.index)

    all_pairs = [p for r in results if r.ok for p in r.pairs]
    sampled = sample_qa(all_pairs, cfg.qa_fraction, cfg.seed)
    if cfg.llm is not None:
        sampled = llm_paraphrase(sampled, cfg.llm, workers=cfg.jobs)
    by_volume: dict[str, list[QAPair]] = {}
    for p in sampled:
        by_volume.setdefault(p.volume_id, []).append(p)
    for r in results:
        r.pairs = by_volume.get(r.volume_id, []) if r.ok else []

    images = {r.volume_id: r.image for r in results if r.ok}
    n_lines = export_jsonl(sampled, images, out / "corpus.jsonl")
    export_review_tsv(sampled, out / "review.tsv")
    write_metrics_tsv(results, out / "metrics.tsv")

    judge_summary = None
    if cfg.judge is not None and sampled:
        descriptions = {}
        for r in results:
            texts = [p.answer for p in r.pairs if p.task in ("Artifact", "Analysis")]
            if texts:
                descriptions[r.volume_id] = " ".join(texts)
        try:
            judge_summary = aggregate_scores(judge_many(descriptions, cfg.judge, cfg.judge_runs)).to_json()
        except Exception as exc:
            log.warning("judge scoring failed: %s", exc)
            judge_summary = {"error": f"{type(exc).__name__}: {exc}"}

    report = RunReport(results, n_lines, metric_summary(results), out, judge_summary)
    with open(out / "errors.json", "w", encoding="utf-8") as fh:
        json.dump([{"volume_id": r.volume_id, "error": r.error} for r in report.failures], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "provenance.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            if r.provenance is not None:
                fh.write(json.dumps({"volume_id": r.volume_id, "provenance": r.provenance.to_json()}, sort_keys=True) + "\n")
    write_html(report, out / "report.html")
    return report


def load_config(path: str | os.PathLike) -> PipelineConfig:
    import yaml

    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        obj = yaml.safe_load(fh) or {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return PipelineConfig.from_dict(obj, base_dir=path.parent)
