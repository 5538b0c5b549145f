"""Command-line interface.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifact_sim import KINDS, ArtifactSpec, ProvenanceRecord, apply_artifact
from .evaluation import (
    DEFAULT_JUDGE_RUNS, aggregate_scores, classification_report, judge_many,
)
from .llm_client import LlmClientConfig
from .lora_math import (
    DEFAULT_ALPHA, LoraAdapter, forward, grad_check, merge, numerical_rank,
    trainable_fraction,
)
from .metrics import METRIC_NAMES, QualityMetrics, compute_metrics
from .pipeline import ConfigError, load_config, run
from .qa_gen import (
    LabelThresholds, export_jsonl, export_review_tsv, generate_qa, llm_paraphrase,
    pairs_from_json, pairs_to_json, sample_qa,
)
from .segmentation import background_mask, foreground_mask
from .volume_io import PhantomSpec, Volume, generate_phantom, read_nifti, write_nifti

log = logging.getLogger("mriqa")

# fixed, documented column order of the `metrics` TSV
METRICS_TSV_COLUMNS = METRIC_NAMES


def _metric_cell(m: QualityMetrics, name: str) -> str:
    return f"{getattr(m, name):.6g}" if m.is_defined(name) else "NA"


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    import yaml

    with open(path, encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}


def _client(args, section: str, default_env: str) -> LlmClientConfig | None:
    conf = dict(_load_yaml(getattr(args, "config", None)).get(section) or {})
    if getattr(args, "endpoint", None):
        conf["endpoint"] = args.endpoint
    if getattr(args, "timeout", None):
        conf["timeout"] = args.timeout
    if getattr(args, "retries", None) is not None:
        conf["max_retries"] = args.retries
    if "endpoint" not in conf:
        return None
    return LlmClientConfig.from_dict(conf, default_env)


def _masks(vol: Volume):
    fg = foreground_mask(vol)
    return fg, background_mask(vol, fg)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec(tuple(args.dims), args.tissue, tuple(args.semi_axes), args.noise, args.seed,
                       args.inner_intensity, tuple(args.inner_semi_axes) if args.inner_semi_axes else None)
    vol, gt = generate_phantom(spec)
    write_nifti(vol, args.out)
    if args.mask_out:
        write_nifti(vol.with_data(gt.mask.astype(np.float32)), args.mask_out)
    return 0


def cmd_segment(args) -> int:
    vol = read_nifti(args.input)
    fg, bg = _masks(vol)
    write_nifti(vol.with_data(fg.astype(np.float32)), args.out)
    if args.bg_out:
        write_nifti(vol.with_data(bg.astype(np.float32)), args.bg_out)
    print(f"foreground voxels: {int(fg.sum())}, background voxels: {int(bg.sum())}")
    return 0


def cmd_metrics(args) -> int:
    lines = ["\t".join(METRICS_TSV_COLUMNS)]
    records = []
    for path in args.input:
        vol = read_nifti(path)
        fg, bg = _masks(vol)
        m = compute_metrics(vol, fg, bg)
        lines.append("\t".join(_metric_cell(m, n) for n in METRICS_TSV_COLUMNS))
        records.append({"path": str(path), "metrics": m.to_json()})
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.json_out:
        _write_json(records, args.json_out)
    return 0


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = float(v)
    return params


def cmd_corrupt(args) -> int:
    vol = read_nifti(args.input)
    prior = None
    if args.prior:
        prior = ProvenanceRecord.from_json(json.loads(Path(args.prior).read_text(encoding="utf-8")))
    spec = ArtifactSpec(args.kind, args.severity, args.seed, _parse_params(args.param))
    out, rec = apply_artifact(vol, spec, prior)
    write_nifti(out, args.out)
    if args.provenance:
        Path(args.provenance).write_text(rec.dumps() + "\n", encoding="utf-8")
    return 0


def cmd_qa(args) -> int:
    vol = read_nifti(args.input)
    prov = None
    if args.provenance:
        prov = ProvenanceRecord.from_json(json.loads(Path(args.provenance).read_text(encoding="utf-8")))
    th = LabelThresholds(**(_load_yaml(args.config).get("thresholds") or {}))
    m = None
    if not args.no_metrics:
        fg, bg = _masks(vol)
        m = compute_metrics(vol, fg, bg)
    vid = args.volume_id or Path(args.input).name.split(".")[0]
    pairs = generate_qa(m, prov, volume_id=vid, thresholds=th, use_metrics=not args.no_metrics)
    if args.paraphrase:
        client = _client(args, "llm", "LLM_API_KEY")
        if client is None:
            raise ConfigError("--paraphrase needs an LLM endpoint (--endpoint or config 'llm' section)")
        pairs = llm_paraphrase(pairs, client)
    _write_json(pairs_to_json(pairs), args.out)
    return 0


def _read_pairs(path):
    return pairs_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_sample(args) -> int:
    pairs = sample_qa(_read_pairs(args.input), args.fraction, args.seed)
    _write_json(pairs_to_json(pairs), args.out)
    return 0


def cmd_export(args) -> int:
    pairs = [p for path in args.input for p in _read_pairs(path)]
    images = {}
    for item in args.image or []:
        vid, _, img = item.partition("=")
        images[vid] = img
    if args.image_dir:
        for p in pairs:
            images.setdefault(p.volume_id, str(Path(args.image_dir) / f"{p.volume_id}.png"))
    n = export_jsonl(pairs, images, args.out)
    if args.review_tsv:
        export_review_tsv(pairs, args.review_tsv)
    print(f"wrote {n} lines to {args.out}")
    return 0


def _read_labels(path) -> list[str]:
    return [line.split("\t")[-1].strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_eval(args) -> int:
    report = classification_report(_read_labels(args.preds), _read_labels(args.truths))
    _write_json(report, args.out)
    return 0


def cmd_judge(args) -> int:
    client = _client(args, "judge", "JUDGE_API_KEY")
    if client is None:
        raise ConfigError("judge needs an endpoint (--endpoint or config 'judge' section)")
    descriptions = {}
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                descriptions[str(obj["id"])] = obj["text"]
    scores = judge_many(descriptions, client, args.runs, args.concurrency)
    summary = aggregate_scores(scores).to_json()
    summary["scores"] = [{"item": s.item_id, "run": s.run, "score": s.score} for s in scores]
    _write_json(summary, args.out)
    return 0


def cmd_lora_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    d_out, d_in, r = args.d_out, args.d_in, args.rank
    ad = LoraAdapter(rng.normal(size=(d_out, d_in)), rng.normal(size=(r, d_in)),
                     rng.normal(size=(d_out, r)), r, args.alpha)
    x = rng.normal(size=d_in)
    target = rng.normal(size=d_out)
    merged = merge(ad)
    fx, mx = forward(ad, x), merged @ x
    report = {
        "d_in": d_in, "d_out": d_out, "rank": r, "alpha": args.alpha, "scaling": ad.scaling,
        "trainable_fraction": trainable_fraction(d_in, d_out, r),
        "forward_vs_merge_rel_error": float(np.linalg.norm(fx - mx) / max(np.linalg.norm(mx), 1e-300)),
        "update_numerical_rank": numerical_rank(merged - ad.W0),
    }
    if max(d_in, d_out) <= 32:
        gc = grad_check(ad, x, target)
        report["grad_check"] = {"rel_error_A": gc.rel_error_A, "rel_error_B": gc.rel_error_B,
                                "passed": gc.passed,
                                "eps_sweep": {f"{e:g}": {"forward": f, "central": c} for e, (f, c) in gc.sweep.items()}}
    _write_json(report, args.out)
    ok = report["update_numerical_rank"] <= r and report["forward_vs_merge_rel_error"] <= 1e-6
    ok = ok and report.get("grad_check", {}).get("passed", True)
    return 0 if ok else 1


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = Path(args.out)
    if args.jobs:
        cfg.jobs = args.jobs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.fraction is not None:
        cfg.qa_fraction = args.fraction
    if args.no_metrics:
        cfg.use_metrics = False
    report = run(cfg)
    s = report.to_json()
    print(f"{s['n_ok']} ok, {s['n_failed']} failed, {s['corpus_lines']} corpus lines -> {cfg.output_dir}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mriqa", description="MRI quality metrics, artifact simulation and QA corpora.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=None if name == "run" else 0, help="random seed")
        return sp

    sp = add("phantom", cmd_phantom, "Write a synthetic ellipsoid phantom.")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    sp.add_argument("--tissue", type=float, default=100.0)
    sp.add_argument("--semi-axes", type=float, nargs=3, default=[20.0, 24.0, 18.0])
    sp.add_argument("--noise", type=float, default=5.0, help="background noise sigma")
    sp.add_argument("--inner-intensity", type=float)
    sp.add_argument("--inner-semi-axes", type=float, nargs=3)
    sp.add_argument("--mask-out", help="also write the ground-truth foreground mask")

    sp = add("segment", cmd_segment, "Write foreground (and background) masks.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bg-out")

    sp = add("metrics", cmd_metrics, "Print the 15 quality metrics as TSV.")
    sp.add_argument("--in", dest="input", required=True, action="append")
    sp.add_argument("--out", help="TSV path (default stdout)")
    sp.add_argument("--json-out")

    sp = add("corrupt", cmd_corrupt, "Apply a simulated artifact.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", required=True, choices=KINDS)
    sp.add_argument("--severity", type=float, required=True)
    sp.add_argument("--param", action="append", metavar="KEY=VALUE")
    sp.add_argument("--provenance", help="write the provenance record (JSON)")
    sp.add_argument("--prior", help="provenance record of earlier artifacts to extend")

    sp = add("qa", cmd_qa, "Generate QA pairs for one volume.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--provenance")
    sp.add_argument("--volume-id")
    sp.add_argument("--no-metrics", action="store_true", help="metric-free templates (ablation)")
    sp.add_argument("--paraphrase", action="store_true")
    sp.add_argument("--config")
    sp.add_argument("--endpoint")
    sp.add_argument("--timeout", type=float)
    sp.add_argument("--retries", type=int)
    sp.add_argument("--out")

    sp = add("sample", cmd_sample, "Stratified subsample of QA pairs.")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--out")

    sp = add("export", cmd_export, "Export QA pairs as a JSONL corpus.")
    sp.add_argument("--in", dest="input", required=True, action="append")
    sp.add_argument("--image", action="append", metavar="VOLUME_ID=PATH")
    sp.add_argument("--image-dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--review-tsv")

    sp = add("eval", cmd_eval, "Accuracy and macro-F1 from label files.")
    sp.add_argument("--preds", required=True)
    sp.add_argument("--truths", required=True)
    sp.add_argument("--out")

    sp = add("judge", cmd_judge, "Score descriptions with an LLM judge.")
    sp.add_argument("--in", dest="input", required=True, help="JSONL with id and text")
    sp.add_argument("--runs", type=int, default=DEFAULT_JUDGE_RUNS)
    sp.add_argument("--concurrency", type=int, default=1)
    sp.add_argument("--config")
    sp.add_argument("--endpoint")
    sp.add_argument("--timeout", type=float)
    sp.add_argument("--retries", type=int)
    sp.add_argument("--out")

    sp = add("lora-check", cmd_lora_check, "Verify low-rank adapter arithmetic.")
    sp.add_argument("--d-in", type=int, default=16)
    sp.add_argument("--d-out", type=int, default=24)
    sp.add_argument("--rank", type=int, default=4)
    sp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    sp.add_argument("--out")

    sp = add("run", cmd_run, "Run the full pipeline from a YAML config.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--no-metrics", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        print("mriqa: error: a command is required", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"mriqa {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"mriqa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
