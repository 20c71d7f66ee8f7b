"""Command line entry point: ``modguard scan|eval|train-toy|bench``.

Exit codes: 0 success, 1 fatal configuration or input error, 2 when a scan
finished but at least one image failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backends import (
    BackendDescriptor, BackendKind, OutputLayout, RecordedBackend, RecordingBackend,
    SyntheticClassifier, SyntheticDetector, probe_store_shape,
)
from .classifier import OptimizerConfig, make_dial_dataset, precision_recall_dial
from .detector import ROW_WIDTH, AnchorConfig
from .errors import ConfigError, ModguardError
from .imageops import decode_image
from .metrics import IMAGE_SUFFIXES, DatasetManifest, evaluate, normalize_path, significant
from .pipeline import STAGES, Pipeline, PipelineConfig, ScanError, iter_scan

log = logging.getLogger("modguard")

REPORT_SCHEMA = "modguard.scan/1"
METRICS_SCHEMA = "modguard.metrics/1"
CONFIG_ENV = "MODGUARD_CONFIG"
EXIT_OK, EXIT_FATAL, EXIT_IMAGE_ERRORS = 0, 1, 2

# reference on-device figures; printed, never asserted
REFERENCE_MS = {"detector": 60.0, "classifier": 25.0, "total": 85.0}


# -- reports ---------------------------------------------------------------

def verdict_record(path: str, result) -> dict:
    if isinstance(result, ScanError):
        return {"path": path, "error": result.to_dict()}
    return {"path": path, **result.to_dict(include_timings=True)}


def _percentile(values, q):
    return float(np.percentile(values, q)) if len(values) else None


def summarize(records: list) -> dict:
    ok = [r for r in records if "error" not in r]
    labels = {"SAFE": 0, "NSFW": 0}
    routes: dict = {}
    for r in ok:
        labels[r["label"]] += 1
        routes[r["route"]] = routes.get(r["route"], 0) + 1
    totals = [sum(r["timings_ms"].values()) for r in ok]
    return {
        "images": len(records),
        "errors": len(records) - len(ok),
        "labels": labels,
        "routes": dict(sorted(routes.items())),
        "latency_ms": {
            "mean": round(float(np.mean(totals)), 3) if totals else None,
            "p50": None if not totals else round(_percentile(totals, 50), 3),
            "p95": None if not totals else round(_percentile(totals, 95), 3),
        },
    }


@dataclass
class ScanReport:
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    tool: str = "modguard"
    version: str = __version__
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "tool": self.tool,
            "version": self.version,
            "config": self.config,
            "records": self.records,
            "summary": self.summary,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanReport":
        return cls(config=d["config"], records=list(d["records"]), summary=d.get("summary", {}),
                   tool=d.get("tool", "modguard"), version=d.get("version", ""),
                   schema=d.get("schema", REPORT_SCHEMA))

    @classmethod
    def loads(cls, text: str) -> "ScanReport":
        """Parse either the JSON document or the ``--stream`` JSON-lines form."""
        text = text.strip()
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError:
            pass
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        head, body = lines[0], lines[1:]
        summary = body.pop()["summary"] if body and "summary" in body[-1] else {}
        return cls(config=head["config"], records=body, summary=summary,
                   tool=head.get("tool", "modguard"), version=head.get("version", ""),
                   schema=head.get("schema", REPORT_SCHEMA))


# -- configuration ---------------------------------------------------------

_FLAG_FIELDS = ("person_score_min", "unsafe_part_min", "nsfw_score_min", "crop_margin",
                "many_people_cutoff", "detect_score_min", "nms_iou")


def load_config(args) -> PipelineConfig:
    """CLI flag > config file (``--config`` or $MODGUARD_CONFIG) > defaults."""
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    cfg = PipelineConfig.from_json(path) if path else PipelineConfig()
    if getattr(args, "anchors", None):
        try:
            cfg = cfg.updated(anchors=AnchorConfig.from_json(args.anchors))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read anchor config: {exc}") from exc
    overrides = {name: getattr(args, name, None) for name in _FLAG_FIELDS}
    if getattr(args, "detector_logits", False):
        overrides["detector_logits"] = True
    cfg = cfg.updated(**overrides)
    PipelineConfig.from_dict({**cfg.to_dict()})  # re-validate
    return cfg


def _parse_spec(spec: str) -> tuple[str, dict, str]:
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "recorded":
        if not rest:
            raise ConfigError("recorded backend needs a store path: recorded:DIR")
        return kind, {}, rest
    opts = {}
    for part in filter(None, rest.split(",")):
        key, eq, value = part.partition("=")
        if not eq:
            raise ConfigError(f"bad backend option {part!r} in {spec!r}")
        opts[key.strip()] = value.strip()
    if kind != "synthetic":
        raise ConfigError(f"unknown backend kind {kind!r} (expected synthetic or recorded)")
    return kind, opts, ""


def build_detector(spec: str, cfg: PipelineConfig, seed: int):
    kind, opts, path = _parse_spec(spec)
    if kind == "recorded":
        desc = BackendDescriptor(BackendKind.RECORDED, cfg.detector_input, OutputLayout.DETECTOR,
                                 (cfg.anchors.num_anchors, ROW_WIDTH))
        return RecordedBackend(path, desc)
    return SyntheticDetector(cfg.anchors, seed=int(opts.get("seed", seed)), input_size=cfg.detector_input)


def build_classifier(spec: str, cfg: PipelineConfig, seed: int):
    kind, opts, path = _parse_spec(spec)
    if kind == "recorded":
        shape = probe_store_shape(path)
        classes = shape[0] if shape and len(shape) == 1 else 81
        desc = BackendDescriptor(BackendKind.RECORDED, cfg.classifier_input, OutputLayout.CLASSIFIER,
                                 (classes,))
        return RecordedBackend(path, desc)
    try:
        return SyntheticClassifier(int(opts.get("classes", 81)), seed=int(opts.get("seed", seed)),
                                   input_size=cfg.classifier_input)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_backends(args, cfg: PipelineConfig):
    det = build_detector(args.detector, cfg, args.seed)
    clf = build_classifier(args.classifier, cfg, args.seed)
    if getattr(args, "record", None):
        store = Path(args.record)
        det = RecordingBackend(det, store / "detector")
        clf = RecordingBackend(clf, store / "classifier")
    return det, clf


def list_images(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _config_snapshot(cfg: PipelineConfig, args) -> dict:
    return {"pipeline": cfg.to_dict(), "detector": args.detector, "classifier": args.classifier,
            "seed": args.seed}


# -- commands --------------------------------------------------------------

def iter_records(root: Path, args, cfg: PipelineConfig):
    """Scan ``root`` lazily, yielding report records in sorted path order."""
    det, clf = build_backends(args, cfg)
    files = list_images(root)
    results = iter_scan(files, det, clf, cfg, parallelism=args.jobs)
    for f, r in zip(files, results):
        yield verdict_record(normalize_path(f.relative_to(root)), r)


def run_scan(root: Path, args, cfg: PipelineConfig) -> ScanReport:
    records = list(iter_records(root, args, cfg))
    return ScanReport(config=_config_snapshot(cfg, args), records=records, summary=summarize(records))


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")


def _stream_scan(root: Path, args, cfg: PipelineConfig) -> dict:
    fh = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        head = ScanReport(config=_config_snapshot(cfg, args))
        fh.write(json.dumps({"schema": head.schema, "tool": head.tool, "version": head.version,
                             "config": head.config}) + "\n")
        # keep only what the summary needs, not the records themselves
        slim = []
        for rec in iter_records(root, args, cfg):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            slim.append(rec if "error" in rec else
                        {"label": rec["label"], "route": rec["route"], "timings_ms": rec["timings_ms"]})
        summary = summarize(slim)
        fh.write(json.dumps({"summary": summary}) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return summary


def cmd_scan(args) -> int:
    cfg = load_config(args)
    root = Path(args.dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a readable directory")
    if args.stream:
        s = _stream_scan(root, args, cfg)
    else:
        report = run_scan(root, args, cfg)
        _write(report.dumps(), args.out)
        s = report.summary
    log.info("scanned %d images: %d NSFW, %d SAFE, %d errors", s["images"],
             s["labels"]["NSFW"], s["labels"]["SAFE"], s["errors"])
    return EXIT_IMAGE_ERRORS if s["errors"] else EXIT_OK


def cmd_eval(args) -> int:
    if args.manifest:
        manifest = DatasetManifest.load_jsonl(args.manifest)
    elif args.manifest_dir:
        manifest = DatasetManifest.from_folder(args.manifest_dir)
    else:
        raise ConfigError("eval needs --manifest or --manifest-dir")
    if args.report:
        report = ScanReport.loads(Path(args.report).read_text())
    elif args.dir:
        report = run_scan(Path(args.dir), args, load_config(args))
    else:
        raise ConfigError("eval needs --report or --dir")
    metrics = evaluate(report.records, manifest)
    doc = {"schema": METRICS_SCHEMA, "tool": "modguard", "version": __version__, **metrics.to_dict()}
    _write(json.dumps(doc, indent=2), args.out)
    c = metrics.counts
    log.info("TP %d TN %d FP %d FN %d | P %s R %s F1 %s FPR %s MAP %s", c.tp, c.tn, c.fp, c.fn,
             *(significant(v) for v in (metrics.precision, metrics.recall, metrics.f1,
                                        metrics.fpr, metrics.map)))
    return EXIT_OK


def dial_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha_nsfw", "beta_nsfw", "precision", "recall", "tp", "fp", "fn", "tn"])
    for r in rows:
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        w.writerow([f"{r.alpha:g}", f"{r.beta:g}", fmt(r.precision), fmt(r.recall),
                    r.counts.tp, r.counts.fp, r.counts.fn, r.counts.tn])
    return buf.getvalue()


def cmd_train_toy(args) -> int:
    x, y = make_dial_dataset(n=args.samples, seed=args.seed)
    if args.optimizer == "rmsprop":
        opt = OptimizerConfig.rmsprop(epochs=args.epochs, seed=args.seed)
    else:
        opt = OptimizerConfig(epochs=args.epochs, seed=args.seed)
    rows = precision_recall_dial((x, y), args.beta_nsfw, alpha_nsfw=args.alpha_nsfw, opt=opt)
    _write(dial_csv(rows), args.out)
    return EXIT_OK


def bench(pipeline: Pipeline, images: list, iters: int, warmup: int = 1) -> dict:
    """Time every image ``iters`` times; returns per-stage stats and the verdicts."""
    for img in images[:1] * warmup:
        pipeline.run(img)
    stage_ms = {s: [] for s in STAGES}
    e2e_ms = []
    verdicts = []
    for _ in range(iters):
        run = []
        for img in images:
            t = time.perf_counter()
            v = pipeline.run(img)
            e2e_ms.append((time.perf_counter() - t) * 1e3)
            for s in STAGES:
                stage_ms[s].append(v.timings[s])
            run.append(v)
        verdicts.append(run)
    stages = {}
    total_mean = float(np.mean(e2e_ms))
    for s in STAGES:
        mean = float(np.mean(stage_ms[s]))
        stages[s] = {"mean_ms": mean, "p95_ms": _percentile(stage_ms[s], 95),
                     "share": mean / total_mean if total_mean > 0 else 0.0}
    stage_sum = sum(v["mean_ms"] for v in stages.values())
    return {
        "iters": iters,
        "images": len(images),
        "stages": stages,
        "end_to_end": {"mean_ms": total_mean, "p95_ms": _percentile(e2e_ms, 95)},
        "stage_sum_ms": stage_sum,
        "stable_verdicts": all(run == verdicts[0] for run in verdicts),
        "verdicts": verdicts[0],
    }


def format_bench(result: dict) -> str:
    lines = [f"{'stage':<12}{'mean ms':>10}{'p95 ms':>10}{'share':>8}"]
    for s, v in result["stages"].items():
        lines.append(f"{s:<12}{v['mean_ms']:>10.3f}{v['p95_ms']:>10.3f}{v['share'] * 100:>7.1f}%")
    e = result["end_to_end"]
    lines.append(f"{'end-to-end':<12}{e['mean_ms']:>10.3f}{e['p95_ms']:>10.3f}")
    lines.append(f"stage sum {result['stage_sum_ms']:.3f} ms; verdicts stable across iterations: "
                 f"{result['stable_verdicts']}")
    lines.append("reference device figures (not reproduced here): detector ~{detector:.0f} ms, "
                 "classifier ~{classifier:.0f} ms, total ~{total:.0f} ms".format(**REFERENCE_MS))
    return "\n".join(lines)


def cmd_bench(args) -> int:
    cfg = load_config(args)
    paths = []
    for p in map(Path, args.images):
        paths.extend(list_images(p) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("bench needs at least one image")
    images = [decode_image(p.read_bytes()) for p in paths]
    det, clf = build_backends(args, cfg)
    result = bench(Pipeline(det, clf, cfg), images, args.iters, args.warmup)
    print(format_bench(result))
    if args.json:
        doc = {k: v for k, v in result.items() if k != "verdicts"}
        doc["reference_ms"] = REFERENCE_MS
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"pipeline config JSON (fallback: ${CONFIG_ENV})")
    p.add_argument("--anchors", help="anchor config JSON")
    p.add_argument("--detector", default="synthetic", help="synthetic[:seed=N] or recorded:DIR")
    p.add_argument("--classifier", default="synthetic",
                   help="synthetic[:seed=N,classes=81|2] or recorded:DIR")
    p.add_argument("--record", help="record every backend output into this store directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--person-score-min", dest="person_score_min", type=float)
    p.add_argument("--unsafe-part-min", dest="unsafe_part_min", type=float)
    p.add_argument("--nsfw-score-min", dest="nsfw_score_min", type=float)
    p.add_argument("--crop-margin", dest="crop_margin", type=float)
    p.add_argument("--many-people-cutoff", dest="many_people_cutoff", type=int)
    p.add_argument("--detect-score-min", dest="detect_score_min", type=float)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.add_argument("--detector-logits", action="store_true",
                   help="apply a sigmoid to detector class scores")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"modguard {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="classify every image under a directory")
    p.add_argument("dir")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--stream", action="store_true", help="emit JSON lines instead of one document")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("eval", help="score a scan report against a manifest")
    p.add_argument("--report", help="scan report (JSON or JSON lines)")
    p.add_argument("--dir", help="scan this directory instead of reading a report")
    p.add_argument("--manifest", help="JSON-lines manifest")
    p.add_argument("--manifest-dir", help="folder-per-class dataset root")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="metrics path (default stdout)")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="weighted-loss precision/recall sweep on toy data")
    p.add_argument("--beta-nsfw", type=float, nargs="+", default=[1.0, 2.0])
    p.add_argument("--alpha-nsfw", type=float, default=1.0)
    p.add_argument("--optimizer", choices=("sgd", "rmsprop"), default="sgd")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="per-stage latency of the pipeline")
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--json", help="also write the stats as JSON")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("modguard: --jobs must be >= 1", file=sys.stderr)
        return EXIT_FATAL
    try:
        return args.func(args)
    except (ModguardError, OSError, ValueError, KeyError) as exc:
        print(f"modguard: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
