"""Detector -> person-crop classifier ensemble.

The image is letterboxed and run through the body-part detector. A
confident unsafe part is enough for an NSFW verdict. The classifier then
looks at each detected person (crop with margin) or, when there are no
people or more than ``many_people_cutoff`` of them, at the whole image.
The final label is NSFW if the detector fired or the highest classifier
NSFW score reaches ``nsfw_score_min``; the confidence is the larger of the
two pieces of evidence. The classifier cannot veto a detector hit.
"""

from __future__ import annotations

import json
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .backends import invoke
from .classifier import sigmoid_scores, softmax_scores
from .detector import AnchorConfig, BoundingBox, Detection, count_distinct_people, detect, generate_anchors
from .errors import BackendError, ConfigError, EmptyCrop, ModguardError
from .imageops import ImageTensor, crop, decode_image, resize_antialias, resize_letterbox
from .labels import BINARY_NSFW_INDEX, MULTI_LABEL_NSFW_INDEX, Label

STAGES = ("preprocess", "detector", "crops", "classifier", "post")


class Route(str, Enum):
    DETECTOR_HIT = "DETECTOR_HIT"
    CROPS = "CROPS"
    FULL_IMAGE_MANY_PEOPLE = "FULL_IMAGE_MANY_PEOPLE"
    FULL_IMAGE_NO_PERSON = "FULL_IMAGE_NO_PERSON"


@dataclass(frozen=True)
class PipelineConfig:
    detector_input: int = 300
    classifier_input: int = 224
    person_score_min: float = 0.5
    unsafe_part_min: float = 0.5
    nsfw_score_min: float = 0.5
    crop_margin: float = 0.1
    many_people_cutoff: int = 2
    detect_score_min: float = 0.5
    nms_iou: float = 0.5
    detector_logits: bool = False
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if isinstance(self.anchors, dict):
            object.__setattr__(self, "anchors", AnchorConfig.from_dict(self.anchors))
        for name in ("person_score_min", "unsafe_part_min", "nsfw_score_min",
                     "detect_score_min", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} must lie in [0, 1]")
        if self.detector_input < 1 or self.classifier_input < 1:
            raise ConfigError("input sizes must be positive")
        if self.crop_margin < 0:
            raise ConfigError("crop_margin must be non-negative")
        if self.many_people_cutoff < 1:
            raise ConfigError("many_people_cutoff must be >= 1")
        self.anchors.validate()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["anchors"] = self.anchors.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def updated(self, **overrides) -> "PipelineConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        try:
            return replace(self, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class EnsembleVerdict:
    label: Label
    confidence: float
    route: Route
    classifier_route: Route
    people: int
    detections: tuple = ()
    crop_scores: tuple = ()
    classifier_calls: int = 0
    timings: dict = field(default_factory=dict, compare=False)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "label": self.label.value,
            "confidence": self.confidence,
            "route": self.route.value,
            "classifier_route": self.classifier_route.value,
            "people": self.people,
            "detections": [det.to_dict() for det in self.detections],
            "crop_scores": list(self.crop_scores),
            "classifier_calls": self.classifier_calls,
        }
        if include_timings:
            d["timings_ms"] = {k: round(v, 3) for k, v in self.timings.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleVerdict":
        return cls(
            label=Label(d["label"]), confidence=float(d["confidence"]), route=Route(d["route"]),
            classifier_route=Route(d["classifier_route"]), people=int(d["people"]),
            detections=tuple(Detection.from_dict(x) for x in d["detections"]),
            crop_scores=tuple(float(s) for s in d["crop_scores"]),
            classifier_calls=int(d.get("classifier_calls", 0)),
            timings=dict(d.get("timings_ms", {})),
        )


def _scores(logits: np.ndarray):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 2:
        return softmax_scores(logits, BINARY_NSFW_INDEX)
    return sigmoid_scores(logits, MULTI_LABEL_NSFW_INDEX if logits.size == 81 else None)


class Pipeline:
    """Immutable detector + classifier ensemble; safe to share across threads
    provided the backends are."""

    def __init__(self, det, clf, cfg: PipelineConfig = PipelineConfig()):
        if det.descriptor.input_size != cfg.detector_input:
            raise ConfigError(f"detector expects {det.descriptor.input_size}px input, "
                              f"config says {cfg.detector_input}")
        if clf.descriptor.input_size != cfg.classifier_input:
            raise ConfigError(f"classifier expects {clf.descriptor.input_size}px input, "
                              f"config says {cfg.classifier_input}")
        if det.descriptor.output_shape[0] != cfg.anchors.num_anchors:
            raise ConfigError("detector output rows do not match the anchor config")
        self.det = det
        self.clf = clf
        self.cfg = cfg
        self._anchors = generate_anchors(cfg.anchors)
        self._anchors.flags.writeable = False

    def _classify(self, patch: ImageTensor) -> float:
        try:
            logits = invoke(self.clf, patch)
        except Exception as exc:
            raise BackendError("classifier", exc) from exc
        return _scores(logits).nsfw

    def run(self, img: ImageTensor) -> EnsembleVerdict:
        cfg = self.cfg
        timings = dict.fromkeys(STAGES, 0.0)
        clock = time.perf_counter

        t0 = clock()
        boxed, tf = resize_letterbox(img, cfg.detector_input)
        t1 = clock()
        timings["preprocess"] = (t1 - t0) * 1e3

        try:
            raw = invoke(self.det, boxed)
        except Exception as exc:
            raise BackendError("detector", exc) from exc
        found = detect(raw, cfg.anchors, cfg.detect_score_min, cfg.nms_iou,
                       apply_sigmoid=cfg.detector_logits, anchors=self._anchors)
        dets = []
        for d in found:
            x0, y0, x1, y1 = (float(v) for v in tf.to_source(*d.box.as_tuple()))
            if x1 > x0 and y1 > y0:  # boxes lying wholly in the padding vanish
                dets.append(Detection(d.cls, d.score, BoundingBox(x0, y0, x1, y1)))
        t2 = clock()
        timings["detector"] = (t2 - t1) * 1e3

        unsafe = [d.score for d in dets if d.cls.unsafe and d.score >= cfg.unsafe_part_min]
        detector_evidence = max(unsafe, default=0.0)
        persons = [d for d in dets if not d.cls.unsafe and d.score >= cfg.person_score_min]
        people = count_distinct_people(persons)

        crop_scores = []
        crops_time = clf_time = 0.0
        if people == 0 or people > cfg.many_people_cutoff:
            clf_route = Route.FULL_IMAGE_NO_PERSON if people == 0 else Route.FULL_IMAGE_MANY_PEOPLE
            inputs = [img]
            margin = None
        else:
            clf_route = Route.CROPS
            inputs = [d.box for d in persons]
            margin = cfg.crop_margin
        for item in inputs:
            t = clock()
            try:
                source = item if margin is None else crop(img, item, margin)
            except EmptyCrop:
                continue
            patch = resize_antialias(source, cfg.classifier_input)
            t_mid = clock()
            crops_time += t_mid - t
            crop_scores.append(self._classify(patch))
            clf_time += clock() - t_mid
        timings["crops"] = crops_time * 1e3
        timings["classifier"] = clf_time * 1e3

        classifier_evidence = max(crop_scores, default=0.0)
        hit = bool(unsafe)
        nsfw = hit or classifier_evidence >= cfg.nsfw_score_min
        verdict = EnsembleVerdict(
            label=Label.NSFW if nsfw else Label.SAFE,
            confidence=float(max(detector_evidence, classifier_evidence)),
            route=Route.DETECTOR_HIT if hit else clf_route,
            classifier_route=clf_route,
            people=people,
            detections=tuple(dets),
            crop_scores=tuple(float(s) for s in crop_scores),
            classifier_calls=len(crop_scores),
            timings=timings,
        )
        # whatever is left after the detector stage is fusion and bookkeeping
        timings["post"] = max(0.0, (clock() - t2 - crops_time - clf_time) * 1e3)
        return verdict


def run_pipeline(img: ImageTensor, det, clf, cfg: PipelineConfig = PipelineConfig()) -> EnsembleVerdict:
    return Pipeline(det, clf, cfg).run(img)


@dataclass(frozen=True)
class ScanError:
    """Per-image failure captured in place of a verdict."""

    index: int
    source: str
    stage: str
    error_type: str
    message: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "type": self.error_type, "message": self.message}


def _describe(item) -> str:
    if isinstance(item, (str, os.PathLike)):
        return str(item)
    if isinstance(item, (bytes, bytearray)):
        return f"<{len(item)} bytes>"
    return repr(item)


def _load(item) -> ImageTensor:
    if isinstance(item, ImageTensor):
        return item
    if isinstance(item, (bytes, bytearray)):
        return decode_image(bytes(item))
    return decode_image(Path(item).read_bytes())


def _scan_one(pipeline: Pipeline, index: int, item):
    try:
        img = _load(item)
    except (ModguardError, OSError) as exc:
        return ScanError(index, _describe(item), "decode", type(exc).__name__, str(exc))
    try:
        return pipeline.run(img)
    except BackendError as exc:
        return ScanError(index, _describe(item), exc.stage, type(exc.cause).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - one bad image must not abort the batch
        return ScanError(index, _describe(item), "pipeline", type(exc).__name__, str(exc))


def iter_scan(images: Iterable, det, clf, cfg: PipelineConfig = PipelineConfig(),
              parallelism: int = 1) -> Iterator:
    """Yield one result per image in input order as soon as it is ready.

    At most ``4 * parallelism`` images are in flight, so long inputs are
    never fully buffered.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    pipeline = Pipeline(det, clf, cfg)
    if parallelism == 1:
        for i, it in enumerate(images):
            yield _scan_one(pipeline, i, it)
        return
    window = 4 * parallelism
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        pending: deque = deque()
        for i, it in enumerate(images):
            pending.append(pool.submit(_scan_one, pipeline, i, it))
            if len(pending) >= window:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def scan_batch(images: Sequence, det, clf, cfg: PipelineConfig = PipelineConfig(),
               parallelism: int = 1) -> list:
    """Run the pipeline over many images, preserving input order.

    Items may be ``ImageTensor`` objects, encoded bytes or file paths. Each
    result is an ``EnsembleVerdict`` or a ``ScanError`` at the same index.
    """
    return list(iter_scan(images, det, clf, cfg, parallelism))
