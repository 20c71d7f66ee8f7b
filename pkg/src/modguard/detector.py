"""SSD-style detector post-processing.

Turns the raw detector head output, one row per anchor laid out as
``[dx, dy, dw, dh, s_F_BREAST, s_F_GENITALIA, s_M_GENITALIA, s_BUTTOCK,
s_PERSON]``, into body-part detections in normalized image coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, LengthMismatch, ShapeMismatch

MIN_EXTENT = 1e-6
# exp() argument cap so absurd offsets cannot overflow before clamping
_MAX_LOG_SCALE = 20.0


class BodyPartClass(str, Enum):
    F_BREAST = "F_BREAST"
    F_GENITALIA = "F_GENITALIA"
    M_GENITALIA = "M_GENITALIA"
    BUTTOCK = "BUTTOCK"
    PERSON = "PERSON"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @property
    def unsafe(self) -> bool:
        return self is not BodyPartClass.PERSON


CLASS_ORDER = tuple(BodyPartClass)
NUM_CLASSES = len(CLASS_ORDER)
ROW_WIDTH = 4 + NUM_CLASSES


@dataclass(frozen=True)
class BoundingBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for name in ("xmin", "ymin", "xmax", "ymax"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Detection:
    cls: BodyPartClass
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"cls": self.cls.value, "score": self.score, "box": list(self.box.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BodyPartClass(d["cls"]), float(d["score"]), BoundingBox(*d["box"]))


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid description.

    JSON schema::

        {"feature_map_sizes": [19, 10, ...],   # grid side per feature map
         "scales": [0.2, 0.35, ...],           # one anchor scale per map
         "aspect_ratios": [1.0, 2.0, 0.5],     # width / height
         "variances": [0.1, 0.1, 0.2, 0.2]}    # x, y, w, h decode divisors
    """

    feature_map_sizes: tuple[int, ...] = (19, 10, 5, 3, 2, 1)
    scales: tuple[float, ...] = (0.2, 0.35, 0.5, 0.65, 0.8, 0.95)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    variances: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "feature_map_sizes", tuple(int(g) for g in self.feature_map_sizes))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        object.__setattr__(self, "variances", tuple(float(v) for v in self.variances))

    def validate(self) -> None:
        if not self.feature_map_sizes or not self.aspect_ratios:
            raise ConfigError("anchor config needs at least one feature map and one aspect ratio")
        if len(self.scales) != len(self.feature_map_sizes):
            raise ConfigError("need exactly one scale per feature map")
        if len(self.variances) != 4:
            raise ConfigError("variances must have 4 entries")
        if any(g < 1 for g in self.feature_map_sizes):
            raise ConfigError("feature map sizes must be >= 1")
        if any(v <= 0 for v in (*self.scales, *self.aspect_ratios, *self.variances)):
            raise ConfigError("scales, aspect ratios and variances must be positive")

    @property
    def num_anchors(self) -> int:
        return sum(g * g for g in self.feature_map_sizes) * len(self.aspect_ratios)

    def to_dict(self) -> dict:
        return {
            "feature_map_sizes": list(self.feature_map_sizes),
            "scales": list(self.scales),
            "aspect_ratios": list(self.aspect_ratios),
            "variances": list(self.variances),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        try:
            cfg = cls(**{k: tuple(d[k]) for k in ("feature_map_sizes", "scales", "aspect_ratios", "variances") if k in d})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad anchor config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "AnchorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_anchors(cfg: AnchorConfig) -> np.ndarray:
    """Anchor boxes as an ``(N, 4)`` array of clamped ``[xmin, ymin, xmax, ymax]``.

    Ordering is feature map, then row, then column, then aspect ratio.
    """
    cfg.validate()
    out = []
    for g, scale in zip(cfg.feature_map_sizes, cfg.scales):
        centers = (np.arange(g) + 0.5) / g
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        for_cells = []
        for r in cfg.aspect_ratios:
            w = scale * math.sqrt(r)
            h = scale / math.sqrt(r)
            for_cells.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1))
        # (g, g, ratios, 4) keeps ratio as the fastest-varying index
        out.append(np.stack(for_cells, axis=2).reshape(-1, 4))
    return np.clip(np.concatenate(out, axis=0), 0.0, 1.0)


def anchor_boxes(cfg: AnchorConfig) -> list[BoundingBox]:
    return [BoundingBox(*row) for row in generate_anchors(cfg).tolist()]


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        arr = np.array([b.as_tuple() if isinstance(b, BoundingBox) else tuple(b) for b in boxes],
                       dtype=np.float64).reshape(-1, 4)
    return arr


def decode_boxes(offsets, anchors, variances=(0.1, 0.1, 0.2, 0.2)) -> np.ndarray:
    """Apply center-size offsets to anchors; returns clamped ``(N, 4)`` corners.

    Zero offsets reproduce the anchors bit-for-bit: the decode is written as
    an additive update to the anchor corners.
    """
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = _as_box_array(anchors)
    if len(offsets) != len(anchors):
        raise LengthMismatch(f"{len(offsets)} offsets for {len(anchors)} anchors")
    vx, vy, vw, vh = variances
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    shift_x = offsets[:, 0] * vx * aw
    shift_y = offsets[:, 1] * vy * ah
    grow_w = aw * np.exp(np.minimum(offsets[:, 2] * vw, _MAX_LOG_SCALE)) - aw
    grow_h = ah * np.exp(np.minimum(offsets[:, 3] * vh, _MAX_LOG_SCALE)) - ah
    out = np.stack([
        anchors[:, 0] + shift_x - grow_w / 2,
        anchors[:, 1] + shift_y - grow_h / 2,
        anchors[:, 2] + shift_x + grow_w / 2,
        anchors[:, 3] + shift_y + grow_h / 2,
    ], axis=1)
    out = np.clip(out, 0.0, 1.0)
    for lo, hi in ((0, 2), (1, 3)):
        thin = out[:, hi] - out[:, lo] < MIN_EXTENT
        at_top = out[:, hi] >= 1.0 - MIN_EXTENT
        out[:, lo] = np.where(thin & at_top, 1.0 - MIN_EXTENT, out[:, lo])
        out[:, hi] = np.where(thin & ~at_top, out[:, lo] + MIN_EXTENT, out[:, hi])
    return out


def encode_boxes(boxes, anchors, variances=(0.1, 0.1, 0.2, 0.2)) -> np.ndarray:
    """Inverse of ``decode_boxes`` for boxes inside [0, 1]."""
    boxes = _as_box_array(boxes)
    anchors = _as_box_array(anchors)
    if len(boxes) != len(anchors):
        raise LengthMismatch(f"{len(boxes)} boxes for {len(anchors)} anchors")
    vx, vy, vw, vh = variances
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = (boxes[:, 0] + boxes[:, 2]) / 2
    bcy = (boxes[:, 1] + boxes[:, 3]) / 2
    return np.stack([
        (bcx - acx) / (aw * vx),
        (bcy - acy) / (ah * vy),
        np.log(bw / aw) / vw,
        np.log(bh / ah) / vh,
    ], axis=1)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.as_tuple() if isinstance(a, BoundingBox) else a
    bx0, by0, bx1, by1 = b.as_tuple() if isinstance(b, BoundingBox) else b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(1.0, inter / union))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = _as_box_array(boxes_a)[:, None, :]
    b = _as_box_array(boxes_b)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def nms_indices(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in keep order."""
    boxes = _as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(i))
    return keep


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression for detections of a single class.

    Candidates are visited by descending score (ties by input position);
    one is kept iff its IoU with every already-kept box is at most
    ``iou_threshold``.
    """
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets], iou_threshold)
    return [dets[i] for i in keep]


def detect(raw, cfg: AnchorConfig, score_threshold: float = 0.5,
           iou_threshold: float = 0.5, apply_sigmoid: bool = False,
           anchors: np.ndarray | None = None) -> list[Detection]:
    """Decode, threshold and suppress a raw ``(num_anchors, 9)`` head output.

    Each anchor votes for its highest-scoring class only, so the result never
    has more entries than there are anchors. NMS runs per class and the
    merged list is sorted by descending score.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = cfg.num_anchors
    if raw.shape != (n, ROW_WIDTH):
        raise ShapeMismatch(f"expected raw output of shape {(n, ROW_WIDTH)}, got {raw.shape}")
    if anchors is None:
        anchors = generate_anchors(cfg)
    scores = raw[:, 4:]
    if apply_sigmoid:
        scores = expit(scores)
    elif scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValueError("class scores outside [0, 1]; pass apply_sigmoid=True for logits")
    best = np.argmax(scores, axis=1)
    best_score = scores[np.arange(n), best]
    candidates = np.flatnonzero(best_score >= score_threshold)
    if candidates.size == 0:
        return []
    boxes = decode_boxes(raw[candidates, :4], anchors[candidates], cfg.variances)

    merged: list[tuple[float, int, int]] = []  # (score, class index, row in boxes)
    for c in range(NUM_CLASSES):
        rows = np.flatnonzero(best[candidates] == c)
        if rows.size == 0:
            continue
        kept = nms_indices(boxes[rows], best_score[candidates[rows]], iou_threshold)
        merged.extend((float(best_score[candidates[rows[k]]]), c, int(rows[k])) for k in kept)
    merged.sort(key=lambda t: -t[0])
    return [
        Detection(CLASS_ORDER[c], s, BoundingBox(*boxes[r].tolist()))
        for s, c, r in merged
    ]


def count_distinct_people(dets: Sequence[Detection]) -> int:
    """Number of PERSON boxes; callers pass post-NMS detections."""
    return sum(1 for d in dets if d.cls is BodyPartClass.PERSON)
