"""Dataset manifests and the evaluation metric suite.

NSFW is the positive class throughout. Ratios whose denominator is zero
raise ``UndefinedMetric`` instead of silently reporting 0.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable, Mapping, Sequence

from .errors import EmptyManifest, NoPositives, UndefinedMetric, UnknownPath
from .labels import Label

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

DEFAULT_FOLDER_LABELS = {
    "safe": Label.SAFE, "sfw": Label.SAFE, "nonporn": Label.SAFE, "non_porn": Label.SAFE,
    "neutral": Label.SAFE, "negative": Label.SAFE,
    "nsfw": Label.NSFW, "unsafe": Label.NSFW, "porn": Label.NSFW, "nude": Label.NSFW,
    "seminude": Label.NSFW, "positive": Label.NSFW,
}


def normalize_path(path) -> str:
    return str(PurePosixPath(str(path).replace("\\", "/")))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    boxes: tuple = ()  # ((class name, (xmin, ymin, xmax, ymax)), ...)

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label.value}
        if self.boxes:
            d["boxes"] = [{"cls": c, "box": list(b)} for c, b in self.boxes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        boxes = []
        for item in d.get("boxes") or ():
            b = tuple(float(v) for v in item["box"])
            if len(b) != 4 or not (0 <= b[0] < b[2] <= 1 and 0 <= b[1] < b[3] <= 1):
                raise ValueError(f"invalid box {item['box']} for {d['path']}")
            boxes.append((str(item["cls"]), b))
        return cls(normalize_path(d["path"]), Label(str(d["label"]).upper()), tuple(boxes))


@dataclass
class DatasetManifest:
    entries: list
    name: str = "manifest"

    def __post_init__(self):
        self._index = {}
        for e in self.entries:
            if e.path in self._index:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            self._index[e.path] = e

    def __len__(self):
        return len(self.entries)

    def __contains__(self, path):
        return normalize_path(path) in self._index

    def label_of(self, path) -> Label:
        try:
            return self._index[normalize_path(path)].label
        except KeyError:
            raise UnknownPath(f"{path!r} is not in manifest {self.name!r}") from None

    def count(self, label: Label) -> int:
        return sum(1 for e in self.entries if e.label is label)

    @classmethod
    def load_jsonl(cls, path, name: str | None = None) -> "DatasetManifest":
        entries = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                entries.append(ManifestEntry.from_dict(json.loads(line)))
        return cls(entries, name or Path(path).stem)

    def save_jsonl(self, path) -> None:
        lines = [json.dumps(e.to_dict()) for e in self.entries]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def from_folder(cls, root, class_map: Mapping[str, Label] | None = None,
                    name: str | None = None) -> "DatasetManifest":
        """Folder-per-class layout: ``root/<class dir>/**/<image>``.

        Directory names are looked up case-insensitively in ``class_map``;
        unknown directories are skipped. Paths are stored relative to ``root``.
        """
        root = Path(root)
        mapping = {k.lower(): Label(v) for k, v in (class_map or DEFAULT_FOLDER_LABELS).items()}
        entries = []
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            label = mapping.get(sub.name.lower())
            if label is None:
                continue
            for f in sorted(sub.rglob("*")):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append(ManifestEntry(normalize_path(f.relative_to(root)), label))
        return cls(entries, name or root.name)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    def add(self, truth: Label, predicted: Label) -> "ConfusionCounts":
        t, p = truth is Label.NSFW, predicted is Label.NSFW
        return self + ConfusionCounts(int(t and p), int(not t and not p),
                                      int(p and not t), int(t and not p))

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def merge(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


def confusion(predictions: Iterable, manifest: DatasetManifest) -> ConfusionCounts:
    """Tally ``(path, label)`` predictions against the manifest ground truth."""
    tp = tn = fp = fn = 0
    for path, predicted in predictions:
        truth = manifest.label_of(path)
        p = Label(predicted) is Label.NSFW
        t = truth is Label.NSFW
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        raise UndefinedMetric(f"{what} is undefined: zero denominator")
    return num / den


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, "precision")


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "recall")


def f1(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall."""
    p, r = precision(c), recall(c)
    if p + r == 0:
        raise UndefinedMetric("f1 is undefined when precision and recall are both 0")
    return 2 * p * r / (p + r)


def fpr(c: ConfusionCounts) -> float:
    """False-positive rate over all negatives."""
    return _ratio(c.fp, c.fp + c.tn, "false positive rate")


def average_precision(scores: Sequence) -> float:
    """All-points AP of a ranked list of ``(confidence, truth)`` pairs.

    Items are ranked by descending confidence with ties kept in input order;
    AP is the mean of precision@k over the ranks k holding a positive.
    """
    items = [(float(c), bool(t)) for c, t in scores]
    n_pos = sum(t for _, t in items)
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = sorted(range(len(items)), key=lambda i: -items[i][0])
    terms = []
    for rank, i in enumerate(order, start=1):
        if items[i][1]:
            terms.append((len(terms) + 1) / rank)
    # fsum is order independent, so equal rankings give bit-equal APs
    return math.fsum(terms) / n_pos


def mean_average_precision(per_class_scores: Mapping[str, Sequence]) -> float:
    """Unweighted mean of per-class AP over classes that have positives."""
    aps = []
    for ranking in per_class_scores.values():
        try:
            aps.append(average_precision(ranking))
        except NoPositives:
            continue
    if not aps:
        raise NoPositives("no class has a positive example")
    return sum(aps) / len(aps)


def significant(x: float | None, digits: int = 5) -> float | None:
    if x is None or x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


@dataclass(frozen=True)
class Prediction:
    path: str
    label: Label
    confidence: float | None = None
    route: str | None = None


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    precision: float | None
    recall: float | None
    f1: float | None
    fpr: float | None
    ap_per_class: dict = field(default_factory=dict)
    map: float | None = None
    per_route: dict = field(default_factory=dict)
    skipped: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.to_dict(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fpr": self.fpr,
            "ap_per_class": dict(self.ap_per_class),
            "map": self.map,
            "per_route": {k: v.to_dict() for k, v in self.per_route.items()},
            "skipped": self.skipped,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            counts=ConfusionCounts(**d["counts"]),
            precision=d["precision"], recall=d["recall"], f1=d["f1"], fpr=d["fpr"],
            ap_per_class=dict(d.get("ap_per_class", {})), map=d.get("map"),
            per_route={k: ConfusionCounts(**v) for k, v in d.get("per_route", {}).items()},
            skipped=int(d.get("skipped", 0)), metadata=dict(d.get("metadata", {})),
        )


def _as_prediction(item) -> Prediction | None:
    if isinstance(item, Prediction):
        return item
    if isinstance(item, Mapping):
        if item.get("error") is not None or item.get("label") is None:
            return None
        return Prediction(normalize_path(item["path"]), Label(item["label"]),
                          item.get("confidence"), item.get("route"))
    path, verdict = item
    if verdict is None or isinstance(verdict, Exception) or not hasattr(verdict, "label"):
        return None
    route = getattr(verdict, "route", None)
    return Prediction(normalize_path(path), Label(verdict.label),
                      getattr(verdict, "confidence", None),
                      getattr(route, "value", route))


def _optional(metric, counts):
    try:
        return metric(counts)
    except UndefinedMetric:
        return None


def evaluate(verdicts: Iterable, manifest: DatasetManifest) -> MetricsReport:
    """Score predictions against a manifest.

    ``verdicts`` may hold ``Prediction`` objects, ``(path, verdict)`` pairs or
    scan-report record dicts; error records are skipped and counted. When
    every prediction carries a confidence the NSFW-class AP is reported and,
    being the only class, is also the MAP.
    """
    if len(manifest) == 0:
        raise EmptyManifest(f"manifest {manifest.name!r} has no entries")
    preds, skipped = [], 0
    for item in verdicts:
        p = _as_prediction(item)
        if p is None:
            skipped += 1
        else:
            preds.append(p)
    if not preds:
        raise EmptyManifest("no predictions to evaluate")

    counts = confusion(((p.path, p.label) for p in preds), manifest)
    per_route: dict = OrderedDict()
    for p in preds:
        key = p.route or "UNKNOWN"
        per_route[key] = per_route.get(key, ConfusionCounts()).add(manifest.label_of(p.path), p.label)

    ap_per_class, map_value = {}, None
    if all(p.confidence is not None for p in preds):
        ranking = [(p.confidence, manifest.label_of(p.path) is Label.NSFW) for p in preds]
        try:
            ap_per_class[Label.NSFW.value] = average_precision(ranking)
            map_value = mean_average_precision({Label.NSFW.value: ranking})
        except NoPositives:
            pass

    return MetricsReport(
        counts=counts,
        precision=_optional(precision, counts),
        recall=_optional(recall, counts),
        f1=_optional(f1, counts),
        fpr=_optional(fpr, counts),
        ap_per_class=ap_per_class,
        map=map_value,
        per_route=dict(per_route),
        skipped=skipped,
        metadata={
            "manifest": manifest.name,
            "positive_class": Label.NSFW.value,
            "ap_definition": "all-points, ties broken by input order",
            "map_definition": "mean of per-class AP; binary data has the single NSFW class",
        },
    )
