"""Model-invocation contract and the two hermetic backend implementations.

A backend is any object with a ``descriptor`` attribute and an
``invoke(img) -> np.ndarray`` method. Detector backends return a
``(num_anchors, 9)`` float32 array (4 box offsets + 5 activated class
scores per anchor); classifier backends return a float32 logit vector of
length 81 (multi-label) or 2 (binary).

Recorded tensor store
---------------------
One file per input digest, named ``<sha256 hex>.mgt``, inside the store
directory. Byte layout (all integers little-endian)::

    offset  size      field
    0       4         magic b"MGT1"
    4       1         layout tag: 1 = DETECTOR, 2 = CLASSIFIER
    5       1         ndim (1 or 2)
    6       2         reserved, zero
    8       4 * ndim  dims, uint32
    ...     4 * prod  payload, float32, row-major

The digest is SHA-256 over the backend input's canonical bytes
(``ImageTensor.tobytes()``: float32 little-endian intensities) prefixed by
its ``height, width, channels`` as three uint32 LE values, so re-encoding
the source file does not break replay.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import (
    CLASS_ORDER, ROW_WIDTH, AnchorConfig, BodyPartClass, encode_boxes, generate_anchors, iou_matrix,
)
from .errors import ConflictError, MissingRecording, NoAnchorNear, ShapeMismatch
from .imageops import CLASSIFIER_SIZE, DETECTOR_SIZE, ImageTensor
from .labels import MULTI_LABEL_NSFW_INDEX

MAGIC = b"MGT1"
STORE_SUFFIX = ".mgt"
_HEADER = struct.Struct("<4sBBH")


class BackendKind(str, Enum):
    SYNTHETIC = "SYNTHETIC"
    RECORDED = "RECORDED"


class OutputLayout(str, Enum):
    DETECTOR = "DETECTOR"
    CLASSIFIER = "CLASSIFIER"


_LAYOUT_TAGS = {OutputLayout.DETECTOR: 1, OutputLayout.CLASSIFIER: 2}


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    input_size: int
    output_layout: OutputLayout
    output_shape: tuple

    def __post_init__(self):
        shape = tuple(int(d) for d in self.output_shape)
        object.__setattr__(self, "output_shape", shape)
        if self.output_layout is OutputLayout.DETECTOR:
            if len(shape) != 2 or shape[1] != ROW_WIDTH:
                raise ValueError(f"detector layout needs (anchors, {ROW_WIDTH}), got {shape}")
        elif len(shape) != 1 or shape[0] not in (2, 81):
            raise ValueError(f"classifier layout needs 81 or 2 outputs, got {shape}")


def image_digest(img: ImageTensor) -> str:
    h = hashlib.sha256(struct.pack("<III", img.height, img.width, 3))
    h.update(img.tobytes())
    return h.hexdigest()


def invoke(backend, img: ImageTensor) -> np.ndarray:
    """Run a backend with input/output shape checks against its descriptor."""
    desc = backend.descriptor
    if (img.height, img.width) != (desc.input_size, desc.input_size):
        raise ShapeMismatch(
            f"backend expects {desc.input_size}x{desc.input_size} input, got {img.height}x{img.width}")
    out = np.asarray(backend.invoke(img))
    if out.shape != desc.output_shape:
        raise ShapeMismatch(f"backend produced {out.shape}, descriptor says {desc.output_shape}")
    return out


# -- tensor store ----------------------------------------------------------

def pack_tensor(tensor: np.ndarray, layout: OutputLayout) -> bytes:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    head = _HEADER.pack(MAGIC, _LAYOUT_TAGS[OutputLayout(layout)], arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.tobytes()


def unpack_tensor(payload: bytes) -> tuple[np.ndarray, OutputLayout]:
    magic, tag, ndim, _ = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise ValueError("not a modguard tensor file")
    layout = {v: k for k, v in _LAYOUT_TAGS.items()}[tag]
    dims = struct.unpack_from(f"<{ndim}I", payload, _HEADER.size)
    start = _HEADER.size + 4 * ndim
    expected = start + 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise ValueError(f"tensor file truncated: {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4", offset=start).reshape(dims).astype(np.float32)
    return arr, layout


_store_lock = threading.Lock()


def record(output: np.ndarray, digest: str, store, layout: OutputLayout) -> Path:
    """Append one tensor to the store.

    Re-recording an identical payload is a no-op; a different payload for a
    known digest raises ``ConflictError``. Files are written atomically.
    """
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    target = store / f"{digest}{STORE_SUFFIX}"
    payload = pack_tensor(output, layout)
    with _store_lock:
        if target.exists():
            if target.read_bytes() != payload:
                raise ConflictError(f"digest {digest} already recorded with a different payload")
            return target
        fd, tmp = tempfile.mkstemp(dir=store, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            try:
                os.link(tmp, target)
            except FileExistsError:
                if target.read_bytes() != payload:
                    raise ConflictError(f"digest {digest} already recorded with a different payload")
        finally:
            os.unlink(tmp)
    return target


def probe_store_shape(store) -> tuple | None:
    """Tensor shape of any one recording in ``store``, or None if it is empty."""
    for path in sorted(Path(store).glob(f"*{STORE_SUFFIX}")):
        payload = path.read_bytes()
        _, _, ndim, _ = _HEADER.unpack_from(payload, 0)
        return struct.unpack_from(f"<{ndim}I", payload, _HEADER.size)
    return None


class RecordedBackend:
    """Replays tensors captured by ``record`` keyed by input digest."""

    def __init__(self, store, descriptor: BackendDescriptor):
        self.store = Path(store)
        self.descriptor = BackendDescriptor(BackendKind.RECORDED, descriptor.input_size,
                                            descriptor.output_layout, descriptor.output_shape)

    def invoke(self, img: ImageTensor) -> np.ndarray:
        digest = image_digest(img)
        path = self.store / f"{digest}{STORE_SUFFIX}"
        try:
            payload = path.read_bytes()
        except FileNotFoundError:
            raise MissingRecording(f"no recording for digest {digest} in {self.store}") from None
        arr, layout = unpack_tensor(payload)
        if layout is not self.descriptor.output_layout:
            raise ShapeMismatch(f"recording {digest} has layout {layout.value}")
        return arr


class RecordingBackend:
    """Wraps a backend and records every output it produces."""

    def __init__(self, inner, store):
        self.inner = inner
        self.store = Path(store)
        self.descriptor = inner.descriptor

    def invoke(self, img: ImageTensor) -> np.ndarray:
        out = np.asarray(self.inner.invoke(img), dtype=np.float32)
        record(out, image_digest(img), self.store, self.descriptor.output_layout)
        return out


# -- synthetic backends ----------------------------------------------------

def synthesize_detector_output(script: Sequence, cfg: AnchorConfig,
                               anchors: np.ndarray | None = None) -> np.ndarray:
    """Build a raw detector tensor that decodes to the scripted detections.

    ``script`` holds ``(class, score, box)`` triples with boxes in normalized
    model-input coordinates. Each entry is encoded on the free anchor that
    overlaps it most; every other anchor gets all-zero scores.
    """
    if anchors is None:
        anchors = generate_anchors(cfg)
    raw = np.zeros((len(anchors), ROW_WIDTH), dtype=np.float32)
    used = np.zeros(len(anchors), dtype=bool)
    for cls, score, box in script:
        cls = BodyPartClass(cls)
        coords = np.array(box.as_tuple() if hasattr(box, "as_tuple") else tuple(box), dtype=np.float64)
        if not (0 <= coords[0] < coords[2] <= 1 and 0 <= coords[1] < coords[3] <= 1):
            raise ValueError(f"invalid scripted box {tuple(coords)}")
        overlaps = iou_matrix(coords[None, :], anchors)[0]
        overlaps[used] = -1.0
        k = int(np.argmax(overlaps))
        if overlaps[k] <= 0.0:
            raise NoAnchorNear(f"no free anchor overlaps scripted box {tuple(coords)}")
        used[k] = True
        raw[k, :4] = encode_boxes(coords[None, :], anchors[k:k + 1], cfg.variances)[0]
        raw[k, 4 + CLASS_ORDER.index(cls)] = score
    return raw


def _seeded_rng(seed: int, img: ImageTensor) -> np.random.Generator:
    digest = bytes.fromhex(image_digest(img))
    return np.random.default_rng([seed, *struct.unpack("<4I", digest[:16])])


class SyntheticDetector:
    """Deterministic stand-in for the body-part detector.

    With a ``script`` (a list of ``(class, score, box)`` or a callable taking
    the input image and returning one) the output encodes exactly those
    detections. Without one, offsets and scores are pseudo-random but fixed
    by ``seed`` and the image content.
    """

    def __init__(self, cfg: AnchorConfig = AnchorConfig(), seed: int = 0,
                 script: Sequence | Callable | None = None, input_size: int = DETECTOR_SIZE):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.script = script
        self._anchors = generate_anchors(cfg)
        self.descriptor = BackendDescriptor(BackendKind.SYNTHETIC, input_size,
                                            OutputLayout.DETECTOR, (cfg.num_anchors, ROW_WIDTH))

    def invoke(self, img: ImageTensor) -> np.ndarray:
        if self.script is not None:
            script = self.script(img) if callable(self.script) else self.script
            return synthesize_detector_output(script, self.cfg, self._anchors)
        rng = _seeded_rng(self.seed, img)
        n = self.cfg.num_anchors
        raw = np.empty((n, ROW_WIDTH), dtype=np.float32)
        raw[:, :4] = rng.normal(0.0, 0.5, size=(n, 4))
        raw[:, 4:] = rng.uniform(0.0, 0.3, size=(n, len(CLASS_ORDER)))
        # a few confident anchors, PERSON-heavy, so routes vary across images
        hits = rng.poisson(1.5)
        rows = rng.choice(n, size=min(hits, n), replace=False)
        classes = rng.choice(len(CLASS_ORDER), size=len(rows), p=[0.04, 0.02, 0.02, 0.04, 0.88])
        raw[rows, 4 + classes] = rng.uniform(0.3, 1.0, size=len(rows))
        return raw


def _logit(p: float) -> float:
    p = min(max(p, 1e-7), 1 - 1e-7)
    return float(np.log(p / (1 - p)))


class SyntheticClassifier:
    """Deterministic stand-in for the image classifier.

    ``nsfw_score`` fixes the NSFW probability (a float or a callable of the
    input image); otherwise logits are pseudo-random from ``seed`` and the
    image content. ``calls`` counts invocations.
    """

    def __init__(self, num_classes: int = 81, seed: int = 0,
                 nsfw_score: float | Callable | None = None, input_size: int = CLASSIFIER_SIZE):
        if num_classes not in (81, 2):
            raise ValueError("num_classes must be 81 or 2")
        self.num_classes = num_classes
        self.nsfw_index = MULTI_LABEL_NSFW_INDEX if num_classes == 81 else 1
        self.seed = seed
        self.nsfw_score = nsfw_score
        self.descriptor = BackendDescriptor(BackendKind.SYNTHETIC, input_size,
                                            OutputLayout.CLASSIFIER, (num_classes,))
        self._lock = threading.Lock()
        self.calls = 0

    def invoke(self, img: ImageTensor) -> np.ndarray:
        with self._lock:
            self.calls += 1
        if self.nsfw_score is None:
            rng = _seeded_rng(self.seed, img)
            return rng.normal(-2.0, 2.0, size=self.num_classes).astype(np.float32)
        p = float(self.nsfw_score(img) if callable(self.nsfw_score) else self.nsfw_score)
        out = np.full(self.num_classes, -6.0, dtype=np.float32)
        if self.num_classes == 2:
            out[0] = 0.0
        out[self.nsfw_index] = _logit(p)
        return out
