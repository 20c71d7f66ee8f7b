"""
From raw anchor rows to detections
==================================

The detector emits one row per anchor: four box offsets and five class
scores. Decoding, thresholding and per-class suppression turn that into a
short list of boxes. Here the raw tensor is built from a script so the
expected answer is known.
"""

from modguard.backends import synthesize_detector_output
from modguard.detector import AnchorConfig, count_distinct_people, detect, generate_anchors

cfg = AnchorConfig()
print("anchors", generate_anchors(cfg).shape)

# Two people, each seen three times with slightly jittered boxes, and one
# unsafe part. Every entry lands on its own anchor.
script = [
    ("PERSON", 0.92, (0.05, 0.10, 0.40, 0.90)),
    ("PERSON", 0.88, (0.06, 0.11, 0.41, 0.89)),
    ("PERSON", 0.75, (0.04, 0.09, 0.39, 0.92)),
    ("PERSON", 0.95, (0.55, 0.10, 0.95, 0.90)),
    ("PERSON", 0.70, (0.56, 0.12, 0.94, 0.91)),
    ("BUTTOCK", 0.81, (0.62, 0.55, 0.85, 0.75)),
]
raw = synthesize_detector_output(script, cfg)
print("raw", raw.shape, "non-empty rows", int((raw[:, 4:] > 0).any(axis=1).sum()))

dets = detect(raw, cfg, score_threshold=0.5, iou_threshold=0.5)
for d in dets:
    print(f"{d.cls.value:<8} {d.score:.2f}", [round(v, 3) for v in d.box.as_tuple()])

# Duplicates are gone; the body part survives because NMS is per class.
print("distinct people", count_distinct_people(dets))
