"""
How the ensemble routes an image
================================

Scripted detector outputs make each branch of the ensemble easy to trigger.
The classifier here returns a fixed NSFW probability and counts its calls.
"""

from modguard.backends import SyntheticClassifier, SyntheticDetector
from modguard.imageops import ImageTensor
from modguard.pipeline import run_pipeline

img = ImageTensor.full(240, 320, 0.5)

cases = {
    "nothing found": [],
    "unsafe part": [("F_GENITALIA", 0.85, (0.4, 0.5, 0.55, 0.7))],
    "two people": [("PERSON", 0.9, (0.05, 0.1, 0.45, 0.9)),
                   ("PERSON", 0.8, (0.55, 0.1, 0.95, 0.9))],
    "crowd": [("PERSON", 0.9, (0.02 + 0.24 * k, 0.1, 0.22 + 0.24 * k, 0.9)) for k in range(4)],
}

for name, script in cases.items():
    clf = SyntheticClassifier(81, nsfw_score=0.3)
    v = run_pipeline(img, SyntheticDetector(script=script), clf)
    print(f"{name:<14} {v.label.value:<5} {v.route.value:<24} people={v.people} "
          f"classifier calls={clf.calls} confidence={v.confidence:.2f}")

# A detector hit cannot be overruled by a calm classifier.
v = run_pipeline(img, SyntheticDetector(script=cases["unsafe part"]), SyntheticClassifier(nsfw_score=0.0))
print("hit with classifier at 0:", v.label.value)

# Per-stage wall time in milliseconds.
print({k: round(t, 2) for k, t in v.timings.items()})
