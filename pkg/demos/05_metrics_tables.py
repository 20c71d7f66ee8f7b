"""
Scoring a moderation run
========================

Precision, recall and F1 come from the confusion counts; the false
positive rate matters most on galleries that are almost entirely safe.
The counts below describe a 16k-image evaluation of the ensemble and a
few ablations of it.
"""

from modguard.metrics import ConfusionCounts, average_precision, f1, fpr, precision, recall

rows = {
    "ensemble": (4586, 10714, 239, 623),
    "binary classifier": (4588, 10568, 385, 621),
    "no localization": (4127, 10775, 178, 1082),
    "beta_nsfw = 2": (4162, 10876, 77, 1047),
}
for name, (tp, tn, fp, fn) in rows.items():
    c = ConfusionCounts(tp, tn, fp, fn)
    print(f"{name:<18} P={precision(c):.4f} R={recall(c):.4f} F1={f1(c):.4f}")

# Safe-only collections: only false positives can occur.
for name, fp, n in [("caltech256", 67, 30607), ("coil100", 0, 7200), ("all", 793, 365581)]:
    print(f"{name:<10} FPR={fpr(ConfusionCounts(fp=fp, tn=n - fp)):.5f}")

# Average precision over a ranked list, positives marked True.
ranking = [(0.95, True), (0.9, True), (0.8, False), (0.7, True), (0.4, False)]
print("AP", round(average_precision(ranking), 4))
