"""
Trading recall for precision with class weights
===============================================

The weighted cross-entropy puts ``alpha`` on missed positives and ``beta``
on false alarms. On an overlapping two-blob toy set a small linear head
shows the effect directly.
"""

import math

import numpy as np

from modguard.classifier import (
    LossWeights, OptimizerConfig, loss_gradient, make_dial_dataset, precision_recall_dial,
    sigmoid_scores, weighted_bce_loss,
)

# Sanity values: a coin-flip prediction on a positive costs ln 2, doubled by alpha = 2.
p = sigmoid_scores([0.0])
print(weighted_bce_loss(p, [1], LossWeights.uniform(1))[1], math.log(2))
print(weighted_bce_loss(p, [1], LossWeights([2.0], [1.0]))[1], 2 * math.log(2))

# With unit weights the sigmoid gradient is (p - y) / C.
z = np.array([0.5, -1.0])
print(loss_gradient(z, [1, 0], LossWeights.uniform(2), "MULTI_LABEL"))

x, y = make_dial_dataset(2000, seed=0)
print("positives", int(y.sum()), "of", len(y))

opt = OptimizerConfig(epochs=50, seed=0)
for row in precision_recall_dial((x, y), [1.0, 2.0, 4.0], opt=opt):
    print(f"beta={row.beta:g}  precision={row.precision:.3f}  recall={row.recall:.3f}")

(boost,) = precision_recall_dial((x, y), [1.0], alpha_nsfw=2.0, opt=opt)
print(f"alpha=2  precision={boost.precision:.3f}  recall={boost.recall:.3f}")
