"""
The knapsack layer up close
===========================

A selection net scores every ensemble member and the layer keeps the k best.
The forward pass is an exact top-k mask, which has zero derivative almost
everywhere. The backward pass differentiates a noisy version of the same
solver instead. This script looks at both halves on tiny inputs.

Run with ``python demos/knapsack_layer.py``.
"""

import math

import numpy as np

from smartensemble import autodiff as ad
from smartensemble.knapsack import (
    KnapsackConfig,
    knapsack_layer,
    normalize_scores,
    perturbed_jacobian,
    smoothed_forward,
    topk_select,
)

np.set_printoptions(precision=3, suppress=True)

##############################################################################
# Hard forward pass
# -----------------
# The mask marks the k largest scores. Equal scores go to the lower index.

scores = np.array([0.9, 0.1, 0.5, 0.5])
print("scores          ", scores)
print("top-2 mask      ", topk_select(scores, 2))
print("top-3 mask      ", topk_select(scores, 3))

# Rescaling does not move the argmax, which is why scores can be normalised
# to unit length before the solve.
print("normalised      ", normalize_scores(scores))
print("same mask?      ", np.array_equal(topk_select(normalize_scores(scores), 2), topk_select(scores, 2)))

##############################################################################
# Smoothing with noise
# --------------------
# Averaging the mask over Gaussian perturbations gives a smooth map from
# scores to selection probabilities. Each row still sums to k.

for eps in (0.1, 0.5, 2.0):
    cfg = KnapsackConfig(k=2, epsilon=eps, m=20_000, noise_seed=0)
    probs = smoothed_forward(normalize_scores(scores), cfg)
    print(f"eps={eps:<4} smoothed mask {probs}  sum={probs.sum():.6f}")

##############################################################################
# A two-item race with a known answer
# -----------------------------------
# With two items, k=1 and scores (a, -a), item 0 wins with probability
# Phi(2a / (eps*sqrt(2))). Its derivative in the first score is the normal
# density at that point divided by eps*sqrt(2), and the Monte-Carlo Jacobian
# should land on it.

a, eps = 0.3, 1.0
z = 2 * a / (eps * math.sqrt(2))
exact = math.exp(-z * z / 2) / math.sqrt(2 * math.pi) / (eps * math.sqrt(2))
cfg = KnapsackConfig(k=1, epsilon=eps, m=100_000, noise_seed=1)
J = perturbed_jacobian(np.array([a, -a]), cfg)
print("Monte-Carlo Jacobian\n", J)
print(f"closed form diagonal {exact:.4f}")

##############################################################################
# The layer on a tape
# -------------------
# Inside a network the layer emits the hard mask and, on the way back,
# multiplies the upstream gradient by the Monte-Carlo Jacobian (taken at the
# normalised scores, then through the normalisation).

tape = ad.Tape()
c = tape.leaf([0.2, -0.4, 0.9, 0.1, 0.3])
mask = knapsack_layer(c, KnapsackConfig(k=2, m=1000, noise_seed=2), tape)
preference = tape.constant([1.0, 0.0, 0.0, 0.0, 0.0])  # reward for picking item 0
tape.backward(ad.sum_all(ad.mul(mask, preference)))
print("mask      ", mask.data)
print("d/dscores ", c.grad)
# The gradient is positive for score 0 and negative for the others: raising
# score 0 relative to the rest is what would bring item 0 into the mask.
