"""
Barlow Twins and the slide-mixing objective
===========================================

The base loss pushes the cross-correlation of two embedding batches toward
the identity. The full pre-training objective adds two mixed terms weighted
by the surviving fraction of each mixed slide.
"""

import numpy as np

from premix.losses import LossWeights, cross_entropy_mixed, original_loss, total_pretrain_loss

z = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
print("perfectly decorrelated, matched views:", round(original_loss(z, z).item(), 6))

anti = np.array([[1, -1], [-1, 1]], float)
print("two anticorrelated columns:", round(original_loss(anti, anti).item(), 5))

rng = np.random.default_rng(0)
za, zb, za_mix, zb_mix = (rng.normal(size=(8, 4)) for _ in range(4))
lam = rng.uniform(0.1, 0.9, 8)
total, parts = total_pretrain_loss(za, zb, za_mix, zb_mix, lam, LossWeights())
print("total:", round(total.item(), 4), {k: round(v.item(), 4) for k, v in parts.items()})

# fine-tuning uses label interpolation
logits = rng.normal(size=(4, 2))
y = np.array([0, 1, 1, 0])
print("mixed cross-entropy:", round(cross_entropy_mixed(logits, y, y[::-1], 0.6).item(), 4))
