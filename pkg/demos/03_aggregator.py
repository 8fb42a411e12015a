"""
The masked transformer aggregator
=================================

Region features pass through a small transformer encoder, attention pooling
summarises the slide, and two heads sit on top: a projector used during
pre-training and a two-class classifier used during fine-tuning. Gradients
come from a small reverse-mode autograd over numpy.
"""

import numpy as np

from premix.aggregator import ArchConfig, MixSpec, backward, init_params, logits_forward, projection_forward
from premix.bagio import FeatureBag, pad_batch

cfg = ArchConfig(d=6, hidden=8, layers=1, heads=2, attn_dim=4, projector=(16, 16, 8))
params = init_params(0, cfg, np.float64)
print("parameters:", params.count())

rng = np.random.default_rng(1)
batch = pad_batch([FeatureBag(f"s{i}", rng.normal(size=(n, 6))) for i, n in enumerate([5, 3, 4])])

z, _ = projection_forward(params, batch, training=True)
print("projector output:", z.shape)

# manifold mixup inside the first encoder layer
logits, cache = logits_forward(params, batch, MixSpec("loc2", 0.7))
print("logits:\n", np.round(logits.data, 4))

grads, input_grad = backward(cache, np.ones_like(logits.data))
print("largest parameter gradient:", max(np.abs(g).max() for g in grads.values()))

# padding receives no gradient
print("gradient at padded rows:", np.abs(input_grad[~batch.valid]).max())
