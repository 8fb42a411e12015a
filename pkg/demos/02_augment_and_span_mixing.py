"""
Slide augmentation and span mixing
==================================

Two augmented views of every slide feed the self-supervised objective. Span
mixing then swaps a contiguous run of regions with the slide at the mirrored
batch position and records the fraction of each slide that survived.
"""

import numpy as np

from premix.augment import AugmentConfig, augment_view
from premix.bagio import FeatureBag, pad_batch
from premix.mixing import apply_span_mix, plan_span_mix, sample_lambda

rng = np.random.default_rng(0)
bags = [FeatureBag(f"s{i}", rng.normal(size=(n, 4))) for i, n in enumerate([10, 6, 8, 12])]

# each view is a random subset of flip, crop, zero, scale and noise
cfg = AugmentConfig()
view = augment_view(bags[0], rng, cfg, noise_sigma=0.1)
print("regions before/after augmentation:", bags[0].n_regions, view.n_regions)

# the "rq" mode keeps a random quarter of the regions instead
rq = augment_view(bags[0], rng, AugmentConfig(mode="rq"))
print("random-quarter view keeps", rq.n_regions, "regions")

batch = pad_batch(bags)
lam_raw = sample_lambda(rng, 1.0, 1.0, len(bags))
plan = plan_span_mix(batch.valid, lam_raw, rng)
mixed = apply_span_mix(batch, plan)

for i in range(len(bags)):
    print(f"slide {i}: donor {plan.donor[i]}, rows [{plan.start_idx[i]}, {plan.end_idx[i]}) "
          f"replaced, lam = {plan.lam[i]:.3f}")

# only the planned rows changed
changed = np.any(mixed.data != batch.data, axis=-1)
print(changed.astype(int))
