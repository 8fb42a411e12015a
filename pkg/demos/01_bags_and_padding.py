"""
Feature bags, the PMX1 file format and padded batches
=====================================================

A slide is a variable-length bag of region features. Bags are stored one per
file and batched by padding at the end with a validity mask.
"""

import tempfile
from pathlib import Path

import numpy as np

from premix.bagio import SynthSpec, load_bag, pad_batch, save_bag, synth_dataset

# a tiny synthetic dataset written to disk with its manifest
spec = SynthSpec(n_pretrain=6, n_pool=4, n_test=4, d=5, r_min=2, r_max=6, seed=0)
out = Path(tempfile.mkdtemp())
manifest = synth_dataset(spec, out)
print("manifest:", out / "manifest.json")
print("splits:", {s: len(manifest.split(s)) for s in ("pretrain", "pool", "test")})

# bags round-trip through the binary format bit-exactly
bag = manifest.load_split("pool")[0]
save_bag(bag, out / "copy.pmx")
again = load_bag(out / "copy.pmx", slide_id=bag.slide_id, label=bag.label)
print("round trip exact:", np.array_equal(bag.features, again.features))

# padding: data beyond each bag's length is zero and masked out
batch = pad_batch(manifest.load_split("pretrain")[:3])
print("batch data shape:", batch.data.shape)
print("lengths:", batch.lengths)
print(batch.valid.astype(int))
