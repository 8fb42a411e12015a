"""
Acquisition functions and the labeling loop
===========================================

Each selector reads class probabilities and slide embeddings from the
current model. The loop starts from a shared random draw and then spends a
fixed budget per round.
"""

import numpy as np

from premix.active import (
    PoolSnapshot,
    al_loop,
    badge_select,
    cdal_select,
    coreset_select,
    entropy_select,
    kmeanspp_select,
)

rng = np.random.default_rng(0)
ids = [f"s{i:02d}" for i in range(12)]
p1 = rng.random(12)
snap = PoolSnapshot(ids, np.stack([1 - p1, p1], 1), rng.normal(size=(12, 3)))

print("entropy :", entropy_select(snap, 3))
print("coreset :", coreset_select(snap.embeddings, ids, snap.embeddings[:1], 3))
print("kmeans++:", kmeanspp_select(snap.embeddings, ids, 3, np.random.default_rng(1)))
print("badge   :", badge_select(snap, 3, np.random.default_rng(1)))
print("cdal    :", cdal_select(snap, 3, snap.probs[:1]))


class Model:
    """A stand-in model whose accuracy grows with the labeled set."""

    def __init__(self, labeled):
        self.n = len(labeled)

    def snapshot(self, pool):
        idx = [int(i[1:]) for i in pool]
        return PoolSnapshot(list(pool), snap.probs[idx], snap.embeddings[idx])

    def test_accuracy(self):
        return 0.5 + self.n / 40


state = al_loop("entropy", ids, lambda i: int(i[-1]) % 2, lambda lab, it: Model(lab),
                budget=2, initial=4, iterations=3)
for rec in state.history:
    print(rec["iter"], rec["acquisition"], rec["selected_ids"], rec["test_accuracy"])
