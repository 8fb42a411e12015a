"""Intra-batch slide mixing (pre-training) and Mixup / Manifold Mixup (fine-tuning).

Every mixing partner is the batch-order-reversed sample: sample ``i`` pairs
with ``N - 1 - i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from premix.bagio import PaddedBatch

LOCATIONS = ("loc1", "loc2", "loc3")


def flip_index(n: int) -> np.ndarray:
    return np.arange(n)[::-1]


def sample_lambda(rng: np.random.Generator, a: float = 1.0, b: float = 1.0, n: int = 1) -> np.ndarray:
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta shape parameters must be positive, got ({a}, {b})")
    return rng.beta(a, b, size=n)


def mix_ratio(lam):
    """Fraction of a slide's regions handed to its partner: sqrt(1 - (0.8 lam + 0.1))."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing coefficient must lie in [0, 1]")
    return np.sqrt(1.0 - (0.8 * lam + 0.1))


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass
class MixPlan:
    lambda_raw: np.ndarray
    ratio: np.ndarray
    non_pad_len: np.ndarray
    cut_len: np.ndarray
    center: np.ndarray
    start_idx: np.ndarray
    end_idx: np.ndarray
    lam: np.ndarray

    def __len__(self) -> int:
        return len(self.lam)

    @property
    def donor(self) -> np.ndarray:
        return flip_index(len(self))


def plan_span_mix(valid: np.ndarray, lambda_raw, rng: np.random.Generator) -> MixPlan:
    """Choose, per sample, the contiguous span to overwrite from its partner.

    The span lies inside the valid prefix of both the receiver and the donor:
    ``cut_len`` and the centre range are clamped to the shorter of the two.
    ``lam`` is still measured against the receiver's own length.
    """
    valid = np.asarray(valid, dtype=bool)
    lambda_raw = np.asarray(lambda_raw, dtype=np.float64)
    n = valid.shape[0]
    if lambda_raw.shape != (n,):
        raise ValueError(f"need one lambda per sample ({n}), got shape {lambda_raw.shape}")
    non_pad = valid.sum(axis=1).astype(np.int64)
    if np.any(non_pad < 1):
        raise ValueError("every sample needs at least one valid region")
    common = np.minimum(non_pad, non_pad[::-1])

    ratio = mix_ratio(lambda_raw)
    cut = np.clip(_round_half_up(ratio * non_pad), 1, common)
    half = cut / 2.0
    center = rng.uniform(half, common - half)
    start = _round_half_up(center - half)
    end = _round_half_up(center + half)
    lam = 1.0 - cut / non_pad
    return MixPlan(lambda_raw, ratio, non_pad, cut, center, start, end, lam)


def apply_span_mix(batch: PaddedBatch, plan: MixPlan) -> PaddedBatch:
    """Copy the donor's rows ``[start, end)`` into each receiver; mask unchanged."""
    n = len(batch)
    if len(plan) != n:
        raise ValueError(f"plan covers {len(plan)} samples, batch has {n}")
    if np.any(plan.end_idx > batch.data.shape[1]):
        raise ValueError("plan span exceeds the batch length")
    out = batch.data.copy()
    for i, j in enumerate(plan.donor):
        s, e = plan.start_idx[i], plan.end_idx[i]
        out[i, s:e] = batch.data[j, s:e]
    return PaddedBatch(out, batch.valid.copy())


def manifold_mix(hidden, valid: np.ndarray, lam: float):
    """``lam * h_i + (1 - lam) * h_flip(i)`` over the union of both masks.

    Works on plain arrays and on autograd tensors alike; padding counts as zero.
    Returns ``(mixed, union_valid)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    valid = np.asarray(valid, dtype=bool)
    dtype = hidden.dtype
    own = valid[..., None].astype(dtype)
    donor = own[::-1]
    mixed = hidden * (own * dtype.type(lam)) + hidden[::-1] * (donor * dtype.type(1.0 - lam))
    return mixed, valid | valid[::-1]


def mixup_pair(batch: PaddedBatch, labels, lam: float):
    """Input-level Mixup; returns ``(mixed batch, (y_a, y_b), lam)``."""
    labels = np.asarray(labels)
    data, union = manifold_mix(batch.data, batch.valid, lam)
    return PaddedBatch(data, union), (labels, labels[::-1]), lam


def mixed_targets(y_a, y_b, lam: float, n_classes: int = 2) -> np.ndarray:
    """Soft labels ``lam * e_ya + (1 - lam) * e_yb``."""
    eye = np.eye(n_classes)
    return lam * eye[np.asarray(y_a)] + (1.0 - lam) * eye[np.asarray(y_b)]
