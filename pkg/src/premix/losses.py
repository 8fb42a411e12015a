"""Barlow Twins slide-mixing losses and the mixed-label cross-entropy.

All functions accept numpy arrays or autograd tensors and return a scalar
:class:`~premix.autograd.Tensor`; call ``.item()`` for the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from premix import autograd as ag
from premix.autograd import Tensor

BN_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    lambda_bt: float = 0.0051

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if self.lambda_bt <= 0:
            raise ValueError("lambda_bt must be positive")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def batch_standardize(z: Tensor, eps: float = BN_EPS, strict: bool = False) -> Tensor:
    """Zero-mean, unit-variance columns over the batch (biased variance)."""
    n = z.shape[0]
    if n < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    mu = z.mean(axis=0, keepdims=True)
    c = z - mu
    var = (c * c).mean(axis=0, keepdims=True)
    if strict and np.any(var.data <= 0):
        raise ValueError("zero-variance embedding column")
    return c * ag.power(var + eps, -0.5)


def cross_correlation(z_a, z_b, eps: float = BN_EPS, strict: bool = False) -> Tensor:
    z_a, z_b = _t(z_a), _t(z_b)
    if z_a.shape != z_b.shape:
        raise ValueError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    n = z_a.shape[0]
    return (batch_standardize(z_a, eps, strict).T @ batch_standardize(z_b, eps, strict)) * (1.0 / n)


def original_loss(z_a, z_b, lambda_bt: float = 0.0051, eps: float = BN_EPS, strict: bool = False) -> Tensor:
    """Barlow Twins loss: sum (C_ii - 1)^2 + lambda_bt * sum_{i != j} C_ij^2."""
    c = cross_correlation(z_a, z_b, eps, strict)
    eye = np.eye(c.shape[0], dtype=c.dtype)
    on = c * eye - eye
    off = c * (1.0 - eye)
    return (on * on).sum() + (off * off).sum() * lambda_bt


def mix_loss(z_x, z_y, lam_a, lam_b, lambda_bt: float = 0.0051, eps: float = BN_EPS) -> Tensor:
    """``mean_i(lam_a[i] * L(z_x, z_y) + lam_b[i] * L(z_x, flip(z_y)))``.

    Both inner losses are scalars, so this equals
    ``mean(lam_a) * L(z_x, z_y) + mean(lam_b) * L(z_x, flip(z_y))``.
    """
    z_x, z_y = _t(z_x), _t(z_y)
    n = z_x.shape[0]
    lam_a = np.broadcast_to(np.asarray(lam_a, dtype=z_x.dtype), (n,))
    lam_b = np.broadcast_to(np.asarray(lam_b, dtype=z_x.dtype), (n,))
    straight = original_loss(z_x, z_y, lambda_bt, eps)
    flipped = original_loss(z_x, z_y[::-1], lambda_bt, eps)
    return (straight * lam_a + flipped * lam_b).mean()


def mixing_overlap(lam) -> np.ndarray:
    """``min(lam, 1 - flip(lam)) + min(1 - lam, flip(lam))`` elementwise."""
    lam = np.asarray(lam, dtype=np.float64)
    fl = lam[::-1]
    return np.minimum(lam, 1.0 - fl) + np.minimum(1.0 - lam, fl)


def total_pretrain_loss(z_a, z_b, z_a_mix, z_b_mix, lam, weights: LossWeights = LossWeights()):
    """Three-term slide-mixing objective.

    Returns ``(total, {"source", "mix_source", "mix"})`` with tensor values.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("lam must lie in [0, 1]")
    lbt = weights.lambda_bt
    source = original_loss(z_a, z_b, lbt)
    mix_source = mix_loss(z_b_mix, z_a, lam, 1.0 - lam, lbt)
    com = mixing_overlap(lam)
    mix = mix_loss(z_b_mix, z_a_mix, 1.0 / (1.0 + com), com / (1.0 + com), lbt)
    total = source * weights.alpha + mix_source * weights.beta + mix * weights.gamma
    return total, {"source": source, "mix_source": mix_source, "mix": mix}


def cross_entropy(logits, y) -> Tensor:
    logits = _t(logits)
    y = np.asarray(y)
    n, k = logits.shape
    if y.shape != (n,) or np.any((y < 0) | (y >= k)):
        raise ValueError(f"class indices must lie in [0, {k})")
    onehot = np.eye(k, dtype=logits.dtype)[y]
    return -(ag.log_softmax(logits) * onehot).sum() * (1.0 / n)


def cross_entropy_mixed(logits, y_a, y_b, lam: float) -> Tensor:
    """``lam * CE(logits, y_a) + (1 - lam) * CE(logits, y_b)``, batch mean."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return cross_entropy(logits, y_a) * lam + cross_entropy(logits, y_b) * (1.0 - lam)
