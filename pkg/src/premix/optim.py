"""LARS and Adam over dicts of numpy arrays, plus the two epoch-level schedules.

Parameters are updated in place. Each parameter name belongs to a group,
``"weights"`` or ``"bias_and_norm"``; LARS skips decay and trust-ratio
adaptation for the latter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

GroupFn = Callable[[str], str]


def _default_group(name: str) -> str:
    return "weights"


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for k, w in params.items():
        g = grads.get(k)
        if g is None or g.shape != w.shape:
            raise ValueError(f"gradient for {k!r} missing or misshaped")


@dataclass
class OptimState:
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def slot(self, kind: str, name: str, like: np.ndarray) -> np.ndarray:
        bucket = self.slots.setdefault(kind, {})
        if name not in bucket:
            bucket[name] = np.zeros_like(like)
        return bucket[name]


def lars_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | Mapping[str, float],
    weight_decay: float = 1e-6,
    momentum: float = 0.9,
    trust_coeff: float = 0.001,
    group: GroupFn = _default_group,
) -> OptimState:
    """One LARS update.

    ``lr`` is a float or a per-group mapping. For weight tensors the step is
    scaled by ``trust_coeff * ||w|| / ||g + wd w||`` when both norms are
    positive; bias and norm tensors get neither decay nor scaling.
    """
    _check(params, grads)
    for name, w in params.items():
        grp = group(name)
        g = grads[name]
        rate = lr[grp] if isinstance(lr, Mapping) else lr
        local = 1.0
        if grp == "weights":
            if weight_decay:
                g = g + weight_decay * w
            w_norm = float(np.linalg.norm(w))
            g_norm = float(np.linalg.norm(g))
            if w_norm > 0 and g_norm > 0:
                local = trust_coeff * w_norm / g_norm
        buf = state.slot("momentum", name, w)
        buf *= momentum
        buf += (local * rate) * g
        w -= buf
    state.step += 1
    return state


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    weight_decay: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    """Adam with bias correction; weight decay enters as an L2 term on the gradient."""
    _check(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, w in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * w
        m = state.slot("m", name, w)
        v = state.slot("v", name, w)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: Mapping[str, float] = field(
        default_factory=lambda: {"weights": 0.2, "bias_and_norm": 0.0048}
    )
    batch_size: int = 32
    warmup_epochs: int = 10
    total_epochs: int = 300
    final_factor: float = 1e-3
    step_size: int = 50
    gamma: float = 0.5

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.final_factor <= 0 or self.gamma <= 0 or self.step_size < 1:
            raise ValueError("decay factors must be positive")


def warmup_cosine_lr(spec: ScheduleSpec, epoch: int) -> dict[str, float]:
    """Linear warm-up to ``base * batch/256``, then cosine down to ``final_factor`` of it."""
    if not 0 <= epoch < spec.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {spec.total_epochs})")
    out = {}
    for grp, lr in spec.base_lr.items():
        base = lr * spec.batch_size / 256
        if epoch < spec.warmup_epochs:
            out[grp] = base * epoch / spec.warmup_epochs
            continue
        span = spec.total_epochs - 1 - spec.warmup_epochs
        if span <= 0:
            out[grp] = base
            continue
        q = (epoch - spec.warmup_epochs) / span
        end = base * spec.final_factor
        out[grp] = end + (base - end) * 0.5 * (1.0 + math.cos(math.pi * q))
    return out


def step_lr(base_lr: float, epoch: int, step_size: int = 50, gamma: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * gamma ** (epoch // step_size)
