"""Feature-space slide augmentations used to build the two pre-training views.

Pixel transforms do not apply once slides are reduced to region features, so
each transform here acts on the ``R x d`` matrix directly. Every function
takes a :class:`~premix.bagio.FeatureBag` and returns a new one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from premix.bagio import FeatureBag


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_crop: float = 0.5
    p_zero: float = 0.5
    p_scale: float = 0.5
    p_noise: float = 0.1
    zero_rate: float = 0.25
    # None means 0.1 x the dataset feature std, filled in by the trainer
    noise_sigma: float | None = None
    scale_range: tuple[float, float] = (0.8, 1.2)
    crop_keep_range: tuple[float, float] = (0.5, 1.0)
    # "sa" = the transform stack below, "rq" = random quarter of the regions
    mode: str = "sa"
    rq_keep: float = 0.25

    def validate(self) -> None:
        for name in ("p_flip", "p_crop", "p_zero", "p_scale", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if not 0.0 <= self.zero_rate < 1.0:
            raise ValueError("zero_rate must lie in [0, 1)")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range needs 0 < lo <= hi")
        lo, hi = self.crop_keep_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_keep_range must be an ordered sub-range of (0, 1]")
        if self.mode not in ("sa", "rq"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if not 0 < self.rq_keep <= 1:
            raise ValueError("rq_keep must lie in (0, 1]")


def random_flip(bag: FeatureBag, rng: np.random.Generator | None = None) -> FeatureBag:
    """Reverse region order, the sequence analogue of a horizontal flip."""
    return bag.with_features(bag.features[::-1].copy())


def random_zero(bag: FeatureBag, rng: np.random.Generator, zero_rate: float) -> FeatureBag:
    """Zero each region independently with probability ``zero_rate``.

    A selection that would blank every region is redrawn.
    """
    if zero_rate <= 0:
        return bag
    r = bag.n_regions
    while True:
        drop = rng.random(r) < zero_rate
        if not drop.all():
            break
    feats = bag.features.copy()
    feats[drop] = 0
    return bag.with_features(feats)


def gaussian_noise(bag: FeatureBag, rng: np.random.Generator, sigma: float) -> FeatureBag:
    if sigma == 0:
        return bag
    noise = rng.normal(0.0, sigma, size=bag.features.shape)
    return bag.with_features((bag.features + noise).astype(bag.features.dtype))


def random_scale(
    bag: FeatureBag, rng: np.random.Generator, scale_range: tuple[float, float]
) -> FeatureBag:
    lo, hi = scale_range
    s = rng.uniform(lo, hi)
    return bag.with_features((bag.features * s).astype(bag.features.dtype))


def _crop(bag: FeatureBag, rng: np.random.Generator, keep: float) -> FeatureBag:
    r = bag.n_regions
    n = min(r, max(1, int(round(keep * r))))
    if n == r:
        return bag
    start = int(rng.integers(0, r - n + 1))
    return bag.with_features(bag.features[start : start + n].copy())


def random_crop(
    bag: FeatureBag, rng: np.random.Generator, keep_range: tuple[float, float]
) -> FeatureBag:
    """Keep a contiguous run of ``round(keep * R)`` regions, ``keep ~ U(keep_range)``."""
    keep = rng.uniform(*keep_range)
    return _crop(bag, rng, keep)


def random_quarter(bag: FeatureBag, rng: np.random.Generator, keep: float = 0.25) -> FeatureBag:
    """The "RQ" ablation view: one random contiguous window of ``keep`` of the regions.

    Two independent calls give windows that may overlap.
    """
    return _crop(bag, rng, keep)


def augment_view(
    bag: FeatureBag, rng: np.random.Generator, cfg: AugmentConfig, noise_sigma: float = 0.0
) -> FeatureBag:
    """One augmented view: flip -> crop -> zero -> scale -> noise, each gated.

    ``noise_sigma`` is used when ``cfg.noise_sigma`` is None.
    """
    if cfg.mode == "rq":
        return random_quarter(bag, rng, cfg.rq_keep)
    sigma = cfg.noise_sigma if cfg.noise_sigma is not None else noise_sigma
    if rng.random() < cfg.p_flip:
        bag = random_flip(bag, rng)
    if rng.random() < cfg.p_crop:
        bag = random_crop(bag, rng, cfg.crop_keep_range)
    if rng.random() < cfg.p_zero:
        bag = random_zero(bag, rng, cfg.zero_rate)
    if rng.random() < cfg.p_scale:
        bag = random_scale(bag, rng, cfg.scale_range)
    if rng.random() < cfg.p_noise:
        bag = gaussian_noise(bag, rng, sigma)
    return bag
