"""Feature bags, their on-disk formats, padding, and a synthetic slide generator.

A bag is one slide's ragged ``R x d`` matrix of region features. Bags are
stored one per file in the little-endian ``PMX1`` layout::

    b"PMX1" | u32 version=1 | u32 R | u32 d | R*d float32, row-major

A dataset is a JSON manifest listing every bag with its split and label.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PMX1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
SPLITS = ("pretrain", "pool", "test")


class BagFormatError(ValueError):
    """Raised when a bag file is malformed."""


@dataclass
class FeatureBag:
    slide_id: str
    features: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id!r}: features must be R x d with R >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"bag {self.slide_id!r}: non-finite feature value")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"bag {self.slide_id!r}: label must be 0, 1 or None")

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "FeatureBag":
        return FeatureBag(self.slide_id, features, self.label)


def save_bag(bag: FeatureBag, path) -> None:
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"bag {bag.slide_id!r}: non-finite feature value")
    r, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, r, d))
        fh.write(feats.tobytes())


def load_bag(path, slide_id: str | None = None, label: int | None = None) -> FeatureBag:
    """Read a ``PMX1`` file. ``slide_id`` defaults to the file stem."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise BagFormatError(f"{path}: truncated header")
    magic, version, r, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size :]
    expected = r * d * 4
    if len(payload) < expected:
        raise BagFormatError(
            f"{path}: truncated payload, header says {r}x{d} ({expected} bytes), got {len(payload)}"
        )
    if len(payload) > expected:
        raise BagFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    feats = np.frombuffer(payload, dtype="<f4").reshape(r, d).astype(np.float32)
    return FeatureBag(slide_id or Path(path).stem, feats, label)


@dataclass
class PaddedBatch:
    """``data`` is N x R_max x d; ``valid`` marks real regions (a prefix per row)."""

    data: np.ndarray
    valid: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def __len__(self) -> int:
        return self.data.shape[0]

    def unpad(self) -> list[np.ndarray]:
        return [self.data[i, :n] for i, n in enumerate(self.lengths)]


def pad_batch(bags: Sequence[FeatureBag], r_max: int | None = None, dtype=None) -> PaddedBatch:
    """Stack bags into a zero-padded batch with trailing padding.

    ``r_max`` may exceed the longest bag to add extra padding columns.
    """
    if len(bags) == 0:
        raise ValueError("pad_batch: empty list of bags")
    dims = {b.dim for b in bags}
    if len(dims) != 1:
        raise ValueError(f"pad_batch: mixed feature dims {sorted(dims)}")
    (d,) = dims
    lengths = [b.n_regions for b in bags]
    longest = max(lengths)
    r_max = longest if r_max is None else r_max
    if r_max < longest:
        raise ValueError(f"pad_batch: r_max={r_max} shorter than longest bag ({longest})")
    dtype = dtype or np.result_type(*[b.features.dtype for b in bags])
    data = np.zeros((len(bags), r_max, d), dtype=dtype)
    valid = np.zeros((len(bags), r_max), dtype=bool)
    for i, (bag, n) in enumerate(zip(bags, lengths)):
        data[i, :n] = bag.features
        valid[i, :n] = True
    return PaddedBatch(data, valid)


# -- manifests ------------------------------------------------------------


@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    label: int | None
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest: duplicate slide ids")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"manifest: unknown split {e.split!r} for {e.slide_id}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, entries: Iterable[ManifestEntry]) -> list[FeatureBag]:
        return [load_bag(self.resolve(e), e.slide_id, e.label) for e in entries]

    def load_split(self, name: str) -> list[FeatureBag]:
        return self.load(self.split(name))

    def labels(self) -> dict[str, int | None]:
        return {e.slide_id: e.label for e in self.entries}

    def to_json(self) -> str:
        rows = [
            {"id": e.slide_id, "path": e.path, "label": e.label, "split": e.split}
            for e in self.entries
        ]
        return json.dumps(rows, indent=1)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    rows = json.loads(path.read_text(encoding="utf-8"))
    entries = [ManifestEntry(r["id"], r["path"], r["label"], r["split"]) for r in rows]
    manifest = DatasetManifest(entries, path.parent)
    for e in entries:
        if not manifest.resolve(e).exists():
            raise FileNotFoundError(f"manifest: missing bag file {manifest.resolve(e)}")
    return manifest


# -- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic slide generator.

    Normal bags draw every region from N(0, noise_scale^2 I). Tumor bags
    replace ``ceil(signal_fraction * R)`` regions, at random positions, with
    draws centred at ``shift * u`` for a seed-fixed unit direction ``u``.
    """

    n_pretrain: int = 300
    n_pool: int = 100
    n_test: int = 128
    d: int = 192
    r_min: int = 8
    r_max: int = 32
    signal_fraction: float = 0.25
    shift: float = 1.0
    noise_scale: float = 1.0
    tumor_fraction: float = 0.4
    seed: int = 0
    pretrain_overlaps_pool: bool = False

    def validate(self) -> None:
        if min(self.n_pretrain, self.n_pool, self.n_test) < 0:
            raise ValueError("synth: negative split size")
        if self.d < 1 or self.r_min < 1 or self.r_max < self.r_min:
            raise ValueError("synth: need d >= 1 and 1 <= r_min <= r_max")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("synth: signal_fraction must lie in (0, 1]")
        if not 0 < self.tumor_fraction <= 1:
            raise ValueError("synth: tumor_fraction must lie in (0, 1]")
        if self.shift <= 0 or self.noise_scale <= 0:
            raise ValueError("synth: shift and noise_scale must be positive")

    def class_quota(self, n: int) -> tuple[int, int]:
        """(normal, tumor) counts for a split of size ``n``."""
        n_tumor = int(round(self.tumor_fraction * n))
        return n - n_tumor, n_tumor

    def signal_direction(self) -> np.ndarray:
        u = np.random.default_rng([self.seed, 0xD1]).standard_normal(self.d)
        return u / np.linalg.norm(u)


def synth_bag(spec: SynthSpec, rng: np.random.Generator, label: int, slide_id: str) -> FeatureBag:
    r = int(rng.integers(spec.r_min, spec.r_max + 1))
    feats = rng.standard_normal((r, spec.d)) * spec.noise_scale
    if label == 1:
        k = math.ceil(spec.signal_fraction * r)
        rows = rng.choice(r, size=k, replace=False)
        feats[rows] += spec.shift * spec.signal_direction()
    return FeatureBag(slide_id, feats.astype(np.float32), label)


def synth_bags(spec: SynthSpec) -> list[tuple[FeatureBag, str]]:
    """Generate (bag, split) pairs in memory; deterministic in ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xBA6])
    out: list[tuple[FeatureBag, str]] = []
    for split, n in (("pretrain", spec.n_pretrain), ("pool", spec.n_pool), ("test", spec.n_test)):
        n_normal, n_tumor = spec.class_quota(n)
        labels = np.array([0] * n_normal + [1] * n_tumor)
        rng.shuffle(labels)
        for i, y in enumerate(labels):
            out.append((synth_bag(spec, rng, int(y), f"{split}_{i:04d}"), split))
    if spec.pretrain_overlaps_pool:
        # the pool slides are also handed to pre-training (labels unused there)
        out += [
            (FeatureBag("pretrain_" + b.slide_id, b.features, b.label), "pretrain")
            for b, s in list(out)
            if s == "pool"
        ]
    return out


def synth_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write every synthetic bag plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag, split in synth_bags(spec):
        rel = os.path.join("bags", f"{bag.slide_id}.pmx")
        save_bag(bag, out_dir / rel)
        entries.append(ManifestEntry(bag.slide_id, rel, bag.label, split))
    manifest = DatasetManifest(entries, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
