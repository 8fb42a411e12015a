"""Budgeted active learning: five acquisition functions, random sampling, and the loop.

Selectors work on a :class:`PoolSnapshot` (per-slide class probabilities and
slide embeddings from the current model) and return slide ids. Ties always
break towards the smaller slide id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

STRATEGIES = ("random", "entropy", "badge", "coreset", "kmeanspp", "cdal")
_PROB_EPS = 1e-12
_TIE_RTOL = 1e-12


@dataclass
class PoolSnapshot:
    ids: list[str]
    probs: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.ids)
        if self.probs.shape[0] != n or self.embeddings.shape[0] != n:
            raise ValueError("snapshot arrays must have one row per id")
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("probabilities must be non-negative and sum to 1")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def sorted(self) -> "PoolSnapshot":
        order = np.argsort(np.asarray(self.ids, dtype=object), kind="stable")
        return PoolSnapshot([self.ids[i] for i in order], self.probs[order], self.embeddings[order])


def _check_k(n: int, k: int) -> int:
    if n == 0:
        raise ValueError("cannot select from an empty pool")
    if k < 0:
        raise ValueError("k must be non-negative")
    return min(k, n)


def _id_order(ids: Sequence[str]) -> np.ndarray:
    return np.argsort(np.asarray(ids, dtype=object), kind="stable")


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def random_select(ids: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    k = _check_k(len(ids), k)
    ordered = sorted(ids)
    pick = rng.choice(len(ordered), size=k, replace=False)
    return [ordered[i] for i in pick]


def entropy_select(snapshot: PoolSnapshot, k: int) -> list[str]:
    """The ``k`` most uncertain slides by predictive entropy."""
    k = _check_k(len(snapshot), k)
    snap = snapshot.sorted()
    h = entropy(snap.probs)
    order = np.argsort(-h, kind="stable")
    return [snap.ids[i] for i in order[:k]]


def _kmeanspp_indices(x: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    n = len(x)
    if k == 0:
        return []
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a centre
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return chosen


def kmeanspp_select(embeddings, ids: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    """k-means++ seeding: uniform first centre, then D^2-weighted draws."""
    k = _check_k(len(ids), k)
    order = _id_order(ids)
    x = np.asarray(embeddings, dtype=np.float64)[order]
    return [ids[order[i]] for i in _kmeanspp_indices(x, k, rng)]


def _greedy_k_center(dist_to_pool: np.ndarray, pairwise: np.ndarray, k: int) -> list[int]:
    """Repeatedly take the point farthest from everything covered so far."""
    min_dist = dist_to_pool.copy()
    picked: list[int] = []
    for _ in range(k):
        cand = min_dist.copy()
        cand[picked] = -np.inf
        best = cand.max()
        if np.isfinite(best):
            # distances equal up to rounding count as ties; lowest index (id) wins
            cand = cand >= best - _TIE_RTOL * max(1.0, abs(best))
        nxt = int(np.argmax(cand))
        picked.append(nxt)
        min_dist = np.minimum(min_dist, pairwise[nxt])
    return picked


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def coreset_select(
    embeddings, ids: Sequence[str], labeled_embeddings, k: int
) -> list[str]:
    """Greedy k-center over Euclidean distance, seeded by the labeled set."""
    k = _check_k(len(ids), k)
    order = _id_order(ids)
    x = np.asarray(embeddings, dtype=np.float64)[order]
    lab = np.asarray(labeled_embeddings, dtype=np.float64).reshape(-1, x.shape[1])
    seed = _euclidean(x, lab).min(axis=1) if len(lab) else np.full(len(x), np.inf)
    picked = _greedy_k_center(seed, _euclidean(x, x), k)
    return [ids[order[i]] for i in picked]


def badge_embedding(probs, embeddings) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the classifier weights at the predicted label.

    Row ``i`` is ``(p_i - onehot(argmax p_i))`` outer ``h_i``, flattened
    class-major to length ``n_classes * h``.
    """
    p = np.asarray(probs, dtype=np.float64)
    h = np.asarray(embeddings, dtype=np.float64)
    resid = p - np.eye(p.shape[1])[p.argmax(axis=1)]
    return (resid[:, :, None] * h[:, None, :]).reshape(len(p), -1)


def badge_select(snapshot: PoolSnapshot, k: int, rng: np.random.Generator) -> list[str]:
    k = _check_k(len(snapshot), k)
    snap = snapshot.sorted()
    g = badge_embedding(snap.probs, snap.embeddings)
    return [snap.ids[i] for i in _kmeanspp_indices(g, k, rng)]


def symmetric_kl(p, q) -> np.ndarray:
    """Pairwise ``0.5 * (KL(p_i || q_j) + KL(q_j || p_i))``."""
    p = np.clip(np.asarray(p, dtype=np.float64), _PROB_EPS, None)
    q = np.clip(np.asarray(q, dtype=np.float64), _PROB_EPS, None)
    p = p / p.sum(1, keepdims=True)
    q = q / q.sum(1, keepdims=True)
    lp, lq = np.log(p), np.log(q)
    # sum_c (p_c - q_c)(log p_c - log q_c)
    d = (p * lp).sum(1)[:, None] + (q * lq).sum(1)[None, :] - p @ lq.T - lp @ q.T
    return np.maximum(0.5 * d, 0.0)


def cdal_select(snapshot: PoolSnapshot, k: int, labeled_probs=None) -> list[str]:
    """Greedy k-center on symmetric KL between predicted class distributions."""
    k = _check_k(len(snapshot), k)
    snap = snapshot.sorted()
    lab = np.zeros((0, snap.probs.shape[1])) if labeled_probs is None else np.asarray(labeled_probs)
    seed = symmetric_kl(snap.probs, lab).min(axis=1) if len(lab) else np.full(len(snap), np.inf)
    picked = _greedy_k_center(seed, symmetric_kl(snap.probs, snap.probs), k)
    return [snap.ids[i] for i in picked]


def select(
    strategy: str,
    pool: PoolSnapshot,
    labeled: PoolSnapshot,
    k: int,
    rng: np.random.Generator,
) -> list[str]:
    if strategy == "random":
        return random_select(pool.ids, k, rng)
    if strategy == "entropy":
        return entropy_select(pool, k)
    if strategy == "kmeanspp":
        return kmeanspp_select(pool.embeddings, pool.ids, k, rng)
    if strategy == "coreset":
        return coreset_select(pool.embeddings, pool.ids, labeled.embeddings, k)
    if strategy == "badge":
        return badge_select(pool, k, rng)
    if strategy == "cdal":
        return cdal_select(pool, k, labeled.probs)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# -- the loop -----------------------------------------------------------------


class FittedModel(Protocol):
    def snapshot(self, ids: Sequence[str]) -> PoolSnapshot: ...

    def test_accuracy(self) -> float: ...


TrainFn = Callable[[Mapping[str, int], int], FittedModel]


@dataclass
class ALState:
    labeled: dict[str, int] = field(default_factory=dict)
    unlabeled: list[str] = field(default_factory=list)
    budget: int = 20
    history: list[dict] = field(default_factory=list)


def _label(oracle: Callable[[str], int | None], ids: Sequence[str]) -> dict[str, int]:
    out = {}
    for i in ids:
        y = oracle(i)
        if y is None:
            raise ValueError(f"oracle has no label for slide {i!r}")
        out[i] = int(y)
    return out


def al_loop(
    strategy: str,
    pool_ids: Sequence[str],
    oracle: Callable[[str], int | None],
    train: TrainFn,
    budget: int = 20,
    initial: int = 20,
    iterations: int = 5,
    seed: int = 0,
) -> ALState:
    """Random initial draw, then ``iterations - 1`` rounds of ``strategy``.

    The initial draw depends only on ``seed`` and the pool, so every
    strategy starts from the same labeled set. ``train(labeled, iteration)``
    must return a freshly trained model.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if len(pool_ids) < initial:
        raise ValueError(f"pool of {len(pool_ids)} smaller than initial draw {initial}")
    if initial + budget * (iterations - 1) > len(pool_ids):
        raise ValueError("total labeling budget exceeds the pool")
    state = ALState(unlabeled=sorted(pool_ids), budget=budget)
    init_rng = np.random.default_rng([seed, 0xA1])
    pick_rng = np.random.default_rng([seed, 0xA2, STRATEGIES.index(strategy)])

    for it in range(1, iterations + 1):
        if it == 1:
            chosen = random_select(state.unlabeled, initial, init_rng)
            kind = "random"
        else:
            pool_snap = model.snapshot(state.unlabeled)
            lab_snap = model.snapshot(list(state.labeled))
            chosen = select(strategy, pool_snap, lab_snap, min(budget, len(state.unlabeled)), pick_rng)
            kind = strategy
        taken = set(chosen)
        if len(taken) != len(chosen) or not taken <= set(state.unlabeled):
            raise RuntimeError("selector returned duplicate or out-of-pool ids")
        state.labeled.update(_label(oracle, chosen))
        state.unlabeled = [i for i in state.unlabeled if i not in taken]
        model = train(dict(state.labeled), it)
        state.history.append(
            {
                "iter": it,
                "strategy": strategy,
                "acquisition": kind,
                "selected_ids": list(chosen),
                "labeled_count": len(state.labeled),
                "test_accuracy": float(model.test_accuracy()),
            }
        )
    return state


def write_history(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
