"""Pre-training, fine-tuning, evaluation and the active-learning driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from premix import active
from premix.aggregator import (
    AggregatorParams,
    ForwardCache,
    backward,
    init_params,
    logits_forward,
    predict,
    projection_forward,
)
from premix.augment import augment_view
from premix.bagio import FeatureBag, pad_batch
from premix.config import RunConfig, substream
from premix.losses import cross_entropy, cross_entropy_mixed, original_loss, total_pretrain_loss
from premix.mixing import apply_span_mix, plan_span_mix, sample_lambda
from premix.optim import OptimState, ScheduleSpec, adam_step, lars_step, step_lr, warmup_cosine_lr

log = logging.getLogger(__name__)

MetricsSink = Callable[[dict], None]


def _dtype(cfg: RunConfig):
    return np.dtype(cfg.data.dtype)


def _batches(n: int, size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for s in range(0, n, size):
        chunk = order[s : s + size]
        if len(chunk) >= min_size:
            yield chunk


def feature_std(bags: Sequence[FeatureBag]) -> float:
    return float(np.concatenate([b.features.ravel() for b in bags]).std())


def pretrain_schedule(cfg: RunConfig) -> ScheduleSpec:
    p = cfg.pretrain
    return ScheduleSpec(
        base_lr={"weights": p.lr_weights, "bias_and_norm": p.lr_bias_and_norm},
        batch_size=p.batch_size,
        warmup_epochs=min(p.warmup_epochs, p.epochs),
        total_epochs=p.epochs,
        final_factor=p.final_factor,
    )


def pretrain_step(params: AggregatorParams, bags: Sequence[FeatureBag], cfg: RunConfig,
                  aug_rng: np.random.Generator, mix_rng: np.random.Generator, noise_sigma: float):
    """Loss graph for one pre-training batch; returns ``(cache, components)``."""
    dtype = params.dtype
    view_a = [augment_view(b, aug_rng, cfg.augment, noise_sigma) for b in bags]
    view_b = [augment_view(b, aug_rng, cfg.augment, noise_sigma) for b in bags]
    xa, xb = pad_batch(view_a, dtype=dtype), pad_batch(view_b, dtype=dtype)
    lv = params.leaves()
    za, _ = projection_forward(params, xa, True, lv)
    zb, _ = projection_forward(params, xb, True, lv)
    w = cfg.loss
    if not cfg.pretrain.span_mixing or (w.beta == 0 and w.gamma == 0):
        src = original_loss(za, zb, w.lambda_bt)
        total = src * w.alpha
        return ForwardCache(lv, [], total), {"source": src.item(), "mix_source": 0.0, "mix": 0.0}
    lam_raw = sample_lambda(mix_rng, cfg.pretrain.beta_a, cfg.pretrain.beta_b, len(bags))
    plan_a = plan_span_mix(xa.valid, lam_raw, mix_rng)
    plan_b = plan_span_mix(xb.valid, lam_raw, mix_rng)
    za_mix, _ = projection_forward(params, apply_span_mix(xa, plan_a), True, lv)
    zb_mix, _ = projection_forward(params, apply_span_mix(xb, plan_b), True, lv)
    total, parts = total_pretrain_loss(za, zb, za_mix, zb_mix, plan_b.lam, w)
    return ForwardCache(lv, [], total), {k: v.item() for k, v in parts.items()}


def pretrain(params: AggregatorParams, bags: Sequence[FeatureBag], cfg: RunConfig,
             seed: int | None = None, sink: MetricsSink | None = None) -> list[dict]:
    """Barlow Twins slide-mixing pre-training with LARS; updates ``params`` in place."""
    seed = cfg.seed if seed is None else seed
    if len(bags) < 2:
        raise ValueError("pre-training needs at least two bags")
    sched = pretrain_schedule(cfg)
    data_rng, aug_rng, mix_rng = (substream(seed, n) for n in ("pretrain-data", "augment", "mixing"))
    sigma = 0.1 * feature_std(bags)
    state = OptimState()
    records = []
    p = cfg.pretrain
    for epoch in range(p.epochs):
        lr = warmup_cosine_lr(sched, epoch)
        sums = {"total": 0.0, "source": 0.0, "mix_source": 0.0, "mix": 0.0}
        n_batches = 0
        for idx in _batches(len(bags), p.batch_size, data_rng, min_size=2):
            cache, parts = pretrain_step(params, [bags[i] for i in idx], cfg, aug_rng, mix_rng, sigma)
            total = cache.output.item()
            if not math.isfinite(total):
                raise FloatingPointError(f"non-finite pre-training loss at epoch {epoch}: {parts}")
            grads, _ = backward(cache)
            lars_step(params.tensors, grads, state, lr, p.weight_decay, p.momentum,
                      p.trust_coeff, group=params.group)
            sums["total"] += total
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        rec = {"phase": "pretrain", "epoch": epoch, "loss": sums["total"] / n_batches,
               "components": {k: sums[k] / n_batches for k in ("source", "mix_source", "mix")},
               "lr": lr}
        records.append(rec)
        if sink:
            sink(rec)
        log.info("pretrain epoch %d loss %.4f", epoch, rec["loss"])
    return records


# -- downstream ----------------------------------------------------------------


def _labels(bags: Sequence[FeatureBag]) -> np.ndarray:
    ys = [b.label for b in bags]
    if any(y is None for y in ys):
        raise ValueError("fine-tuning needs labeled bags")
    return np.asarray(ys, dtype=np.int64)


def evaluate(params: AggregatorParams, bags: Sequence[FeatureBag], chunk: int = 64) -> float:
    """Accuracy = correct / total."""
    if not bags:
        raise ValueError("cannot evaluate on an empty split")
    probs, _ = predict_bags(params, bags, chunk)
    return float((probs.argmax(axis=1) == _labels(bags)).mean())


def predict_bags(params: AggregatorParams, bags: Sequence[FeatureBag], chunk: int = 64):
    probs, embs = [], []
    for s in range(0, len(bags), chunk):
        p, e = predict(params, pad_batch(bags[s : s + chunk], dtype=params.dtype))
        probs.append(p)
        embs.append(e)
    return np.concatenate(probs), np.concatenate(embs)


def init_for_finetune(cfg: RunConfig, seed: int, pretrained: AggregatorParams | None) -> AggregatorParams:
    """Scratch init; with ``pretrained``, every tensor but the classifier is copied over."""
    params = init_params(substream(seed, "init").integers(2**31), cfg.arch, _dtype(cfg))
    if pretrained is not None:
        if pretrained.config != cfg.arch:
            raise ValueError("pre-trained checkpoint architecture does not match the config")
        for k, v in pretrained.tensors.items():
            if not k.startswith("cls."):
                params.tensors[k] = v.astype(params.dtype, copy=True)
        params.buffers = {k: v.astype(params.dtype, copy=True) for k, v in pretrained.buffers.items()}
    return params


def finetune(params: AggregatorParams, train_bags: Sequence[FeatureBag], cfg: RunConfig,
             test_bags: Sequence[FeatureBag] = (), seed: int | None = None,
             sink: MetricsSink | None = None) -> list[dict]:
    """Adam fine-tuning of encoder, pooling and classifier; updates ``params`` in place."""
    seed = cfg.seed if seed is None else seed
    f = cfg.finetune
    y_all = _labels(train_bags)
    data_rng, mix_rng = substream(seed, "finetune-data"), substream(seed, "finetune-mix")
    trainable = {k: v for k, v in params.tensors.items() if not k.startswith("proj")}
    state = OptimState()
    records = []
    for epoch in range(f.epochs):
        lr = step_lr(f.lr, epoch, f.step_size, f.gamma)
        tot, nb = 0.0, 0
        for idx in _batches(len(train_bags), f.batch_size, data_rng):
            batch = pad_batch([train_bags[i] for i in idx], dtype=params.dtype)
            y = y_all[idx]
            mix = cfg.mix.draw(mix_rng)
            lv = params.leaves()
            logits, _ = logits_forward(params, batch, mix, lv)
            if mix is None:
                loss = cross_entropy(logits, y)
            else:
                loss = cross_entropy_mixed(logits, y, y[::-1], mix.lam)
            grads, _ = backward(ForwardCache(lv, [], loss))
            adam_step(trainable, {k: grads[k] for k in trainable}, state, lr, f.weight_decay)
            tot += loss.item()
            nb += 1
        rec = {"phase": "finetune", "epoch": epoch, "loss": tot / nb, "lr": {"all": lr}}
        if test_bags and f.eval_every and ((epoch + 1) % f.eval_every == 0 or epoch == f.epochs - 1):
            rec["accuracy"] = evaluate(params, test_bags)
        records.append(rec)
        if sink:
            sink(rec)
    return records


# -- active learning -------------------------------------------------------------


@dataclass
class _Fitted:
    params: AggregatorParams
    bags: Mapping[str, FeatureBag]
    test_bags: Sequence[FeatureBag]

    def snapshot(self, ids):
        ids = list(ids)
        probs, embs = predict_bags(self.params, [self.bags[i] for i in ids])
        return active.PoolSnapshot(ids, probs, embs)

    def test_accuracy(self) -> float:
        return evaluate(self.params, self.test_bags)


def make_trainer(cfg: RunConfig, pool: Sequence[FeatureBag], test: Sequence[FeatureBag],
                 pretrained: AggregatorParams | None, seed: int):
    """Cold-start trainer for :func:`premix.active.al_loop`."""
    by_id = {b.slide_id: b for b in pool}

    def train(labeled: Mapping[str, int], iteration: int) -> _Fitted:
        train_bags = [FeatureBag(i, by_id[i].features, y) for i, y in sorted(labeled.items())]
        params = init_for_finetune(cfg, seed, pretrained)
        quiet = cfg.replace(finetune={"eval_every": 0})
        finetune(params, train_bags, quiet, seed=seed * 1000 + iteration)
        return _Fitted(params, by_id, test)

    return train


def run_al(cfg: RunConfig, strategy: str, pool: Sequence[FeatureBag], test: Sequence[FeatureBag],
           pretrained: AggregatorParams | None = None, seed: int | None = None) -> active.ALState:
    seed = cfg.seed if seed is None else seed
    held = {b.slide_id: b.label for b in pool}
    return active.al_loop(
        strategy, [b.slide_id for b in pool], held.get,
        make_trainer(cfg, pool, test, pretrained, seed),
        budget=cfg.al.budget, initial=cfg.al.initial, iterations=cfg.al.iterations, seed=seed,
    )


def al_sweep(cfg: RunConfig, pool, test, pretrained=None, seed: int | None = None,
             strategies: Sequence[str] = active.STRATEGIES) -> tuple[dict[str, list[float]], list[dict]]:
    """Every strategy through the loop; returns ``(grid, history records)``."""
    grid, records = {}, []
    for s in strategies:
        state = run_al(cfg, s, pool, test, pretrained, seed)
        grid[s] = [h["test_accuracy"] for h in state.history]
        records += state.history
    return grid, records
