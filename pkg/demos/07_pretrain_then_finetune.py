"""
Pre-training, fine-tuning and evaluation on synthetic slides
============================================================

A reduced version of the directional experiment: pre-train on unlabeled
bags, fine-tune with mixup, and compare with training from scratch. A few
epochs keep it under a minute.
"""

from premix import train
from premix.bagio import synth_bags
from premix.config import load_config

cfg = load_config("configs/desk.json").replace(
    synth=dict(n_pretrain=96, n_test=64),
    pretrain=dict(epochs=8, warmup_epochs=2),
    finetune=dict(epochs=15, eval_every=5),
)
split = {"pretrain": [], "pool": [], "test": []}
for bag, s in synth_bags(cfg.synth):
    split[s].append(bag)

pre = train.init_for_finetune(cfg, cfg.seed, None)
for rec in train.pretrain(pre, split["pretrain"], cfg):
    print(f"pretrain epoch {rec['epoch']}: loss {rec['loss']:.2f}")

params = train.init_for_finetune(cfg, cfg.seed, pre)
for rec in train.finetune(params, split["pool"], cfg, split["test"]):
    if "accuracy" in rec:
        print(f"finetune epoch {rec['epoch']}: test accuracy {rec['accuracy']:.3f}")

plain = cfg.replace(mix={"locations": ()})
scratch = train.init_for_finetune(plain, cfg.seed, None)
train.finetune(scratch, split["pool"], plain)
print("scratch, no mixing:", train.evaluate(scratch, split["test"]))
