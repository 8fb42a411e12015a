"""``premix`` command line: synth, pretrain, finetune, al, eval.

Every command reads one JSON run config (``--config``) and writes its
artifacts under ``--out``. Exit status is 0 on success; any error prints one
``premix: error: ...`` line to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from premix import active, train
from premix.bagio import load_manifest, synth_dataset
from premix.checkpoint import load_checkpoint, save_checkpoint
from premix.config import RunConfig, load_config, save_config, substream

log = logging.getLogger("premix")


class MetricsLog:
    """Append-only JSON-lines metrics file tagged with the config hash."""

    def __init__(self, path: Path, config_hash: str) -> None:
        self.path = path
        self.config_hash = config_hash
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line and json.loads(line).get("config_hash") != config_hash:
                    raise ValueError(f"{path} holds metrics from a different config; use another --out")

    def __call__(self, rec: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({**rec, "config_hash": self.config_hash}) + "\n")


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        section = "pretrain" if args.command == "pretrain" else "finetune"
        cfg = cfg.replace(**{section: {"epochs": args.epochs}})
    if getattr(args, "manifest", None):
        cfg = cfg.replace(data={"manifest": args.manifest})
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _manifest(cfg: RunConfig):
    return load_manifest(cfg.data.manifest)


def _pretrained(args, cfg: RunConfig):
    if not getattr(args, "init", None):
        return None
    params, meta = load_checkpoint(args.init, expect=cfg.arch)
    log.info("initialising from %s (epoch %s, config %s)", args.init, meta["epoch"], meta["config_hash"])
    return params


def cmd_synth(args) -> int:
    cfg, out = _prepare(args)
    spec = cfg.synth
    if args.seed is not None:
        spec = cfg.replace(synth={"seed": args.seed}).synth
    manifest = synth_dataset(spec, out)
    counts = {}
    for e in manifest.entries:
        key = f"{e.split}/{'tumor' if e.label == 1 else 'normal'}"
        counts[key] = counts.get(key, 0) + 1
    print(json.dumps({"manifest": str(out / "manifest.json"), "counts": counts}, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg, out = _prepare(args)
    bags = _manifest(cfg).load_split("pretrain")
    if not bags:
        raise ValueError("pretrain split is empty")
    params = train.init_for_finetune(cfg, cfg.seed, None)
    save_config(cfg, out / "config.json")
    sink = MetricsLog(out / "metrics.jsonl", cfg.hash())
    train.pretrain(params, bags, cfg, sink=sink)
    save_checkpoint(out / "pretrain.pmck", params, cfg.pretrain.epochs, cfg.hash())
    print(json.dumps({"checkpoint": str(out / "pretrain.pmck")}))
    return 0


def _labeled_pool(cfg: RunConfig, manifest):
    pool = manifest.load_split("pool")
    n = cfg.finetune.n_labeled
    if n is not None:
        pick = sorted(substream(cfg.seed, "finetune-labels").choice(len(pool), size=n, replace=False))
        pool = [pool[i] for i in pick]
    return pool


def cmd_finetune(args) -> int:
    cfg, out = _prepare(args)
    manifest = _manifest(cfg)
    train_bags = _labeled_pool(cfg, manifest)
    test_bags = manifest.load_split("test")
    params = train.init_for_finetune(cfg, cfg.seed, _pretrained(args, cfg))
    save_config(cfg, out / "config.json")
    sink = MetricsLog(out / "metrics.jsonl", cfg.hash())
    recs = train.finetune(params, train_bags, cfg, test_bags, sink=sink)
    save_checkpoint(out / "finetune.pmck", params, cfg.finetune.epochs, cfg.hash())
    print(json.dumps({"checkpoint": str(out / "finetune.pmck"), "accuracy": recs[-1].get("accuracy")}))
    return 0


def cmd_al(args) -> int:
    cfg, out = _prepare(args)
    manifest = _manifest(cfg)
    pool, test = manifest.load_split("pool"), manifest.load_split("test")
    pretrained = _pretrained(args, cfg)
    strategy = args.strategy or cfg.al.strategy
    save_config(cfg, out / "config.json")
    if strategy == "all":
        grid, records = train.al_sweep(cfg, pool, test, pretrained)
        budgets = [cfg.al.initial + cfg.al.budget * i for i in range(cfg.al.iterations)]
        (out / "grid.json").write_text(
            json.dumps({"budgets": budgets, "accuracy": grid}, indent=1), encoding="utf-8"
        )
    else:
        records = train.run_al(cfg, strategy, pool, test, pretrained).history
    active.write_history(records, out / "history.jsonl")
    print(json.dumps({"history": str(out / "history.jsonl"), "iterations": len(records)}))
    return 0


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    params, _ = load_checkpoint(args.checkpoint, expect=cfg.arch)
    bags = _manifest(cfg).load_split(args.split)
    acc = train.evaluate(params, bags)
    print(json.dumps({"split": args.split, "n": len(bags), "accuracy": acc}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="premix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs/latest")
        p.add_argument("--manifest", help="override data.manifest")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="Barlow Twins slide-mixing pre-training")
    common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the classifier path")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--init", help="pre-trained checkpoint (default: scratch)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("al", help="active-learning loop or full strategy sweep")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--init", help="pre-trained checkpoint (default: scratch)")
    p.add_argument("--strategy", choices=active.STRATEGIES + ("all",))
    p.set_defaults(func=cmd_al)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("pretrain", "pool", "test"))
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one diagnostic line, nonzero exit
        print(f"premix: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
