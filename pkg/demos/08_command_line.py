"""
The premix command line
=======================

Every stage is also a subcommand that reads one JSON config and writes its
artifacts under --out. This script drives them in-process with the smoke
config; the same calls work from a shell as ``premix <command> ...``.
"""

import json
import tempfile
from pathlib import Path

from premix.cli import main
from premix.config import load_config, save_config

work = Path(tempfile.mkdtemp())
cfg = load_config("configs/smoke.json").replace(data={"manifest": str(work / "data" / "manifest.json")})
save_config(cfg, work / "run.json")
conf = ["--config", str(work / "run.json")]

main(["synth", *conf, "--out", str(work / "data")])
main(["pretrain", *conf, "--out", str(work / "pre")])
main(["finetune", *conf, "--out", str(work / "ft"), "--init", str(work / "pre" / "pretrain.pmck")])
main(["eval", *conf, "--out", str(work / "ft"), "--checkpoint", str(work / "ft" / "finetune.pmck")])
main(["al", *conf, "--out", str(work / "al"), "--strategy", "all", "--epochs", "1"])

print(json.dumps(json.loads((work / "al" / "grid.json").read_text()), indent=1))
