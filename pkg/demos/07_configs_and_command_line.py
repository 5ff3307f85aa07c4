"""
Run configs and the mirl command
================================

Runs are described by flat ``section.key = value`` files.  The same entry
point backs the ``mirl`` console script; here it is called in-process.
"""

from pathlib import Path

from mirl.cli import main
from mirl.config import resolve

cfg = resolve("tiny", ["model.segments=4"])
print("tiny preset with G overridden:", cfg.vit)

# An odd segment count cannot be paired, so validation refuses it before any work.
print("exit code for G=3:", main(["pretrain", "--set", "model.segments=3", "--set", "model.depth=9"]))

out = Path("runs/demo07")
code = main(["pretrain", "--config", "tiny", "--set", "optim.steps=20", "--set", "data.num_train=200",
             "--set", "data.num_test=50", "--output", str(out)])
print("pretrain exit code", code, "->", sorted(p.name for p in out.iterdir()))

# The frozen config next to the outputs reproduces the run byte for byte.
main(["pretrain", "--config", str(out / "config.cfg"), "--output", str(out / "again")])
print("rerun identical:", (out / "metrics.jsonl").read_bytes() == (out / "again" / "metrics.jsonl").read_bytes())

print("selftest exit code", main(["selftest"]))
