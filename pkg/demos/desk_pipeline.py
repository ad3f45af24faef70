"""
Generate, pretrain, train, evaluate
===================================

The whole pipeline through the command-line entry point, at a size that
finishes in a few minutes on a laptop CPU. Every step writes its resolved
configuration to ``run_config.json`` in its output folder.
"""

import sys
import tempfile
from pathlib import Path

from residual_reid.cli import main

work = Path(tempfile.mkdtemp(prefix="desk_"))
data = work / "data" / "manifest.csv"

steps = [
    ["generate", "--ids", "20", "--views", "8", "--out", work / "data"],
    ["pretrain", "--data", data, "--steps", "300", "--out", work / "pretrain"],
    ["train", "--data", data, "--init", work / "pretrain" / "vae_pretrain.ckpt",
     "--epochs", "6", "--out", work / "train"],
    ["eval", "--data", data, "--checkpoint", work / "train" / "model.ckpt",
     "--out", work / "eval"],
    ["visualize", "--checkpoint", work / "train" / "model.ckpt", "--data", data,
     "--count", "2", "--out", work / "panels"],
]

for argv in steps:
    print("$ residual-reid", " ".join(str(a) for a in argv))
    code = main([str(a) for a in argv])
    if code != 0:
        sys.exit(code)
    print()

print(f"everything is under {work}")
