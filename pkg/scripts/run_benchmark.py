"""Loss comparison on the default synthetic benchmark (MSE vs Hill vs crag-and-tail).

Generates the dataset under --root if it is missing, then trains every
(loss, seed) pair and writes benchmark.csv / benchmark.svg.

    python scripts/run_benchmark.py --root results/bench --seeds 0,1,2,3,4
"""
import argparse
import json
import sys
from pathlib import Path

from sparsekp.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="results/bench")
    p.add_argument("--losses", default="MSE,Hill,CragAndTail")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, default=15)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps({
        "data_dir": str(root / "data"), "out_dir": str(root),
        "train": {"lr": 0.1, "max_epochs": args.epochs, "compute_dtype": "float32"},
    }, indent=1))
    if not (root / "data" / "manifest.json").exists():
        if main(["gen-data", "--config", str(cfg)]):
            sys.exit(2)
    sys.exit(main(["-v", "benchmark", "--config", str(cfg), "--losses", args.losses, "--seeds", args.seeds]))
