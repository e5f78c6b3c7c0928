"""Component ablation of the crag-and-tail loss on the default synthetic benchmark.

    python scripts/run_ablation.py --root results/ablation --rows default,lambda1,lambda0
"""
import argparse
import json
import sys
from pathlib import Path

from sparsekp.cli import main
from sparsekp.losses import ABLATION_ROWS


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="results/ablation")
    p.add_argument("--rows", default=",".join(ABLATION_ROWS))
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
    sys.exit(main(["-v", "ablate", "--config", str(cfg), "--rows", args.rows, "--seeds", args.seeds]))
