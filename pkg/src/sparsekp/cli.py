"""Command-line entry point: ``sparsekp <command> [options]``.

Exit codes: 0 success, 1 invalid configuration or arguments (nothing written),
2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .codec import DecodeParams
from .errors import (BoundsError, CheckpointError, ConfigError, DimensionError, GenerationError,
                     InputError, SparseKPError)
from .losses import ABLATION_ROWS, VARIANTS, LossConfig, finite_difference_gradcheck, make_ablation_config
from .model import load_checkpoint
from .synth import DatasetManifest, build_dataset
from .trainer import train

log = logging.getLogger("sparsekp")

GRADCHECK_TOL = 1e-5
VALIDATION_ERRORS = (ConfigError, InputError, BoundsError, DimensionError)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _seed_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def load_config(args) -> bench.RunConfig:
    cfg = bench.RunConfig.load(args.config) if args.config else bench.RunConfig()
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(args.seeds))
    return cfg


def _manifest(cfg: bench.RunConfig) -> DatasetManifest:
    path = Path(cfg.data_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no dataset at {cfg.data_dir} (run gen-data first)")
    return DatasetManifest.read(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg.data_dir)
    man = build_dataset(cfg.scene, cfg.counts, cfg.data_seed, out)
    print(f"wrote {len(man.entries)} samples to {out} "
          + " ".join(f"{s}={len(man.split(s))}" for s in ("train", "val", "test")))
    return 0


def gradcheck_table(trials: int = 1000, seed: int = 0, grad_fn=None) -> list[tuple[str, float]]:
    """``(name, max relative error)`` for every loss variant and every ablation row."""
    rows = [(v, LossConfig(v)) for v in VARIANTS]
    rows += [(f"ablation:{r}", make_ablation_config(r)) for r in ABLATION_ROWS]
    return [(name, finite_difference_gradcheck(c, trials, seed, grad_fn=grad_fn)) for name, c in rows]


def _corrupted_grad(h, z, cfg, n):
    from .losses import loss_pixels
    return loss_pixels(h, z, cfg, n)[1] * (1.0 + 1e-3)


def cmd_gradcheck(args) -> int:
    table = gradcheck_table(args.trials, args.seed, _corrupted_grad if args.corrupt_grad else None)
    width = max(len(n) for n, _ in table)
    bad = 0
    for name, err in table:
        ok = err < GRADCHECK_TOL
        bad += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    if bad:
        print(f"{bad} of {len(table)} entries exceed {GRADCHECK_TOL:g}", file=sys.stderr)
        return 1
    return 0


def _single_loss(args) -> tuple[str, LossConfig]:
    names = args.losses or ["CragAndTail"]
    if len(names) != 1:
        raise ConfigError("this command takes exactly one loss")
    name = names[0]
    if name in ABLATION_ROWS and name not in VARIANTS:
        return name, make_ablation_config(name)
    return name, bench.parse_loss_names([name])[name]


def cmd_train(args) -> int:
    cfg = load_config(args)
    name, loss = _single_loss(args)
    man = _manifest(cfg)
    out = Path(args.out or Path(cfg.out_dir) / f"train_{name}_seed{cfg.seeds[0]}")
    tcfg = replace(cfg.train, loss=loss, seed=cfg.seeds[0])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {**cfg.to_dict(), "train": tcfg.to_dict()})
    _, tlog = train(man, cfg.model, tcfg, out, cfg.codec,
                    progress=lambda r: log.info("epoch %d train %.5f val %.5f lr %.4g",
                                                r.epoch, r.train_loss, r.val_loss, r.lr))
    print(f"best epoch {tlog.best_epoch} val loss {tlog.best_val_loss:.6f} ({tlog.stop_reason}); "
          f"checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    name, loss = _single_loss(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    if args.split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {args.split!r}")
    man = _manifest(cfg)
    decode = cfg.decode_params(loss.variant)
    decode = DecodeParams(window=decode.window, k=args.k if args.k is not None else decode.k,
                          t=args.t if args.t is not None else decode.t, activation=decode.activation)
    state = load_checkpoint(ckpt)
    report = bench.evaluate_state(state, man.load(args.split), decode)
    out = Path(args.out or ckpt.parent)
    csv_path, _ = report.write(out, f"metrics_{args.split}")
    print(" ".join(f"{k}={v:.4f}" for k, v in report.summary_row().items()) + f"  -> {csv_path}")
    return 0


def _run_harness(args, named: dict, stem: str, title: str) -> int:
    cfg = load_config(args)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    man = _manifest(cfg)
    out = Path(args.out or Path(cfg.out_dir) / stem)
    data = bench.BenchData.from_manifest(man, cfg.codec)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", cfg.to_dict())
    rows = bench.run_matrix(cfg, named, cfg.seeds, data, out / "runs", args.threads)
    failed = [r for r in rows if r.get("failed")]
    all_rows = rows + bench.median_rows(rows)
    csv_path = bench.write_results_csv(all_rows, out / f"{stem}.csv")
    (out / f"{stem}.svg").write_text(bench.render_bar_svg(all_rows, title))
    if failed:
        _write_json(out / "failures.json", [{"loss": r["loss"], "seed": r["seed"], "error": r["failed"]}
                                            for r in failed])
    for r in all_rows:
        if r["seed"] == "median":
            print(f"{r['loss']:<20} " + " ".join(f"{c}={r[c]:.4f}" for c in bench.METRIC_COLS))
    print(f"results: {csv_path}" + (f" ({len(failed)} failed runs)" if failed else ""))
    return 0


def cmd_benchmark(args) -> int:
    named = bench.parse_loss_names(args.losses or ["MSE", "Hill", "CragAndTail"])
    return _run_harness(args, named, "benchmark", "median over seeds per loss")


def cmd_ablate(args) -> int:
    named = bench.parse_ablation_rows(args.rows or list(ABLATION_ROWS))
    return _run_harness(args, named, "ablation", "median over seeds per ablation row")


def cmd_report(args) -> int:
    src = Path(args.csv)
    if not src.is_file():
        raise ConfigError(f"{src} does not exist")
    rows = bench.read_results_csv(src)
    out = Path(args.out) if args.out else src.with_suffix(".svg")
    out.write_text(bench.render_bar_svg(rows, f"median over seeds ({src.stem})"))
    print(f"wrote {out}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsekp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="run config JSON (defaults used when omitted)")
        sp.add_argument("--out", help="output directory")
        if seeds:
            sp.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 0,1,2")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp, seeds=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--losses", type=_csv_list, help="loss variant or ablation row")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(sp, seeds=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--losses", type=_csv_list, help="loss the checkpoint was trained with (picks decoding)")
    sp.add_argument("--split", default="test")
    sp.add_argument("--t", type=float, help="override the decode threshold")
    sp.add_argument("--k", type=int, help="override the top-k cap")
    sp.set_defaults(func=cmd_eval)

    for name, func, flag in (("benchmark", cmd_benchmark, "--losses"), ("ablate", cmd_ablate, "--rows")):
        sp = sub.add_parser(name, help=f"train and score every ({flag[2:-1]}, seed) pair")
        common(sp)
        sp.add_argument(flag, type=_csv_list)
        sp.add_argument("--threads", type=int, default=1, help="parallel training processes")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="re-render the plot from a results CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", help="SVG path (default: next to the CSV)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SparseKPError, OSError, GenerationError, CheckpointError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
