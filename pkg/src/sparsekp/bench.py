"""Run configuration and the (loss, seed) benchmark harness shared by the CLI and scripts."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import CodecParams, DecodeParams, decode_prediction
from .errors import ConfigError, DivergenceError
from .evalkit import evaluate_predictions
from .losses import ABLATION_ROWS, VARIANTS, LossConfig, make_ablation_config
from .model import ModelSpec, forward
from .synth import SPLITS, DatasetManifest, SceneSpec
from .trainer import Batchable, TrainConfig, train_on_data

log = logging.getLogger(__name__)

METRIC_COLS = ["locP", "locR", "locF1", "mlP", "mlR", "mlF1"]
RESULT_COLS = ["loss", "seed"] + METRIC_COLS
# variants whose raw output is regressed directly onto the [0, 1] target
RAW_OUTPUT_VARIANTS = ("MSE", "MaskedMSE")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    scene: SceneSpec = SceneSpec()
    counts: dict = field(default_factory=lambda: {"train": 240, "val": 60, "test": 60})
    data_seed: int = 0
    # standardised inputs and a damped output layer keep lr 0.1 stable for every loss
    model: ModelSpec = ModelSpec(input_mean=0.5, input_std=0.25, head_init_scale=0.1)
    codec: CodecParams = CodecParams()
    window: int = 5
    k: int = 30
    thresholds: dict = field(default_factory=lambda: {"MSE": 0.2, "default": 0.3})
    train: TrainConfig = TrainConfig(lr=0.1, max_epochs=15, compute_dtype="float32")
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if "default" not in self.thresholds:
            raise ConfigError("thresholds needs a 'default' entry")
        for name, t in self.thresholds.items():
            if name != "default" and name not in VARIANTS:
                raise ConfigError(f"threshold for unknown loss {name!r}")
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"threshold for {name} must lie in [0, 1], got {t}")
        if set(self.counts) != set(SPLITS) or min(self.counts.values()) < 1:
            raise ConfigError(f"counts needs positive entries for exactly {SPLITS}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        DecodeParams(window=self.window, k=self.k)

    def decode_params(self, variant: str) -> DecodeParams:
        """Threshold and activation for decoding a model trained with ``variant``."""
        t = self.thresholds.get(variant, self.thresholds["default"])
        act = "identity" if variant in RAW_OUTPUT_VARIANTS else "sigmoid"
        return DecodeParams(window=self.window, k=self.k, t=t, activation=act)

    def to_dict(self) -> dict:
        return {
            "data_dir": self.data_dir, "out_dir": self.out_dir, "scene": self.scene.to_dict(),
            "counts": dict(self.counts), "data_seed": self.data_seed, "model": asdict(self.model),
            "codec": asdict(self.codec), "window": self.window, "k": self.k,
            "thresholds": dict(self.thresholds), "train": self.train.to_dict(), "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from a (possibly partial) dict; nested sections merge over the defaults."""
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        base = cls()
        try:
            if "scene" in d:
                d["scene"] = SceneSpec.from_dict({**base.scene.to_dict(), **d["scene"]})
            if "model" in d:
                d["model"] = ModelSpec(**{**asdict(base.model), **d["model"]})
            if "codec" in d:
                d["codec"] = CodecParams(**d["codec"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict({**base.train.to_dict(), **d["train"]})
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)


def parse_loss_names(names) -> dict[str, LossConfig]:
    """Map benchmark names (loss variants) to configs; unknown names raise ConfigError."""
    out = {}
    for n in names:
        if n not in VARIANTS:
            raise ConfigError(f"unknown loss {n!r}; valid losses: {', '.join(VARIANTS)}")
        out[n] = LossConfig(n)
    return out


def parse_ablation_rows(names) -> dict[str, LossConfig]:
    out = {}
    for n in names:
        if n not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {n!r}; valid rows: {', '.join(ABLATION_ROWS)}")
        out[n] = make_ablation_config(n)
    return out


@dataclass
class BenchData:
    train: Batchable
    val: Batchable
    test: list

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, codec: CodecParams) -> "BenchData":
        return cls(Batchable.from_samples(manifest.load("train"), codec),
                   Batchable.from_samples(manifest.load("val"), codec), manifest.load("test"))


def predict(state, samples, dtype=np.float64, chunk: int = 32) -> np.ndarray:
    images = np.stack([s.image for s in samples])
    return np.concatenate([forward(state, images[i:i + chunk], dtype)[0]
                           for i in range(0, len(images), chunk)])


def evaluate_state(state, samples, decode: DecodeParams, dtype=np.float64):
    preds = [decode_prediction(o, decode) for o in predict(state, samples, dtype)]
    return evaluate_predictions(preds, samples)


def run_one(cfg: RunConfig, name: str, loss: LossConfig, seed: int, data: BenchData, out_dir=None) -> dict:
    """Train one (loss, seed) pair and score it on the test split.

    Divergence is caught and reported as a row of NaN metrics.
    """
    tcfg = replace(cfg.train, loss=loss, seed=seed)
    run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
    try:
        state, _ = train_on_data(data.train, data.val, cfg.model, tcfg, run_dir)
    except DivergenceError as exc:
        log.warning("run %s seed %d failed: %s", name, seed, exc)
        return {"loss": name, "seed": seed, **{c: math.nan for c in METRIC_COLS}, "failed": str(exc)}
    report = evaluate_state(state, data.test, cfg.decode_params(loss.variant), np.dtype(tcfg.compute_dtype).type)
    if run_dir is not None:
        report.write(run_dir, "test_metrics")
    return {"loss": name, "seed": seed, **report.summary_row()}


def _run_star(job):
    return run_one(*job)


def run_matrix(cfg: RunConfig, named_losses: dict[str, LossConfig], seeds, data: BenchData,
               out_dir=None, threads: int = 1) -> list[dict]:
    """Every (loss, seed) pair in loss-major order; runs are independent."""
    jobs = [(cfg, n, lc, s, data, out_dir) for n, lc in named_losses.items() for s in seeds]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(threads) as ex:
            return list(ex.map(_run_star, jobs))
    return [_run_star(j) for j in jobs]


def median_rows(rows: list[dict]) -> list[dict]:
    """One median-over-seeds row per loss, ignoring failed runs."""
    out = []
    for name in dict.fromkeys(r["loss"] for r in rows):
        ok = [r for r in rows if r["loss"] == name and all(math.isfinite(r[c]) for c in METRIC_COLS)]
        med = {c: float(np.median([r[c] for r in ok])) if ok else math.nan for c in METRIC_COLS}
        out.append({"loss": name, "seed": "median", **med})
    return out


def write_results_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(RESULT_COLS)
        for r in rows:
            wr.writerow([r["loss"], r["seed"]] + [repr(float(r[c])) for c in METRIC_COLS])
    return path


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or list(rows[0]) != RESULT_COLS:
        raise ConfigError(f"{path}: expected columns {RESULT_COLS}")
    return [{"loss": r["loss"], "seed": r["seed"], **{c: float(r[c]) for c in METRIC_COLS}} for r in rows]


_BAR_COLORS = {"locP": "#4477aa", "locR": "#66ccee", "locF1": "#228833"}


def render_bar_svg(rows: list[dict], title: str = "", metrics=("locP", "locR", "locF1")) -> str:
    """Grouped bar chart of median metrics per loss as a standalone SVG string."""
    med = [r for r in rows if r["seed"] == "median"] or median_rows(rows)
    bar_w, gap, plot_h, left, top = 18, 24, 200, 40, 30
    group_w = bar_w * len(metrics) + gap
    width = left + group_w * len(med) + 20
    height = top + plot_h + 60
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
             f'<text x="{left}" y="16" font-size="12">{title}</text>']
    for v in (0.0, 0.5, 1.0):
        y = top + plot_h * (1 - v)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - 10}" y2="{y:.1f}" stroke="#ccc"/>')
        parts.append(f'<text x="{left - 4}" y="{y + 3:.1f}" text-anchor="end">{v:.1f}</text>')
    for gi, r in enumerate(med):
        x0 = left + gap / 2 + gi * group_w
        for mi, m in enumerate(metrics):
            v = r[m] if math.isfinite(r[m]) else 0.0
            h = plot_h * min(max(v, 0.0), 1.0)
            parts.append(f'<rect x="{x0 + mi * bar_w:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w - 2}" '
                         f'height="{h:.1f}" fill="{_BAR_COLORS.get(m, "#888")}"><title>{r["loss"]} {m} '
                         f'{v:.4f}</title></rect>')
        parts.append(f'<text x="{x0 + bar_w * len(metrics) / 2:.1f}" y="{top + plot_h + 14}" '
                     f'text-anchor="middle">{r["loss"]}</text>')
    for mi, m in enumerate(metrics):
        x = left + mi * 70
        parts.append(f'<rect x="{x}" y="{height - 22}" width="10" height="10" fill="{_BAR_COLORS.get(m, "#888")}"/>')
        parts.append(f'<text x="{x + 14}" y="{height - 13}">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
