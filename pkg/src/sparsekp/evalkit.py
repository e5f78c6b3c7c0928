"""Point-in-mask localization metrics and per-station multilabel metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .codec import KeypointSet
from .errors import AggregationError, InputError
from .synth import N_STATIONS


def connected_components(mask) -> list[np.ndarray]:
    """8-connected components, ordered by their first pixel in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    # ndimage.label numbers components in row-major order of first pixel
    return [labels == i for i in range(1, count + 1)]


def safe_ratio(num: int, den: int, other_err: int) -> float:
    """``num / den``; with ``den == 0`` return 1 if there is no complementary error, else 0."""
    if den == 0:
        return 1.0 if other_err == 0 else 0.0
    return num / den


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _coords(pred):
    if isinstance(pred, KeypointSet):
        return pred.coords()
    return [tuple(map(int, rc)) for rc in pred]


def point_localization_metrics(pred, instances) -> dict:
    """Precision, recall and F1 of predicted points against instance masks.

    A point inside any mask is a true positive (several points in one mask all
    count); a point outside every mask is a false positive; a mask holding no
    point is a false negative.
    """
    pts = _coords(pred)
    masks = [np.asarray(m, dtype=bool) for m in instances]
    if masks:
        h, w = masks[0].shape
        for r, c in pts:
            if not (0 <= r < h and 0 <= c < w):
                raise InputError(f"predicted point {(r, c)} outside {h}x{w} image")
        stack = np.stack(masks)
        rows = np.array([r for r, _ in pts], dtype=np.int64)
        cols = np.array([c for _, c in pts], dtype=np.int64)
        hit = stack[:, rows, cols] if pts else np.zeros((len(masks), 0), dtype=bool)
        tp = int(hit.any(axis=0).sum())
        fn = int((~hit.any(axis=1)).sum())
    else:
        tp, fn = 0, 0
    fp = len(pts) - tp
    p = safe_ratio(tp, tp + fp, fn)
    r = safe_ratio(tp, tp + fn, fp)
    return {"precision": p, "recall": r, "f1": f1_score(p, r), "tp": tp, "fp": fp, "fn": fn}


def aggregate_localization(per_image) -> tuple[float, float, float]:
    rows = list(per_image)
    if not rows:
        raise AggregationError("cannot average an empty list of per-image metrics")
    arr = np.array([[float(x) for x in row[:3]] for row in rows])
    m = arr.mean(axis=0)
    return float(m[0]), float(m[1]), float(m[2])


def predicted_presence(pred, station_map) -> np.ndarray:
    flags = np.zeros(N_STATIONS, dtype=np.int64)
    for r, c in _coords(pred):
        flags[station_map[r, c] - 1] = 1
    return flags


def multilabel_station_metrics(preds, station_maps, gt_presence) -> dict:
    """Per-station binary P/R/F1 over images, then the unweighted station mean."""
    if not (len(preds) == len(station_maps) == len(gt_presence)):
        raise InputError("predictions, station maps and presence flags must align per image")
    pred_flags, gt_flags = [], []
    for pred, smap, gt in zip(preds, station_maps, gt_presence):
        smap = np.asarray(smap)
        labels = set(np.unique(smap).tolist())
        if labels != set(range(1, N_STATIONS + 1)):
            raise InputError(f"station map must use exactly labels 1..{N_STATIONS}, got {sorted(labels)}")
        pred_flags.append(predicted_presence(pred, smap))
        gt_flags.append(np.asarray(gt, dtype=np.int64))
    pf = np.array(pred_flags).reshape(-1, N_STATIONS).astype(bool)
    gf = np.array(gt_flags).reshape(-1, N_STATIONS).astype(bool)
    per_station = []
    for s in range(N_STATIONS):
        tp = int((pf[:, s] & gf[:, s]).sum())
        fp = int((pf[:, s] & ~gf[:, s]).sum())
        fn = int((~pf[:, s] & gf[:, s]).sum())
        p = safe_ratio(tp, tp + fp, fn)
        r = safe_ratio(tp, tp + fn, fp)
        per_station.append({"station": s + 1, "precision": p, "recall": r, "f1": f1_score(p, r),
                            "tp": tp, "fp": fp, "fn": fn})
    mean = {k: float(np.mean([st[k] for st in per_station])) for k in ("precision", "recall", "f1")}
    return {"per_station": per_station, **mean}


@dataclass
class MetricsReport:
    per_image: list[dict] = field(default_factory=list)
    localization: dict = field(default_factory=dict)
    multilabel: dict = field(default_factory=dict)

    def summary_row(self) -> dict:
        return {
            "locP": self.localization["precision"], "locR": self.localization["recall"],
            "locF1": self.localization["f1"], "mlP": self.multilabel["precision"],
            "mlR": self.multilabel["recall"], "mlF1": self.multilabel["f1"],
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        cols = ["kind", "name", "precision", "recall", "f1", "tp", "fp", "fn", "n_pred"]
        with open(csv_path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
            wr.writeheader()
            for row in self.per_image:
                wr.writerow({"kind": "image", "name": row["image"], **{k: row[k] for k in cols[2:]}})
            wr.writerow({"kind": "summary", "name": "localization",
                         **{k: self.localization[k] for k in ("precision", "recall", "f1")}})
            for st in self.multilabel["per_station"]:
                wr.writerow({"kind": "station", "name": st["station"],
                             **{k: st[k] for k in ("precision", "recall", "f1", "tp", "fp", "fn")}})
            wr.writerow({"kind": "summary", "name": "multilabel",
                         **{k: self.multilabel[k] for k in ("precision", "recall", "f1")}})
        json_path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return csv_path, json_path


def evaluate_predictions(preds, samples, names=None) -> MetricsReport:
    """Run both protocols over aligned predictions and samples."""
    per_image = []
    for i, (pred, s) in enumerate(zip(preds, samples)):
        m = point_localization_metrics(pred, s.masks)
        m["image"] = names[i] if names else str(i)
        m["n_pred"] = len(pred)
        per_image.append(m)
    p, r, f = aggregate_localization([(m["precision"], m["recall"], m["f1"]) for m in per_image])
    ml = multilabel_station_metrics(preds, [s.station_map for s in samples],
                                    [s.station_presence for s in samples])
    return MetricsReport(per_image, {"precision": p, "recall": r, "f1": f}, ml)
