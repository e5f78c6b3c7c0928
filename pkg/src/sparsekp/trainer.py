"""SGD training with plateau-based lr decay and early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecParams, Heatmap, encode_target
from .errors import ConfigError, DivergenceError
from .losses import LossConfig, compute_loss
from .model import ModelSpec, backward, forward, init_model, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    lr: float = 0.01
    weight_decay: float = 0.0005
    batch_size: int = 4
    lr_decay: float = 0.9
    stagnation_patience: int = 3
    early_stop_patience: int = 10
    max_epochs: int = 30
    seed: int = 0
    compute_dtype: str = "float64"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("lr, batch_size and max_epochs must be positive")
        if self.stagnation_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.compute_dtype not in ("float64", "float32"):
            raise ConfigError("compute_dtype must be 'float64' or 'float32'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch].val_loss

    def write_csv(self, path, include_timing: bool = False) -> None:
        cols = ["epoch", "train_loss", "val_loss", "lr"] + (["wall_time"] if include_timing else [])
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(cols + ["best", "stop_reason"])
            for r in self.records:
                row = [r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)]
                if include_timing:
                    row.append(f"{r.wall_time:.3f}")
                last = r.epoch == self.records[-1].epoch
                wr.writerow(row + [int(r.epoch == self.best_epoch), self.stop_reason if last else ""])


@dataclass
class Batchable:
    """Images, targets and label counts stacked for fast batched passes."""
    images: np.ndarray    # (N, 3, h, w)
    targets: np.ndarray   # (N, h, w)
    counts: np.ndarray    # (N,)

    @classmethod
    def from_samples(cls, samples, codec: CodecParams) -> "Batchable":
        images = np.stack([s.image for s in samples])
        targets = np.stack([encode_target(s.sparse_labels, *s.shape, codec).values for s in samples])
        counts = np.array([s.sparse_labels.n for s in samples])
        return cls(images, targets, counts)

    def __len__(self):
        return len(self.counts)


def batch_loss(state, data: Batchable, idx, loss_cfg: LossConfig, with_grad: bool = True,
               dtype=np.float64):
    """Mean per-sample loss over ``idx`` and (optionally) its parameter gradients."""
    out, cache = forward(state, data.images[idx], dtype)
    total = 0.0
    grad_out = np.empty_like(out)
    for j, i in enumerate(idx):
        v, g = compute_loss(data.targets[i], out[j], loss_cfg, int(data.counts[i]))
        total += v
        grad_out[j] = g
    total /= len(idx)
    if not with_grad:
        return total, None
    grads = backward(state, cache, grad_out / len(idx))
    return total, grads


def evaluate_loss(state, data: Batchable, loss_cfg: LossConfig, chunk: int = 16,
                  dtype=np.float64) -> float:
    total = 0.0
    for s in range(0, len(data), chunk):
        idx = np.arange(s, min(s + chunk, len(data)))
        v, _ = batch_loss(state, data, idx, loss_cfg, with_grad=False, dtype=dtype)
        total += v * len(idx)
    return total / len(data)


def sgd_step(state, grads, lr: float, weight_decay: float) -> None:
    """theta <- theta - lr * (grad + weight_decay * theta), in place."""
    for k, g in grads.items():
        p = state.params[k]
        p -= lr * (g + weight_decay * p)


@dataclass
class PlateauSchedule:
    """Validation-driven lr decay and early stopping.

    After ``stagnation_patience`` epochs without a new best validation loss the
    lr is multiplied by ``decay`` (and the counter restarts); after
    ``early_stop_patience`` such epochs training stops.
    """
    lr: float
    decay: float = 0.9
    stagnation_patience: int = 3
    early_stop_patience: int = 10
    best: float = np.inf
    since_best: int = 0
    since_decay: int = 0
    decays: int = 0

    def step(self, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch; returns ``(is_new_best, should_stop)``."""
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
            self.since_best = self.since_decay = 0
        else:
            self.since_best += 1
            self.since_decay += 1
        if self.since_best >= self.early_stop_patience:
            return improved, True
        if self.since_decay >= self.stagnation_patience:
            self.lr *= self.decay
            self.decays += 1
            self.since_decay = 0
        return improved, False


def train_on_data(train: Batchable, val: Batchable, model_spec: ModelSpec, cfg: TrainConfig,
                  out_dir=None, progress=None):
    """Core loop on in-memory data. Returns ``(best_state, TrainLog)``."""
    state = init_model(model_spec, cfg.seed)
    dtype = np.dtype(cfg.compute_dtype).type
    best_state = state.copy()
    log_ = TrainLog()
    sched = PlateauSchedule(cfg.lr, cfg.lr_decay, cfg.stagnation_patience, cfg.early_stop_patience)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        running = 0.0
        for step, s in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = perm[s:s + cfg.batch_size]
            v, grads = batch_loss(state, train, idx, cfg.loss, dtype=dtype)
            if not np.isfinite(v) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step} (variant {cfg.loss.variant})")
            sgd_step(state, grads, sched.lr, cfg.weight_decay)
            running += v * len(idx)
        val_loss = evaluate_loss(state, val, cfg.loss, dtype=dtype)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch} (variant {cfg.loss.variant})")
        log_.records.append(EpochRecord(epoch, running / len(train), val_loss, sched.lr,
                                        time.perf_counter() - t0))
        improved, stop = sched.step(val_loss)
        if improved:
            best_state = state.copy()
            log_.best_epoch = epoch
        if progress:
            progress(log_.records[-1])
        if stop:
            log_.stop_reason = "early_stop"
            break
    else:
        log_.stop_reason = "max_epochs"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best_state, out / "best.ckpt")
        log_.write_csv(out / "train_log.csv")
    return best_state, log_


def train(manifest, model_spec: ModelSpec, cfg: TrainConfig, out_dir=None,
          codec: CodecParams = CodecParams(), progress=None):
    """Train on a dataset manifest's train split, early-stopping on its val split."""
    train_s, val_s = manifest.load("train"), manifest.load("val")
    if not train_s or not val_s:
        raise ConfigError("manifest needs non-empty train and val splits")
    return train_on_data(Batchable.from_samples(train_s, codec), Batchable.from_samples(val_s, codec),
                         model_spec, cfg, out_dir, progress)


def direct_logit_optimize(samples, loss: LossConfig, steps: int, step_size: float,
                          codec: CodecParams = CodecParams(), init=None, history=None):
    """Gradient descent straight on per-image logit grids, bypassing any model.

    Each pixel is its own parameter, so the loss is taken with sum reduction:
    the step a pixel receives does not depend on the image size. ``init``
    optionally supplies starting grids (default zeros); ``history``, if a
    list, receives the per-step totals of every sample.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    cfg = LossConfig.from_dict({**loss.to_dict(), "reduction": "sum"})
    out = []
    for i, s in enumerate(samples):
        target = encode_target(s.sparse_labels, *s.shape, codec).values
        z = np.zeros_like(target) if init is None else np.array(init[i], dtype=np.float64)
        totals = []
        for step in range(steps):
            v, g = compute_loss(target, z, cfg, s.sparse_labels.n)
            if not np.isfinite(v) or not np.all(np.isfinite(g)):
                raise DivergenceError(f"direct optimisation diverged at step {step} (variant {cfg.variant})")
            totals.append(v)
            z = z - step_size * g
        if history is not None:
            history.append(totals)
        out.append(Heatmap(z, "logit"))
    return out
