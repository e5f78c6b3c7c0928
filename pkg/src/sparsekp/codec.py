"""Gaussian target encoding and peak decoding for keypoint heatmaps.

Keypoints are integer pixel positions ``(row, col)``. A target heatmap places a
truncated isotropic Gaussian ``exp(-d**2 / delta**2)`` on every keypoint; the
decoder runs windowed non-maximum suppression, thresholds the surviving peaks
and keeps the top ``k`` of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit as sigmoid

from .errors import BoundsError, ConfigError, InputError

ROLES = ("target", "logit", "probability")
OVERLAP_MODES = ("clamp", "sum")
ACTIVATIONS = ("identity", "sigmoid")


@dataclass(frozen=True, order=True)
class Keypoint:
    row: int
    col: int
    score: float | None = field(default=None, compare=False)

    @property
    def rc(self) -> tuple[int, int]:
        return (self.row, self.col)


@dataclass(frozen=True)
class KeypointSet:
    points: tuple[Keypoint, ...] = ()

    def __post_init__(self):
        pts = tuple(p if isinstance(p, Keypoint) else Keypoint(*p) for p in self.points)
        seen = set()
        for p in pts:
            if p.rc in seen:
                raise InputError(f"duplicate keypoint at {p.rc}")
            seen.add(p.rc)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_coords(cls, coords: Iterable[Sequence[int]]) -> "KeypointSet":
        return cls(tuple(Keypoint(int(r), int(c)) for r, c in coords))

    @property
    def n(self) -> int:
        return len(self.points)

    def coords(self) -> list[tuple[int, int]]:
        return [p.rc for p in self.points]

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass
class Heatmap:
    """A 2D float64 grid tagged with what its values mean."""

    values: np.ndarray
    role: str = "target"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown heatmap role {self.role!r}; expected one of {ROLES}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"heatmap must be 2D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("heatmap contains non-finite values")
        if self.role != "logit":
            lo, hi = self.values.min(initial=0.0), self.values.max(initial=0.0)
            # targets rendered with overlap_mode="sum" may exceed 1
            if lo < 0.0 or (self.role == "probability" and hi > 1.0):
                raise InputError(f"{self.role} heatmap values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CodecParams:
    delta: float = 2.0
    truncation_radius: float | None = None  # None means 3 * delta
    overlap_mode: str = "clamp"

    def __post_init__(self):
        if self.truncation_radius is None:
            object.__setattr__(self, "truncation_radius", 3.0 * self.delta)
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.truncation_radius < self.delta:
            raise ConfigError("truncation_radius must be >= delta")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ConfigError(f"overlap_mode must be one of {OVERLAP_MODES}")


@dataclass(frozen=True)
class DecodeParams:
    window: int = 5
    k: int = 30
    t: float = 0.3
    activation: str = "identity"

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 3, got {self.window}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError("t must lie in [0, 1]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")


def _values(h) -> np.ndarray:
    return h.values if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float64)


def encode_target(keypoints, height: int, width: int, params: CodecParams = CodecParams()) -> Heatmap:
    """Render ``keypoints`` as a target heatmap of shape ``(height, width)``."""
    if not isinstance(keypoints, KeypointSet):
        keypoints = KeypointSet.from_coords(keypoints)
    out = np.zeros((height, width), dtype=np.float64)
    d2 = params.delta ** 2
    r = params.truncation_radius
    rr = int(np.floor(r))
    for p in keypoints:
        if not (0 <= p.row < height and 0 <= p.col < width):
            raise BoundsError(f"keypoint {p.rc} outside {height}x{width} grid")
        r0, r1 = max(p.row - rr, 0), min(p.row + rr + 1, height)
        c0, c1 = max(p.col - rr, 0), min(p.col + rr + 1, width)
        dr = np.arange(r0, r1)[:, None] - p.row
        dc = np.arange(c0, c1)[None, :] - p.col
        dist2 = dr * dr + dc * dc
        g = np.where(dist2 <= r * r, np.exp(-dist2 / d2), 0.0)
        out[r0:r1, c0:c1] += g
    if params.overlap_mode == "clamp":
        np.minimum(out, 1.0, out=out)
    return Heatmap(out, "target")


def nms_local_maxima(h, window: int = 5) -> list[tuple[Keypoint, float]]:
    """Pixels equal to the max of their ``window x window`` neighbourhood.

    The window is clipped at the borders. Adjacent maxima always share a value,
    so each 8-connected group of them is a plateau; only its row-major-first
    pixel is reported. Output is in row-major order.
    """
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be an odd integer >= 3, got {window}")
    v = _values(h)
    # 'nearest' only repeats border values, so the max equals the clipped-window max
    local_max = ndimage.maximum_filter(v, size=window, mode="nearest")
    is_max = v == local_max
    labels, count = ndimage.label(is_max, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    # first occurrence of each label in row-major order
    _, first = np.unique(flat[idx], return_index=True)
    picks = np.sort(idx[first])
    w = v.shape[1]
    return [(Keypoint(int(i // w), int(i % w)), float(v.flat[i])) for i in picks]


def decode_points(h: Heatmap, params: DecodeParams = DecodeParams()) -> KeypointSet:
    """Turn a heatmap into at most ``k`` scored keypoints."""
    role = h.role if isinstance(h, Heatmap) else None
    if role == "logit" and params.activation != "sigmoid":
        raise ConfigError("logit heatmaps must be decoded with activation='sigmoid'")
    if role in ("probability", "target") and params.activation != "identity":
        raise ConfigError(f"{role} heatmaps must be decoded with activation='identity'")
    v = _values(h)
    if params.activation == "sigmoid":
        v = sigmoid(v)
    cands = [(kp, val) for kp, val in nms_local_maxima(v, params.window) if val >= params.t]
    # stable sort keeps row-major order among equal values
    cands.sort(key=lambda kv: -kv[1])
    return KeypointSet(tuple(Keypoint(kp.row, kp.col, val) for kp, val in cands[: params.k]))


def decode_prediction(logits, params: DecodeParams) -> KeypointSet:
    """Decode a raw model output according to ``params.activation``.

    With the identity activation the raw output is clipped to [0, 1] first so it
    can be treated as a probability map.
    """
    v = _values(logits)
    if params.activation == "sigmoid":
        return decode_points(Heatmap(v, "logit"), params)
    return decode_points(Heatmap(np.clip(v, 0.0, 1.0), "probability"), params)
