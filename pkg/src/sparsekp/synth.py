"""Synthetic scenes with dense nodule instances and a few point labels.

Each scene is a smooth textured background (shared within a group, the
analogue of one video) with bright, irregularly outlined bumps. Every bump has
an instance mask and a center; only a handful of centers are kept as sparse
training labels. A 6-cell Voronoi partition plays the role of anatomical
stations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .codec import Keypoint, KeypointSet
from .errors import ConfigError, GenerationError, InputError

N_STATIONS = 6
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    instances_mean: float = 12.0
    instances_range: tuple[int, int] = (6, 18)
    nodule_radius_range: tuple[float, float] = (2.0, 3.5)
    sparse_range: tuple[int, int] = (1, 3)
    texture_seed_groups: int = 30
    stations: int = N_STATIONS
    max_overlap: float = 0.2
    group_split_ratio: tuple[int, int, int] = (3, 1, 1)   # train:val:test share of texture groups

    def __post_init__(self):
        object.__setattr__(self, "group_split_ratio", tuple(int(r) for r in self.group_split_ratio))
        if len(self.group_split_ratio) != 3 or min(self.group_split_ratio) < 1:
            raise ConfigError("group_split_ratio needs three positive integers")
        for name in ("instances_range", "nodule_radius_range", "sparse_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi:
                raise ConfigError(f"{name}: min {lo} > max {hi}")
        lo, hi = self.instances_range
        if lo < 1 or hi > 64:
            raise ConfigError("instances_range must lie within [1, 64]")
        if self.sparse_range[0] < 0:
            raise ConfigError("sparse_range must be non-negative")
        if self.nodule_radius_range[0] <= 0:
            raise ConfigError("nodule radii must be positive")
        if self.stations != N_STATIONS:
            raise ConfigError("stations is fixed at 6")
        if self.height < 8 or self.width < 8:
            raise ConfigError("scenes must be at least 8x8")
        if self.texture_seed_groups < 1:
            raise ConfigError("texture_seed_groups must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("instances_range", "nodule_radius_range", "sparse_range", "group_split_ratio"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Instance:
    center: Keypoint
    mask: np.ndarray  # bool (h, w)


@dataclass
class Sample:
    image: np.ndarray                 # (3, h, w) float64 in [0, 1]
    instances: list[Instance]
    station_map: np.ndarray           # (h, w) int labels 1..6
    group_id: int
    sparse_labels: KeypointSet = field(default_factory=KeypointSet)

    @property
    def centers(self) -> list[tuple[int, int]]:
        return [inst.center.rc for inst in self.instances]

    @property
    def masks(self) -> list[np.ndarray]:
        return [inst.mask for inst in self.instances]

    @property
    def station_presence(self) -> np.ndarray:
        return station_presence(self.station_map, self.centers)

    @property
    def shape(self) -> tuple[int, int]:
        return self.station_map.shape


def station_presence(station_map, centers) -> np.ndarray:
    flags = np.zeros(N_STATIONS, dtype=np.int64)
    for r, c in centers:
        flags[station_map[r, c] - 1] = 1
    return flags


def _value_noise(rng, h, w, cells, channels):
    coarse = rng.random((channels, cells + 1, cells + 1))
    zoom = (1, h / (cells + 1), w / (cells + 1))
    return ndimage.zoom(coarse, zoom, order=3, mode="nearest", grid_mode=True)[:, :h, :w]


def _group_rng(group_id, salt):
    return np.random.default_rng([int(group_id), salt, 7331])


def group_background(spec: SceneSpec, group_id: int) -> np.ndarray:
    rng = _group_rng(group_id, 0)
    base = np.array([0.55, 0.30, 0.28]) + rng.uniform(-0.08, 0.08, 3)
    tex = _value_noise(rng, spec.height, spec.width, 6, 3) - 0.5
    fine = _value_noise(rng, spec.height, spec.width, 16, 1) - 0.5
    img = base[:, None, None] + 0.25 * tex + 0.10 * fine
    return np.clip(img, 0.0, 1.0)


def group_station_map(spec: SceneSpec, group_id: int) -> np.ndarray:
    rng = _group_rng(group_id, 1)
    # distinct seed pixels so every station owns at least its own seed
    flat = rng.choice(spec.height * spec.width, size=N_STATIONS, replace=False)
    seeds = np.stack(np.unravel_index(flat, (spec.height, spec.width)), axis=1)
    rr, cc = np.mgrid[:spec.height, :spec.width]
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    return (np.argmin(d2, axis=-1) + 1).astype(np.int64)


def _nodule_shape(rng, spec, center, radius):
    """Radially perturbed disc: returns (mask, normalised radial distance)."""
    h, w = spec.height, spec.width
    n_harm = 3
    amps = rng.uniform(0.0, 0.18, n_harm)
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    rr, cc = np.mgrid[:h, :w]
    dr, dc = rr - center[0], cc - center[1]
    theta = np.arctan2(dr, dc)
    boundary = radius * (1.0 + sum(a * np.cos((k + 2) * theta + p)
                                   for k, (a, p) in enumerate(zip(amps, phases))))
    rho = np.sqrt(dr * dr + dc * dc) / boundary
    mask = rho <= 1.0
    # keep the connected piece holding the center
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    mask = labels == labels[center]
    return mask, rho


def _instance_count(rng, spec):
    lo, hi = spec.instances_range
    return int(np.clip(rng.poisson(spec.instances_mean), lo, hi))


def generate_scene(spec: SceneSpec, seed: int, group_id: int, max_tries: int = 200) -> Sample:
    """Render one scene. Deterministic in ``(spec, seed, group_id)``."""
    rng = np.random.default_rng([int(seed), int(group_id)])
    h, w = spec.height, spec.width
    img = group_background(spec, group_id).copy()
    img += rng.normal(0.0, 0.015, img.shape)
    img *= rng.uniform(0.9, 1.1)
    count = _instance_count(rng, spec)
    nod_color = np.array([0.95, 0.88, 0.78]) + rng.uniform(-0.05, 0.05, 3)

    instances: list[Instance] = []
    occupied = np.zeros((h, w), dtype=bool)
    rlo, rhi = spec.nodule_radius_range
    margin = int(np.ceil(rlo))
    tries = 0
    while len(instances) < count:
        tries += 1
        if tries > max_tries * count:
            raise GenerationError(
                f"could not place {count} nodules in a {h}x{w} scene after {tries - 1} attempts")
        radius = rng.uniform(rlo, rhi)
        center = (int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin)))
        if any(np.hypot(center[0] - i.center.row, center[1] - i.center.col) < 2.0 for i in instances):
            continue
        mask, rho = _nodule_shape(rng, spec, center, radius)
        area = mask.sum()
        if (mask & occupied).sum() > spec.max_overlap * area:
            continue
        if any((mask & i.mask).sum() > spec.max_overlap * i.mask.sum() for i in instances):
            continue
        strength = rng.uniform(0.55, 0.85)
        bump = np.where(mask, strength * (1.0 - rho ** 2), 0.0)
        img = img * (1.0 - bump) + nod_color[:, None, None] * bump
        occupied |= mask
        instances.append(Instance(Keypoint(*center), mask))

    return Sample(
        image=np.clip(img, 0.0, 1.0),
        instances=instances,
        station_map=group_station_map(spec, group_id),
        group_id=int(group_id),
    )


def sparsify_labels(sample: Sample, spec: SceneSpec, seed: int) -> Sample:
    """Keep a random handful of instance centers as the training labels."""
    if not sample.instances:
        raise InputError("cannot sparsify a scene without instances")
    rng = np.random.default_rng([int(seed), 99])
    lo, hi = spec.sparse_range
    n = min(int(rng.integers(lo, hi + 1)), len(sample.instances))
    pick = np.sort(rng.choice(len(sample.instances), size=n, replace=False))
    labels = KeypointSet(tuple(sample.instances[i].center for i in pick))
    return replace(sample, sparse_labels=labels)


# --- on-disk format -------------------------------------------------------

def rle_encode(grid: np.ndarray) -> list[list[int]]:
    """Row-major run-length code as ``[value, length]`` pairs."""
    flat = np.asarray(grid).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs, shape, dtype=np.int64) -> np.ndarray:
    vals = np.array([v for v, _ in runs], dtype=dtype)
    lens = np.array([n for _, n in runs], dtype=np.int64)
    flat = np.repeat(vals, lens)
    if flat.size != shape[0] * shape[1]:
        raise InputError(f"run-length code covers {flat.size} pixels, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def sample_to_dict(sample: Sample) -> dict:
    return {
        "height": int(sample.shape[0]),
        "width": int(sample.shape[1]),
        "group_id": sample.group_id,
        "instances": [
            {"center": list(inst.center.rc), "mask_rle": rle_encode(inst.mask.astype(np.uint8))}
            for inst in sample.instances
        ],
        "sparse_labels": [list(rc) for rc in sample.sparse_labels.coords()],
        "station_map_rle": rle_encode(sample.station_map),
        "station_presence": [int(x) for x in sample.station_presence],
    }


def save_sample(sample: Sample, image_path: Path, ann_path: Path) -> None:
    rgb = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(image_path, format="PNG")
    ann_path.write_text(json.dumps(sample_to_dict(sample), indent=1))


def load_sample(image_path, ann_path) -> Sample:
    with Image.open(image_path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    ann = json.loads(Path(ann_path).read_text())
    shape = (ann["height"], ann["width"])
    instances = [
        Instance(Keypoint(*d["center"]), rle_decode(d["mask_rle"], shape, np.uint8).astype(bool))
        for d in ann["instances"]
    ]
    return Sample(
        image=rgb.transpose(2, 0, 1).copy(),
        instances=instances,
        station_map=rle_decode(ann["station_map_rle"], shape),
        group_id=int(ann["group_id"]),
        sparse_labels=KeypointSet.from_coords(ann["sparse_labels"]),
    )


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    split: str
    group_id: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    spec: SceneSpec
    seed: int

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, split: str) -> list[Sample]:
        return [load_sample(self.root / e.image, self.root / e.annotation) for e in self.split(split)]

    def to_dict(self) -> dict:
        return {
            "format": "sparsekp-manifest/1",
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "counts": {s: len(self.split(s)) for s in SPLITS},
            "samples": [asdict(e) for e in self.entries],
        }

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        return cls(path.parent, [ManifestEntry(**e) for e in d["samples"]],
                   SceneSpec.from_dict(d["spec"]), int(d["seed"]))


def assign_group_splits(n_groups: int, ratio, seed: int) -> dict[str, list[int]]:
    """Partition group ids across train/val/test in proportion to ``ratio``."""
    ratio = dict(zip(SPLITS, ratio))
    total = sum(ratio.values())
    if n_groups < len(SPLITS):
        raise ConfigError("need at least one texture group per split")
    sizes = {s: max(1, round(n_groups * ratio[s] / total)) for s in SPLITS}
    # push rounding slack into the train split
    sizes["train"] = n_groups - sizes["val"] - sizes["test"]
    if sizes["train"] < 1:
        raise ConfigError("too few texture groups for the requested split ratio")
    order = np.random.default_rng([int(seed), 5]).permutation(n_groups)
    out, i = {}, 0
    for s in SPLITS:
        out[s] = sorted(int(g) for g in order[i:i + sizes[s]])
        i += sizes[s]
    return out


def build_dataset(spec: SceneSpec, counts: dict[str, int], master_seed: int, out_dir) -> DatasetManifest:
    """Generate and write every split; groups never straddle splits."""
    for s in SPLITS:
        if counts.get(s, 0) < 1:
            raise ConfigError(f"split {s!r} needs at least one sample")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    groups = assign_group_splits(spec.texture_seed_groups, spec.group_split_ratio, master_seed)
    entries = []
    index = 0
    for s in SPLITS:
        for j in range(counts[s]):
            gid = groups[s][j % len(groups[s])]
            sample_seed = int(np.random.SeedSequence([int(master_seed), index]).generate_state(1)[0])
            sample = generate_scene(spec, sample_seed, gid)
            sample = sparsify_labels(sample, spec, sample_seed)
            stem = f"samples/{s}_{j:04d}"
            save_sample(sample, out / f"{stem}.png", out / f"{stem}.json")
            entries.append(ManifestEntry(f"{stem}.png", f"{stem}.json", s, gid))
            index += 1
    manifest = DatasetManifest(out, entries, spec, int(master_seed))
    manifest.write()
    return manifest
