"""A small stride-1 fully-convolutional network with hand-written backprop.

Activations are kept channels-last (``B, H, W, C``) so every 3x3 "same"
convolution becomes one matrix product over an im2col buffer. Weights use the
conventional ``(out, in, 3, 3)`` layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DimensionError, InputError

CHECKPOINT_MAGIC = b"SPKPCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    channels: tuple[int, ...] = (3, 16, 32, 32, 16, 1)
    kernel: int = 3
    # fixed input standardisation applied inside forward: (x - input_mean) / input_std
    input_mean: float = 0.0
    input_std: float = 1.0
    # multiplier on the output layer's initial weights; < 1 keeps initial logits near 0
    head_init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2 or self.channels[-1] != 1:
            raise InputError("channel plan must have >= 2 entries and end with 1 output channel")
        if self.kernel != 3:
            raise InputError("only 3x3 kernels are supported")
        if not self.input_std > 0 or not self.head_init_scale > 0:
            raise InputError("input_std and head_init_scale must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
        return names

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (cin, cout) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            shapes[f"conv{i}.weight"] = (cout, cin, self.kernel, self.kernel)
            shapes[f"conv{i}.bias"] = (cout,)
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    @property
    def receptive_radius(self) -> int:
        return self.n_layers * (self.kernel // 2)


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.spec.param_names()])

    def equals(self, other: "ModelState") -> bool:
        return (self.spec == other.spec and self.seed == other.seed
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.spec.param_names()))


@dataclass
class Cache:
    """Activations retained by :func:`forward` for :func:`backward`."""
    cols: list = field(default_factory=list)        # im2col buffers, one per layer
    pre: list = field(default_factory=list)         # pre-activations of hidden layers
    shape: tuple = ()
    dtype: type = np.float64


def init_model(spec: ModelSpec = ModelSpec(), seed: int = 0) -> ModelState:
    """Fan-in scaled uniform weights (He-uniform), zero biases.

    The output layer's weights are further multiplied by ``spec.head_init_scale``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    params[f"conv{spec.n_layers - 1}.weight"] *= spec.head_init_scale
    return ModelState(spec, params, seed)


def _im2col(x):
    # x: (B, H, W, C) -> (B*H*W, 9*C), tap-major then channel
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9 * c), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[..., k * c:(k + 1) * c] = xp[:, di:di + h, dj:dj + w, :]
            k += 1
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 9 * c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[..., k * c:(k + 1) * c]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _wmat(w):
    # (out, in, 3, 3) -> (9*in, out) matching the im2col column order
    cout, cin = w.shape[:2]
    return w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected (3, h, w) or (B, 3, h, w) input, got {x.shape}")
    return x, single


def forward(state: ModelState, image, dtype=np.float64):
    """Logit heatmap(s) for ``image`` plus the cache needed by :func:`backward`.

    ``image`` is ``(C, h, w)`` or a batch ``(B, C, h, w)``; the output is
    ``(h, w)`` or ``(B, h, w)`` respectively. ``dtype`` selects the compute
    precision; parameters themselves stay float64.
    """
    x, single = _as_batch(image)
    spec = state.spec
    if x.shape[1] != spec.channels[0]:
        raise DimensionError(f"expected {spec.channels[0]} input channels, got {x.shape[1]}")
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise DimensionError("spatial dims must be >= 8")
    if not np.all(np.isfinite(x)):
        raise InputError("input image contains non-finite values")
    x = (x - spec.input_mean) / spec.input_std
    a = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)
    b, h, w, _ = a.shape
    cache = Cache(shape=(b, h, w, x.shape[1]), dtype=dtype)
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        cols = _im2col(a)
        cache.cols.append(cols)
        wt = _wmat(state.params[f"conv{i}.weight"]).astype(dtype, copy=False)
        z = cols @ wt + state.params[f"conv{i}.bias"].astype(dtype, copy=False)
        z = z.reshape(b, h, w, -1)
        if i < last:
            cache.pre.append(z)
            a = np.maximum(z, 0.0)
        else:
            a = z
    out = a[..., 0].astype(np.float64)
    return (out[0] if single else out), cache


def backward(state: ModelState, cache: Cache, grad_output) -> dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss whose output gradient is ``grad_output``."""
    spec = state.spec
    b, h, w, _ = cache.shape
    g = np.asarray(grad_output, dtype=cache.dtype)
    if g.ndim == 2:
        g = g[None]
    if g.shape != (b, h, w):
        raise DimensionError(f"grad_output shape {g.shape} does not match forward output {(b, h, w)}")
    grads = {}
    d = g.reshape(b * h * w, 1)
    for i in reversed(range(spec.n_layers)):
        wt = state.params[f"conv{i}.weight"]
        cout, cin = wt.shape[:2]
        wmat = _wmat(wt).astype(cache.dtype, copy=False)
        cols = cache.cols[i]
        dw = cols.T @ d  # (9*cin, cout)
        grads[f"conv{i}.weight"] = dw.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1).astype(np.float64)
        grads[f"conv{i}.bias"] = d.sum(axis=0, dtype=np.float64)
        if i == 0:
            break
        dx = _col2im(d @ wmat.T, (b, h, w, cin))
        dx *= cache.pre[i - 1] > 0
        d = dx.reshape(b * h * w, cin)
    return {k: grads[k] for k in spec.param_names()}


def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary layout: magic, version, spec JSON, seed, float64 params (LE)."""
    spec_blob = json.dumps(asdict(state.spec), sort_keys=True).encode()
    payload = b"".join(state.params[k].astype("<f8").tobytes() for k in state.spec.param_names())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec_blob)))
        f.write(spec_blob)
        f.write(struct.pack("<qQ", state.seed, len(payload)))
        f.write(payload)


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, spec_len = struct.unpack_from("<II", data, head)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version} is incompatible "
                                  f"with supported version {CHECKPOINT_VERSION}")
        off = head + 8
        spec_d = json.loads(data[off:off + spec_len].decode())
        off += spec_len
        seed, n_bytes = struct.unpack_from("<qQ", data, off)
        off += 16
        spec = ModelSpec(**spec_d)
    except CheckpointError:
        raise
    except (struct.error, ValueError, TypeError, InputError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if n_bytes != 8 * spec.param_count() or len(data) != off + n_bytes:
        raise CheckpointError(f"{path}: truncated or corrupt parameter block")
    flat = np.frombuffer(data, dtype="<f8", count=spec.param_count(), offset=off).astype(np.float64)
    params, i = {}, 0
    for name, shape in spec.param_shapes().items():
        size = int(np.prod(shape))
        params[name] = flat[i:i + size].reshape(shape).copy()
        i += size
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{path}: non-finite parameters")
    return ModelState(spec, params, int(seed))
