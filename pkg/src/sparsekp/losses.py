"""Per-pixel heatmap losses with analytic gradients.

Every loss maps a target grid ``H`` (values in [0, 1]) and a raw prediction
grid ``Z`` (logits, unbounded) to a scalar total and ``dL/dZ``. The Hill family
uses two squashed views of the prediction::

    p_pos = sigmoid(Z - m)      # margin-shifted, positive term
    p_neg = sigmoid(Z)          # negative term

and minimises, per pixel::

    [H * -log(p_pos) + rho * (H - Z)**2] * (1 - p_pos)**gamma
        + (1 - H) * (lam - p_neg) * p_neg**2

where the squared term (``rho``) is only present in the crag-and-tail loss.
With ``lam = 1.5`` the derivative of the negative term in ``p_neg`` is
``3 p (1 - p)``, so confident negatives (likely missed labels) are pushed down
less than uncertain ones.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.special import expit

from .codec import Heatmap
from .errors import ConfigError, DimensionError

VARIANTS = ("MSE", "Hill", "CragAndTail", "MaskedMSE", "SoftUncertainRegion", "HillPlusMSE")
REDUCTIONS = ("sum", "mean")
REINFORCE_SCOPES = ("all_pixels", "positive_only")
FOCAL_MODES = ("standard", "off_zero", "exponent_override")
NEG_MODES = ("standard", "constant_one", "zero")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "CragAndTail"
    lam: float = 1.5
    gamma: float = 2.0
    m: float = 1.0
    a: float = 0.5
    reduction: str = "mean"
    pos_log_term_on: bool = True
    reinforce_term_on: bool = True
    reinforce_scope: str = "all_pixels"
    focal_weight_mode: str = "standard"
    focal_exponent: float | None = None  # used by focal_weight_mode="exponent_override"
    neg_weight_mode: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.reinforce_scope not in REINFORCE_SCOPES:
            raise ConfigError(f"reinforce_scope must be one of {REINFORCE_SCOPES}")
        if self.focal_weight_mode not in FOCAL_MODES:
            raise ConfigError(f"focal_weight_mode must be one of {FOCAL_MODES}")
        if self.neg_weight_mode not in NEG_MODES:
            raise ConfigError(f"neg_weight_mode must be one of {NEG_MODES}")
        if self.focal_weight_mode == "exponent_override" and self.focal_exponent is None:
            raise ConfigError("exponent_override requires focal_exponent")
        if min(self.lam, self.gamma, self.m) < 0:
            raise ConfigError("lambda, gamma and m must be non-negative")
        if self.focal_exponent is not None and self.focal_exponent < 0:
            raise ConfigError("focal_exponent must be non-negative")
        if not 0.0 <= self.a <= 1.0:
            raise ConfigError("a must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _arrays(target, pred):
    h = target.values if isinstance(target, Heatmap) else np.asarray(target, dtype=np.float64)
    z = pred.values if isinstance(pred, Heatmap) else np.asarray(pred, dtype=np.float64)
    if h.shape != z.shape:
        raise DimensionError(f"target shape {h.shape} != prediction shape {z.shape}")
    return h, z


def _reduce(value, grad, reduction):
    if reduction == "mean":
        n = value.size
        return float(value.sum() / n), grad / n
    return float(value.sum()), grad


# Per-pixel pieces. Each returns (value, dvalue/dZ) elementwise.

def mse_pixels(h, z):
    diff = z - h
    return diff * diff, 2.0 * diff


def hill_family_pixels(h, z, cfg: LossConfig, reinforce: bool):
    pos_c = expit(z - cfg.m)   # p_pos
    one_minus_pos = expit(cfg.m - z)  # 1 - p_pos, computed without cancellation

    if cfg.focal_weight_mode == "off_zero":
        w = np.zeros_like(z)
        dw = np.zeros_like(z)
    else:
        g = cfg.gamma if cfg.focal_weight_mode == "standard" else cfg.focal_exponent
        if g == 0:
            w = np.ones_like(z)
            dw = np.zeros_like(z)
        else:
            w = one_minus_pos ** g
            dw = -g * w * pos_c

    if cfg.pos_log_term_on:
        # -log(sigmoid(z - m)) == softplus(m - z)
        a_val = h * np.logaddexp(0.0, cfg.m - z)
        a_grad = -h * one_minus_pos
    else:
        a_val = np.zeros_like(z)
        a_grad = np.zeros_like(z)

    if reinforce:
        rho = 1.0 if cfg.reinforce_scope == "all_pixels" else (h > 0).astype(np.float64)
        diff = h - z
        a_val = a_val + rho * diff * diff
        a_grad = a_grad - 2.0 * rho * diff

    pos_val = a_val * w
    pos_grad = a_grad * w + a_val * dw

    if cfg.neg_weight_mode == "zero":
        return pos_val, pos_grad

    p = expit(z)
    dp = p * expit(-z)
    if cfg.neg_weight_mode == "standard":
        nv = (cfg.lam - p) * p * p
        ng = (2.0 * cfg.lam * p - 3.0 * p * p) * dp
    else:
        nv = p * p
        ng = 2.0 * p * dp
    return pos_val + (1.0 - h) * nv, pos_grad + (1.0 - h) * ng


def hill_pixels(h, z, cfg):
    return hill_family_pixels(h, z, cfg, reinforce=False)


def _uncertain_region(h, n):
    """True where a pixel is an assumed false negative (n > 0 and H == 0)."""
    if n == 0:
        return np.zeros(h.shape, dtype=bool)
    return h == 0


def loss_pixels(h, z, cfg: LossConfig, n: int = 0):
    """Per-pixel ``(value, grad)`` grids for ``cfg.variant``."""
    v = cfg.variant
    if v == "MSE":
        return mse_pixels(h, z)
    if v == "Hill":
        return hill_family_pixels(h, z, cfg, reinforce=False)
    if v == "CragAndTail":
        return hill_family_pixels(h, z, cfg, reinforce=cfg.reinforce_term_on)
    if v == "HillPlusMSE":
        hv, hg = hill_pixels(h, z, cfg)
        mv, mg = mse_pixels(h, z)
        return hv + mv, hg + mg
    if v == "MaskedMSE":
        mv, mg = mse_pixels(h, z)
        wgt = np.where(_uncertain_region(h, n), cfg.a, 1.0)
        return wgt * mv, wgt * mg
    if v == "SoftUncertainRegion":
        mv, mg = mse_pixels(h, z)
        hv, hg = hill_pixels(h, z, cfg)
        unc = _uncertain_region(h, n)
        w_mse = np.where(unc, cfg.a, 1.0)
        w_hill = np.where(unc, 1.0, cfg.a)
        return w_mse * mv + w_hill * hv, w_mse * mg + w_hill * hg
    raise ConfigError(f"unknown loss variant {v!r}")


def compute_loss(target, pred, cfg: LossConfig, n: int = 0):
    """Reduced ``(total, grad)`` for any variant; ``n`` is the sparse label count."""
    h, z = _arrays(target, pred)
    value, grad = loss_pixels(h, z, cfg, n)
    return _reduce(value, grad, cfg.reduction)


def _expect(cfg, variant):
    if cfg.variant != variant:
        return replace(cfg, variant=variant)
    return cfg


def mse_loss(target, pred, cfg: LossConfig = LossConfig("MSE")):
    return compute_loss(target, pred, _expect(cfg, "MSE"))


def hill_loss(target, pred, cfg: LossConfig = LossConfig("Hill")):
    return compute_loss(target, pred, _expect(cfg, "Hill"))


def crag_and_tail_loss(target, pred, cfg: LossConfig = LossConfig("CragAndTail")):
    return compute_loss(target, pred, _expect(cfg, "CragAndTail"))


def masked_mse_loss(target, pred, n: int, cfg: LossConfig = LossConfig("MaskedMSE")):
    return compute_loss(target, pred, _expect(cfg, "MaskedMSE"), n)


def soft_uncertain_region_loss(target, pred, n: int, cfg: LossConfig = LossConfig("SoftUncertainRegion")):
    return compute_loss(target, pred, _expect(cfg, "SoftUncertainRegion"), n)


def hill_plus_mse_loss(target, pred, cfg: LossConfig = LossConfig("HillPlusMSE")):
    return compute_loss(target, pred, _expect(cfg, "HillPlusMSE"))


# Ablation rows of the component study, each a crag-and-tail config.
_ABLATIONS = {
    "default": {},
    "m0": {"m": 0.0},
    "m05": {"m": 0.5},
    "gamma0": {"gamma": 0.0},
    "gamma1": {"gamma": 1.0},
    "lambda0": {"lam": 0.0},
    "lambda05": {"lam": 0.5},
    "lambda1": {"lam": 1.0},
    "drop_pos_log": {"pos_log_term_on": False},
    # squared term alone in the positive branch: no log term, no focal weight
    "only_reinforce_pos": {
        "pos_log_term_on": False,
        "focal_weight_mode": "exponent_override",
        "focal_exponent": 0.0,
    },
    "only_neg_loss": {"focal_weight_mode": "off_zero"},
    "neg_weight_one": {"neg_weight_mode": "constant_one"},
    "no_neg_term": {"neg_weight_mode": "zero"},
    "only_pos_hill": {"neg_weight_mode": "zero", "reinforce_term_on": False},
}
ABLATION_ROWS = tuple(_ABLATIONS)


def make_ablation_config(row_name: str, base: LossConfig | None = None) -> LossConfig:
    if row_name not in _ABLATIONS:
        raise ConfigError(f"unknown ablation row {row_name!r}; valid rows: {', '.join(ABLATION_ROWS)}")
    base = base or LossConfig("CragAndTail")
    return replace(base, variant="CragAndTail", **_ABLATIONS[row_name])


def finite_difference_gradcheck(cfg: LossConfig, trials: int = 1000, seed: int = 0,
                                step: float = 1e-4, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples independent pixels with ``H`` in [0, 1], ``Z`` in [-10, 10] and a
    sparse-label count ``n`` in {0, 1, 3}. ``grad_fn`` overrides the analytic
    gradient (a test hook for the failure path).
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    h = rng.uniform(0.0, 1.0, trials)
    # a quarter of the pixels sit exactly on H == 0 so the uncertain branch is exercised
    h[rng.random(trials) < 0.25] = 0.0
    z = rng.uniform(-10.0, 10.0, trials)
    ns = rng.choice([0, 1, 3], size=trials)
    worst = 0.0
    for n in (0, 1, 3):
        sel = ns == n
        if not sel.any():
            continue
        hs, zs = h[sel], z[sel]
        _, g = loss_pixels(hs, zs, cfg, n)
        if grad_fn is not None:
            g = grad_fn(hs, zs, cfg, n)
        fp, _ = loss_pixels(hs, zs + step, cfg, n)
        fm, _ = loss_pixels(hs, zs - step, cfg, n)
        num = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(g - num) / denom)))
    return worst
