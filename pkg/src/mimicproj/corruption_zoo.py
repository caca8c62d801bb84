"""Ground-truth test-time corruptions applied to held-out images.

These produce the observations the projector sees; the projector itself never
gets access to the corruption kind or parameters. Parameters are drawn from a
Gaussian (mean/std per parameter): one shared draw per batch by default, or
i.i.d. per-sample draws with per_sample_jitter. All kernels are torch-based so
the geometric kinds can also be differentiated through when the corruption is
known a priori.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

CORRUPTION_KINDS = ("identity", "rotate", "scale_out", "zoom_in", "missing_pixels",
                    "universal_adv", "fgsm_adv", "dataset_shift")
# Kinds that can sit inside an autograd graph (known-corruption projection).
DIFFERENTIABLE_KINDS = ("identity", "rotate", "scale_out", "zoom_in", "missing_pixels")

ROTATE_BORDER_KEEP = 0.9   # central fraction kept after rotation (edge-artifact crop)
ROTATE_FILL = -1.0         # black in [-1,1]
SCALE_OUT_FILL = -1.0
MISSING_FILL = 0.0         # mid-gray in [-1,1]

_DEFAULT_PARAMS = {
    "identity": {},
    "rotate": {"angle": 0.0},
    "scale_out": {"scale": 1.0},
    "zoom_in": {"zoom": 1.0},
    "missing_pixels": {"p": 0.0},
    "universal_adv": {"alpha": 0.0},
    "fgsm_adv": {"eps": 0.0},
    "dataset_shift": {},
}


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    """A corruption family plus the Gaussian over its parameters.

    params holds per-parameter means; param_stds the matching stddevs
    (missing entries default to 0, i.e. a deterministic parameter).
    """

    kind: str
    params: dict[str, float] = field(default_factory=dict)
    param_stds: dict[str, float] = field(default_factory=dict)
    per_sample_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise CorruptionError(f"unknown corruption kind {self.kind!r}")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise CorruptionError(f"{self.kind}: unknown params {sorted(unknown)}")
        merged = {**_DEFAULT_PARAMS[self.kind], **self.params}
        if self.kind == "missing_pixels" and not (0.0 <= merged["p"] <= 1.0):
            raise CorruptionError(f"drop fraction p must be in [0,1], got {merged['p']}")
        if self.kind == "zoom_in" and merged["zoom"] <= 0:
            raise CorruptionError(f"zoom must be > 0, got {merged['zoom']}")
        if self.kind == "scale_out" and merged["scale"] <= 0:
            raise CorruptionError(f"scale must be > 0, got {merged['scale']}")
        object.__setattr__(self, "params", merged)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorruptionSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class UniversalPerturbation:
    """Single image-agnostic additive perturbation nu with a magnitude scale."""

    nu: np.ndarray  # (C,H,W)
    scale: float = 1.0


@dataclass
class CorruptionOutput:
    images: np.ndarray
    params: dict[str, np.ndarray]           # per-sample drawn parameter values
    dropped_mask: np.ndarray | None = None  # (M,1,H,W) bool, missing_pixels only


def draw_params(spec: CorruptionSpec, n: int) -> dict[str, np.ndarray]:
    """Per-sample parameter draws; a single shared draw unless jittering."""
    rng = np.random.default_rng(spec.seed)
    out = {}
    for name in sorted(spec.params):
        mu = spec.params[name]
        sigma = spec.param_stds.get(name, 0.0)
        if spec.per_sample_jitter:
            vals = mu + sigma * rng.standard_normal(n)
        else:
            vals = np.full(n, mu + sigma * rng.standard_normal())
        if name == "p":
            vals = np.clip(vals, 0.0, 1.0)
        elif name in ("zoom", "scale"):
            vals = np.maximum(vals, 1e-3)
        out[name] = vals.astype(np.float64)
    return out


def _draw_missing_masks(spec: CorruptionSpec, n: int, h: int, w: int,
                        p_vals: np.ndarray) -> np.ndarray:
    """Boolean drop masks, exactly round(p*H*W) pixels each.

    Shared draw -> one mask reused by every sample; jitter -> one per sample.
    """
    rng = np.random.default_rng(spec.seed + 1)  # offset: p was drawn from spec.seed
    m = n if spec.per_sample_jitter else 1
    masks = np.zeros((m, 1, h, w), dtype=bool)
    for i in range(m):
        k = int(round(float(p_vals[i]) * h * w))
        locs = rng.choice(h * w, size=k, replace=False)
        masks[i].reshape(-1)[locs] = True
    return masks


def _warp64(x: torch.Tensor, theta: torch.Tensor, fill: float) -> torch.Tensor:
    """Affine warp with `fill` outside the frame, computed at float64 so the
    neutral parameters are identity to well under 1e-6 even for float32 data."""
    x64 = x.double()
    grid = F.affine_grid(theta.double(), list(x.shape), align_corners=True)
    out = F.grid_sample(x64 - fill, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=True) + fill
    return out.to(x.dtype)


def _isotropic_warp(x: torch.Tensor, factors: torch.Tensor, fill: float) -> torch.Tensor:
    """Magnify image content by `factor` about the center (shrink when <1),
    filling exposed regions with `fill`."""
    n = x.shape[0]
    inv = 1.0 / factors.double()
    theta = torch.zeros(n, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = inv
    theta[:, 1, 1] = inv
    return _warp64(x, theta, fill)


def _rotate_warp(x: torch.Tensor, angles_deg: torch.Tensor, border_keep: float,
                 fill: float) -> torch.Tensor:
    """Rotate content counterclockwise in screen orientation (row 0 on top)
    about the center with bilinear sampling, fill outside the frame, then
    blank the border ring so only the central `border_keep` fraction survives."""
    n, _, h, w = x.shape
    rad = torch.deg2rad(angles_deg.double())
    cos, sin = torch.cos(rad), torch.sin(rad)
    # y points down in pixel coords, so screen-CCW needs the transposed form
    theta = torch.zeros(n, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin
    theta[:, 1, 1] = cos
    out = _warp64(x, theta, fill)
    if border_keep < 1.0:
        yy = torch.linspace(-1, 1, h, dtype=x.dtype).view(1, 1, h, 1)
        xx = torch.linspace(-1, 1, w, dtype=x.dtype).view(1, 1, 1, w)
        keep = ((yy.abs() <= border_keep) & (xx.abs() <= border_keep)).to(x.dtype)
        out = out * keep + fill * (1.0 - keep)
    return out


def corruption_transform(spec: CorruptionSpec, x: torch.Tensor,
                         drawn: dict[str, np.ndarray] | None = None,
                         masks: np.ndarray | None = None) -> torch.Tensor:
    """Differentiable application of a geometric/mask corruption to a torch batch.

    Raises for kinds that cannot be placed in an autograd graph here
    (adversarial kinds need external artifacts; dataset_shift has no pixel map).
    """
    if spec.kind not in DIFFERENTIABLE_KINDS:
        raise CorruptionError(f"corruption kind {spec.kind!r} is not differentiable here")
    n = x.shape[0]
    drawn = drawn if drawn is not None else draw_params(spec, n)
    if spec.kind == "identity":
        return x
    if spec.kind == "rotate":
        angles = drawn["angle"]
        if not spec.per_sample_jitter and float(angles[0]) == 0.0:
            return x
        return _rotate_warp(x, torch.from_numpy(angles), ROTATE_BORDER_KEEP, ROTATE_FILL)
    if spec.kind == "scale_out":
        return _isotropic_warp(x, torch.from_numpy(drawn["scale"]), SCALE_OUT_FILL)
    if spec.kind == "zoom_in":
        return _isotropic_warp(x, torch.from_numpy(drawn["zoom"]), SCALE_OUT_FILL)
    if spec.kind == "missing_pixels":
        if masks is None:
            masks = _draw_missing_masks(spec, n, x.shape[2], x.shape[3], drawn["p"])
        keep = 1.0 - torch.from_numpy(masks.astype(np.float64)).to(x.dtype)
        return x * keep + MISSING_FILL * (1.0 - keep)
    raise AssertionError(spec.kind)


def apply_corruption(spec: CorruptionSpec, x: np.ndarray, *,
                     perturbation: UniversalPerturbation | None = None,
                     classifier=None, labels: np.ndarray | None = None) -> CorruptionOutput:
    """Corrupt a batch (N,C,H,W in [-1,1]); deterministic given spec.seed.

    universal_adv needs `perturbation`; fgsm_adv needs `classifier` and
    `labels`. Output is clipped to [-1,1]. For missing_pixels the drop masks
    are returned for diagnostics.
    """
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[0]
    drawn = draw_params(spec, n)

    if spec.kind in DIFFERENTIABLE_KINDS:
        masks = None
        if spec.kind == "missing_pixels":
            masks = _draw_missing_masks(spec, n, x.shape[2], x.shape[3], drawn["p"])
        with torch.no_grad():
            out = corruption_transform(spec, torch.from_numpy(x), drawn, masks).numpy()
        return CorruptionOutput(np.clip(out, -1.0, 1.0), drawn, masks)

    if spec.kind == "dataset_shift":
        # The shift lives in the data source, not in a pixel map.
        return CorruptionOutput(x.copy(), drawn)

    if spec.kind == "universal_adv":
        if perturbation is None:
            raise CorruptionError("universal_adv needs a UniversalPerturbation")
        alpha = drawn["alpha"].reshape(-1, 1, 1, 1).astype(np.float32)
        out = np.clip(x + alpha * perturbation.nu[None], -1.0, 1.0)
        return CorruptionOutput(out, drawn)

    if spec.kind == "fgsm_adv":
        if classifier is None or labels is None:
            raise CorruptionError("fgsm_adv needs a classifier checkpoint and labels")
        if spec.per_sample_jitter:
            raise CorruptionError("fgsm_adv supports a shared eps only")
        out = fgsm_attack(classifier, x, labels, float(drawn["eps"][0]))
        return CorruptionOutput(out, drawn)

    raise AssertionError(spec.kind)


def fgsm_attack(clf, x: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    """One-step attack: x + eps * sign(grad_x cross-entropy), clipped to [-1,1]."""
    if eps < 0:
        raise CorruptionError(f"eps must be >= 0, got {eps}")
    xt = torch.from_numpy(np.asarray(x, dtype=np.float32)).clone().requires_grad_(True)
    yt = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    loss = F.cross_entropy(clf.model(xt), yt)
    (grad,) = torch.autograd.grad(loss, xt)
    adv = xt.detach() + eps * torch.sign(grad)
    return adv.clamp(-1.0, 1.0).numpy()


def build_universal_perturbation(clean: np.ndarray, adv: np.ndarray,
                                 scale: float = 1.0) -> UniversalPerturbation:
    """Mean of (clean_i - adv_i) over the batch; sign convention deliberate."""
    clean = np.asarray(clean, dtype=np.float32)
    adv = np.asarray(adv, dtype=np.float32)
    if clean.shape != adv.shape or clean.ndim != 4 or clean.shape[0] < 1:
        raise CorruptionError(f"shape mismatch: clean {clean.shape} vs adv {adv.shape}")
    nu = (clean - adv).mean(axis=0)
    return UniversalPerturbation(nu=nu, scale=scale)


def apply_universal(pert: UniversalPerturbation, x: np.ndarray,
                    alpha: float | None = None) -> np.ndarray:
    """x + alpha * nu, clipped to [-1,1]; alpha defaults to the stored scale."""
    a = pert.scale if alpha is None else alpha
    return np.clip(np.asarray(x, dtype=np.float32) + a * pert.nu[None], -1.0, 1.0)


def parse_corruption_flag(text: str) -> CorruptionSpec:
    """Parse 'kind:param=value,param_std=value,...' (e.g. 'rotate:angle=30').

    '<name>_std=v' sets the stddev of parameter <name>; 'jitter=1' enables
    per-sample draws; 'seed=k' seeds the draws.
    """
    kind, _, rest = text.partition(":")
    params: dict[str, float] = {}
    stds: dict[str, float] = {}
    jitter = False
    seed = 0
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if not val:
                raise CorruptionError(f"malformed corruption flag item {item!r}")
            if key == "jitter":
                jitter = val.strip() not in ("0", "false", "False")
            elif key == "seed":
                seed = int(val)
            elif key.endswith("_std"):
                stds[key[:-4]] = float(val)
            else:
                params[key] = float(val)
    return CorruptionSpec(kind=kind.strip(), params=params, param_stds=stds,
                          per_sample_jitter=jitter, seed=seed)
