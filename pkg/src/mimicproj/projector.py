"""Latent-space projection engine.

Four ways to project observations onto a frozen generator's image manifold:

* mimicgan_project — alternating optimization: fit a corruption surrogate to
  the observations (T1 RMSProp steps on its weights), then projected gradient
  descent on the latents conditioned on it (T2 steps, clip to [-1,1]^d),
  repeated for up to `outer_iters` rounds.
* pgd_project — the identity-corruption special case (plain projection).
* known_f_project — residual computed through the true, known corruption.
* encoder_baseline_project — fits a small encoder at test time and returns
  the decoded projection.

The generator and discriminator are never updated by any of these.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corruption_zoo import CorruptionSpec, corruption_transform, DIFFERENTIABLE_KINDS
from .generator_zoo import GeneratorCheckpoint, DISC_CLAMP_EPS
from .metrics import reprojection_error
from .surrogate import CorruptionSurrogate, init_surrogate

OBS_NORMS = ("L1", "L2")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term}: {value}")
        self.term = term


@dataclass
class ProjectorConfig:
    """Knobs for all projection methods; defaults follow the reference settings
    (T1 = T2 = 25, both learning rates 1e-2, adversarial weight 1e-4, L1
    observation norm, PGD baseline at 5e-3)."""

    outer_iters: int = 20          # T
    surrogate_iters: int = 25      # T1
    latent_iters: int = 25         # T2
    surrogate_lr: float = 1e-2     # gamma_s
    latent_lr: float = 1e-2        # gamma_g
    adv_weight: float = 1e-4       # lambda_adv
    obs_norm: str = "L1"
    seed: int = 0
    pgd_lr: float = 5e-3
    init_draws: int = 1000
    # Outer rounds at the start whose surrogate loop is skipped, so the first
    # surrogate fit conditions on a meaningful projection estimate instead of
    # the blurry mean-latent image. 0 keeps the original loop order.
    surrogate_warmup_rounds: int = 0
    reset_optimizer_each_outer: bool = False
    early_stop_rel_tol: float = 1e-4
    early_stop_patience: int = 3
    encoder_lr: float = 1e-3
    encoder_iters: int | None = None  # default: outer_iters * latent_iters
    record_latent_trace: bool = False

    def __post_init__(self):
        if min(self.outer_iters, self.surrogate_iters, self.latent_iters) < 0:
            raise ValueError("iteration counts must be >= 0")
        if min(self.surrogate_lr, self.latent_lr, self.pgd_lr, self.encoder_lr) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        if self.obs_norm not in OBS_NORMS:
            raise ValueError(f"obs_norm must be one of {OBS_NORMS}")


@dataclass
class LossBreakdown:
    """total = obs_term + adv_weight * adv_term, by construction."""

    total: torch.Tensor
    obs_term: torch.Tensor
    adv_term: torch.Tensor


@dataclass
class ProjectionResult:
    z_star: np.ndarray
    x_hat: np.ndarray
    mimic_error: list[float]        # objective value after each outer iteration
    method: str
    wall_time_s: float
    d_proj: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    latent_trace: list[np.ndarray] | None = None


def init_latents(ckpt: GeneratorCheckpoint, n: int, seed: int,
                 draws: int = 1000) -> torch.Tensor:
    """Every row is the same average of `draws` uniform [-1,1]^d samples,
    i.e. an estimate of the latent-space mean (effectively near zero)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    dtype = next(ckpt.generator.parameters()).dtype
    samples = torch.rand(draws, ckpt.latent_dim, generator=gen, dtype=dtype) * 2 - 1
    return samples.mean(dim=0, keepdim=True).repeat(n, 1)


def clip_latent(z):
    """Element-wise clamp to [-1,1] (numpy in/out or torch in/out)."""
    if isinstance(z, torch.Tensor):
        return z.clamp(-1.0, 1.0)
    return np.clip(np.asarray(z), -1.0, 1.0)


def compute_loss(ckpt: GeneratorCheckpoint, surrogate: CorruptionSurrogate | None,
                 z: torch.Tensor, y_obs: torch.Tensor, cfg: ProjectorConfig,
                 transform=None) -> LossBreakdown:
    """Observation discrepancy plus weighted adversarial term.

    obs_term sums per-sample L1 (or L2) norms of y_obs - f(G(z)), where f is
    the surrogate, the `transform` callable (known corruption), or identity.
    adv_term is sum log(1 - D(G(z))) on clamped discriminator outputs.
    """
    if y_obs.shape[0] != z.shape[0]:
        raise ValueError(f"batch mismatch: {z.shape[0]} latents vs {y_obs.shape[0]} observations")
    x = ckpt.generator(z)
    if surrogate is not None:
        y_est = surrogate(x)
    elif transform is not None:
        y_est = transform(x)
    else:
        y_est = x
    resid = (y_obs - y_est).flatten(1)
    if cfg.obs_norm == "L1":
        obs = resid.abs().sum(dim=1).sum()
    else:
        obs = resid.pow(2).sum(dim=1).sqrt().sum()
    p = torch.sigmoid(ckpt.discriminator(x)).clamp(DISC_CLAMP_EPS, 1 - DISC_CLAMP_EPS)
    adv = torch.log1p(-p).sum()
    for name, term in (("obs_term", obs), ("adv_term", adv)):
        if not torch.isfinite(term):
            raise NonFiniteLossError(name, float(term))
    total = obs + cfg.adv_weight * adv
    return LossBreakdown(total=total, obs_term=obs, adv_term=adv)


def _as_obs_tensor(y_obs, ckpt: GeneratorCheckpoint) -> torch.Tensor:
    dtype = next(ckpt.generator.parameters()).dtype
    t = y_obs if isinstance(y_obs, torch.Tensor) else torch.from_numpy(np.asarray(y_obs))
    t = t.to(dtype)
    if t.dim() != 4 or t.shape[1:] != torch.Size(ckpt.resolution):
        raise ValueError(f"observations must be (N,{ckpt.resolution}), got {tuple(t.shape)}")
    return t


def _finish(z: torch.Tensor, ckpt: GeneratorCheckpoint, trace: list[float],
            method: str, t0: float, cfg: ProjectorConfig, x_gt, meta: dict,
            latent_trace) -> ProjectionResult:
    with torch.no_grad():
        x_hat = ckpt.generator(z).numpy()
    z_np = z.detach().numpy().copy()
    d_proj = None
    if x_gt is not None:
        d_proj = reprojection_error(np.asarray(x_gt), x_hat).per_sample
    return ProjectionResult(
        z_star=z_np, x_hat=x_hat, mimic_error=trace, method=method,
        wall_time_s=time.perf_counter() - t0, d_proj=d_proj,
        meta={"config": asdict(cfg), **meta}, latent_trace=latent_trace,
    )


def _run_alternating(ckpt: GeneratorCheckpoint, y_obs, cfg: ProjectorConfig, *,
                     method: str, surrogate: CorruptionSurrogate | None = None,
                     update_surrogate: bool = False, transform=None,
                     latent_lr: float | None = None, x_gt=None, z_init=None):
    """Shared loop behind mimicgan/pgd/known_f. PGD is literally this loop
    with no surrogate, so the identity-surrogate reduction is structural."""
    t0 = time.perf_counter()
    y = _as_obs_tensor(y_obs, ckpt)
    n = y.shape[0]
    if n == 1 and method == "mimicgan":
        warnings.warn("projecting a single observation: the corruption and the "
                      "signal are not identifiable; expect high variance")
    torch.manual_seed(cfg.seed)
    if z_init is None:
        z_init = init_latents(ckpt, n, cfg.seed, cfg.init_draws)
    z = z_init.detach().clone().to(y.dtype).requires_grad_(True)
    lr_z = cfg.latent_lr if latent_lr is None else latent_lr

    def make_opts():
        opt_z = torch.optim.RMSprop([z], lr=lr_z)
        opt_s = None
        if update_surrogate and surrogate is not None:
            opt_s = torch.optim.RMSprop(surrogate.parameters(), lr=cfg.surrogate_lr)
        return opt_z, opt_s

    opt_z, opt_s = make_opts()
    trace: list[float] = []
    latent_trace: list[np.ndarray] | None = [] if cfg.record_latent_trace else None
    stopped_early = False
    outer_done = 0
    for t in range(cfg.outer_iters):
        if cfg.reset_optimizer_each_outer and t > 0:
            opt_z, opt_s = make_opts()
        if opt_s is not None and t >= cfg.surrogate_warmup_rounds:
            for _ in range(cfg.surrogate_iters):
                lb = compute_loss(ckpt, surrogate, z, y, cfg, transform)
                opt_s.zero_grad()
                lb.total.backward()
                opt_s.step()
        for _ in range(cfg.latent_iters):
            lb = compute_loss(ckpt, surrogate, z, y, cfg, transform)
            opt_z.zero_grad()
            lb.total.backward()
            opt_z.step()
            with torch.no_grad():
                z.clamp_(-1.0, 1.0)
            if latent_trace is not None:
                latent_trace.append(z.detach().numpy().copy())
        with torch.no_grad():
            trace.append(float(compute_loss(ckpt, surrogate, z, y, cfg, transform).total))
        outer_done = t + 1
        # early stop: relative improvement below tol for `patience` rounds
        pat = cfg.early_stop_patience
        if pat > 0 and len(trace) > pat:
            prev, cur = trace[-pat - 1], trace[-1]
            if prev != 0 and (prev - cur) / abs(prev) < cfg.early_stop_rel_tol:
                stopped_early = True
                break
    meta = {"outer_iters_run": outer_done, "stopped_early": stopped_early, "n_obs": n}
    return _finish(z, ckpt, trace, method, t0, cfg, x_gt, meta, latent_trace)


def pgd_project(ckpt: GeneratorCheckpoint, y_obs, cfg: ProjectorConfig,
                x_gt=None) -> ProjectionResult:
    """Plain projection: z <- clip(z - lr * RMSProp-grad) on the identity-
    corruption loss, for outer_iters * latent_iters total latent steps."""
    return _run_alternating(ckpt, y_obs, cfg, method="pgd",
                            latent_lr=cfg.pgd_lr, x_gt=x_gt)


def known_f_project(ckpt: GeneratorCheckpoint, y_obs, f: CorruptionSpec,
                    cfg: ProjectorConfig, x_gt=None) -> ProjectionResult:
    """Projection with the residual computed through the true corruption f."""
    if f.kind not in DIFFERENTIABLE_KINDS:
        raise ValueError(f"corruption kind {f.kind!r} is not differentiable; "
                         f"known-corruption projection supports {DIFFERENTIABLE_KINDS}")
    y = np.asarray(y_obs)
    from .corruption_zoo import draw_params, _draw_missing_masks  # same draws as apply_corruption
    drawn = draw_params(f, y.shape[0])
    masks = None
    if f.kind == "missing_pixels":
        masks = _draw_missing_masks(f, y.shape[0], y.shape[2], y.shape[3], drawn["p"])

    def transform(x):
        return corruption_transform(f, x, drawn, masks)

    return _run_alternating(ckpt, y_obs, cfg, method="known_f",
                            transform=transform, x_gt=x_gt)


def mimicgan_project(ckpt: GeneratorCheckpoint, y_obs, cfg: ProjectorConfig,
                     surrogate: CorruptionSurrogate | None = None,
                     freeze_surrogate: bool = False,
                     x_gt=None) -> tuple[ProjectionResult, CorruptionSurrogate]:
    """Corruption-mimicking projection (alternating surrogate/latent descent).

    A fresh surrogate is initialized per call unless one is passed in;
    freeze_surrogate pins its weights (with surrogate_iters=0 this reduces
    exactly to pgd_project at the same latent learning rate).
    """
    y = np.asarray(y_obs) if not isinstance(y_obs, torch.Tensor) else y_obs
    if y.shape[0] < 1:
        raise ValueError("need at least one observation")
    torch.manual_seed(cfg.seed)
    if surrogate is None:
        surrogate = init_surrogate(tuple(ckpt.resolution), seed=cfg.seed)
    dtype = next(ckpt.generator.parameters()).dtype
    surrogate = surrogate.to(dtype)
    update = not freeze_surrogate and cfg.surrogate_iters > 0
    result = _run_alternating(ckpt, y_obs, cfg, method="mimicgan",
                              surrogate=surrogate, update_surrogate=update,
                              x_gt=x_gt)
    return result, surrogate


class LatentEncoder(nn.Module):
    """Discriminator-shaped trunk ending in a tanh latent head."""

    def __init__(self, resolution: tuple[int, int, int], latent_dim: int, nef: int = 32):
        super().__init__()
        c, h, w = resolution
        self.conv1 = nn.Conv2d(c, nef, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(nef, nef * 2, 4, stride=2, padding=1)
        self.fc = nn.Linear(nef * 2 * (h // 4) * (w // 4), latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return torch.tanh(self.fc(h.flatten(1)))


def encoder_baseline_project(ckpt: GeneratorCheckpoint, y_obs, cfg: ProjectorConfig,
                             x_gt=None) -> ProjectionResult:
    """Test-time encoder baseline: train E to minimize |G(E(y)) - y| on the
    observation batch, then return G(E(y))."""
    t0 = time.perf_counter()
    y = _as_obs_tensor(y_obs, ckpt)
    torch.manual_seed(cfg.seed)
    enc = LatentEncoder(tuple(ckpt.resolution), ckpt.latent_dim)
    enc = enc.to(next(ckpt.generator.parameters()).dtype)
    opt = torch.optim.RMSprop(enc.parameters(), lr=cfg.encoder_lr)
    iters = cfg.encoder_iters if cfg.encoder_iters is not None \
        else cfg.outer_iters * cfg.latent_iters
    trace: list[float] = []
    for _ in range(iters):
        z = enc(y)
        resid = (y - ckpt.generator(z)).flatten(1)
        if cfg.obs_norm == "L1":
            loss = resid.abs().sum(dim=1).sum()
        else:
            loss = resid.pow(2).sum(dim=1).sqrt().sum()
        if not torch.isfinite(loss):
            raise NonFiniteLossError("obs_term", float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss))
    with torch.no_grad():
        z = clip_latent(enc(y))
    return _finish(z.requires_grad_(False), ckpt, trace, "encoder", t0, cfg, x_gt,
                   {"encoder_iters": iters, "n_obs": y.shape[0]}, None)


def project(ckpt: GeneratorCheckpoint, y_obs, cfg: ProjectorConfig, method: str,
            f: CorruptionSpec | None = None, x_gt=None) -> ProjectionResult:
    """Dispatch by method name: mimicgan | pgd | known_f | encoder."""
    if method == "mimicgan":
        return mimicgan_project(ckpt, y_obs, cfg, x_gt=x_gt)[0]
    if method == "pgd":
        return pgd_project(ckpt, y_obs, cfg, x_gt=x_gt)
    if method == "known_f":
        if f is None:
            raise ValueError("known_f needs the corruption spec")
        return known_f_project(ckpt, y_obs, f, cfg, x_gt=x_gt)
    if method == "encoder":
        return encoder_baseline_project(ckpt, y_obs, cfg, x_gt=x_gt)
    raise ValueError(f"unknown projection method {method!r}")
