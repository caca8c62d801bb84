"""Small DCGAN-style generators/discriminators and a CNN classifier.

Trains at desk scale (16x16 / 28x28 grayscale), persists frozen checkpoints
as a torch weight file plus a sibling JSON manifest, and exposes the
deterministic, differentiable generate/discriminate surfaces the projection
engine builds on. Latent prior is uniform on [-1, 1]^d.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import Dataset, SplitSpec, make_split

DISC_CLAMP_EPS = 1e-6


class TrainingDivergedError(RuntimeError):
    """GAN training aborted on a non-finite discriminator loss."""


class CheckpointError(RuntimeError):
    pass


def _dcgan_weights_init(m: nn.Module):
    classname = m.__class__.__name__
    if "Conv" in classname:
        nn.init.normal_(m.weight.data, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias.data)
    elif "BatchNorm" in classname:
        nn.init.normal_(m.weight.data, 1.0, 0.02)
        nn.init.zeros_(m.bias.data)


class Generator(nn.Module):
    """latent (N,d) -> image (N,C,H,W) in [-1,1]; H and W must be multiples of 4."""

    def __init__(self, latent_dim: int, resolution: tuple[int, int, int], ngf: int = 32):
        super().__init__()
        c, h, w = resolution
        if h % 4 or w % 4:
            raise ValueError(f"resolution must be divisible by 4, got {h}x{w}")
        self.latent_dim = latent_dim
        self.resolution = (c, h, w)
        self.h0, self.w0 = h // 4, w // 4
        self.ngf = ngf
        self.fc = nn.Linear(latent_dim, ngf * 4 * self.h0 * self.w0)
        self.bn0 = nn.BatchNorm2d(ngf * 4)
        self.up1 = nn.ConvTranspose2d(ngf * 4, ngf * 2, 4, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(ngf * 2)
        self.up2 = nn.ConvTranspose2d(ngf * 2, ngf, 4, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(ngf)
        self.up3 = nn.ConvTranspose2d(ngf, c, 3, stride=1, padding=1)
        self.apply(_dcgan_weights_init)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents (N,{self.latent_dim}), got {tuple(z.shape)}")
        x = self.fc(z).view(-1, self.ngf * 4, self.h0, self.w0)
        x = F.relu(self.bn0(x))
        x = F.relu(self.bn1(self.up1(x)))
        x = F.relu(self.bn2(self.up2(x)))
        return torch.tanh(self.up3(x))


class Discriminator(nn.Module):
    """image (N,C,H,W) -> real/fake logit (N,)."""

    def __init__(self, resolution: tuple[int, int, int], ndf: int = 32):
        super().__init__()
        c, h, w = resolution
        self.resolution = (c, h, w)
        self.conv1 = nn.Conv2d(c, ndf, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(ndf * 2)
        self.fc = nn.Linear(ndf * 2 * (h // 4) * (w // 4), 1)
        self.apply(_dcgan_weights_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != torch.Size(self.resolution):
            raise ValueError(f"expected images {self.resolution}, got {tuple(x.shape[1:])}")
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.bn2(self.conv2(h)), 0.2)
        return self.fc(h.flatten(1)).squeeze(1)


@dataclass
class GanConfig:
    latent_dim: int = 64
    ngf: int = 32
    ndf: int = 32
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    max_steps: int | None = None  # optional cap, mainly for toy runs


@dataclass
class GeneratorCheckpoint:
    """Frozen generator/discriminator pair plus its training manifest."""

    generator: Generator
    discriminator: Discriminator
    latent_dim: int
    resolution: tuple[int, int, int]
    manifest: dict
    latent_distribution: str = "uniform[-1,1]"

    def copy(self) -> "GeneratorCheckpoint":
        return copy.deepcopy(self)

    def as_double(self) -> "GeneratorCheckpoint":
        """float64 copy (for finite-difference and reduction checks)."""
        other = self.copy()
        other.generator.double()
        other.discriminator.double()
        return other


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _iter_batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_gan(train: Dataset, cfg: GanConfig) -> GeneratorCheckpoint:
    """Adversarial training with DCGAN defaults (Adam, lr 2e-4, beta1 0.5).

    Raises TrainingDivergedError if the discriminator loss goes non-finite.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if cfg.latent_dim < 2:
        raise ValueError(f"latent_dim must be >= 2, got {cfg.latent_dim}")
    torch.manual_seed(cfg.seed)
    res = (train.channels, *train.resolution)
    netG = Generator(cfg.latent_dim, res, ngf=cfg.ngf)
    netD = Discriminator(res, ndf=cfg.ndf)
    optG = torch.optim.Adam(netG.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    optD = torch.optim.Adam(netD.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    bce = nn.BCEWithLogitsLoss()
    images = torch.from_numpy(train.images)
    gen = torch.Generator().manual_seed(cfg.seed)

    step = 0
    d_loss = g_loss = float("nan")
    t0 = time.perf_counter()
    done = False
    for _ in range(cfg.epochs):
        if done:
            break
        for idx in _iter_batches(len(train), cfg.batch_size, gen):
            real = images[idx]
            b = real.shape[0]
            z = torch.rand(b, cfg.latent_dim, generator=gen) * 2 - 1
            fake = netG(z)

            optD.zero_grad()
            loss_real = bce(netD(real), torch.ones(b))
            loss_fake = bce(netD(fake.detach()), torch.zeros(b))
            d_loss_t = loss_real + loss_fake
            if not torch.isfinite(d_loss_t):
                raise TrainingDivergedError(f"discriminator loss non-finite at step {step}")
            d_loss_t.backward()
            optD.step()

            optG.zero_grad()
            g_loss_t = bce(netD(fake), torch.ones(b))
            g_loss_t.backward()
            optG.step()

            d_loss, g_loss = d_loss_t.item(), g_loss_t.item()
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

    _freeze(netG)
    _freeze(netD)
    manifest = {
        "kind": "gan",
        "dataset": train.name,
        "n_train": len(train),
        "resolution": list(res),
        "config": asdict(cfg),
        "steps": step,
        "final_d_loss": d_loss,
        "final_g_loss": g_loss,
        "train_seconds": round(time.perf_counter() - t0, 3),
    }
    return GeneratorCheckpoint(netG, netD, cfg.latent_dim, res, manifest)


def _to_torch(arr, like: nn.Module) -> tuple[torch.Tensor, bool]:
    dtype = next(like.parameters()).dtype
    if isinstance(arr, torch.Tensor):
        return arr.to(dtype) if arr.dtype != dtype else arr, False
    return torch.from_numpy(np.asarray(arr)).to(dtype), True


def generate(ckpt: GeneratorCheckpoint, z) -> np.ndarray | torch.Tensor:
    """Decode latents to images. Accepts numpy or torch (N,d); returns the
    same container type. Torch inputs keep the autograd graph."""
    zt, was_numpy = _to_torch(z, ckpt.generator)
    if zt.dim() != 2 or zt.shape[1] != ckpt.latent_dim:
        raise ValueError(f"latent dim mismatch: expected (N,{ckpt.latent_dim}), got {tuple(zt.shape)}")
    if was_numpy:
        with torch.no_grad():
            return ckpt.generator(zt).numpy()
    return ckpt.generator(zt)


def discriminate(ckpt: GeneratorCheckpoint, x) -> np.ndarray | torch.Tensor:
    """Probability that each image is real, clamped to [eps, 1-eps], eps=1e-6."""
    xt, was_numpy = _to_torch(x, ckpt.discriminator)
    if xt.shape[1:] != torch.Size(ckpt.resolution):
        raise ValueError(f"resolution mismatch: expected {ckpt.resolution}, got {tuple(xt.shape[1:])}")
    if was_numpy:
        with torch.no_grad():
            p = torch.sigmoid(ckpt.discriminator(xt))
            return p.clamp(DISC_CLAMP_EPS, 1 - DISC_CLAMP_EPS).numpy()
    p = torch.sigmoid(ckpt.discriminator(xt))
    return p.clamp(DISC_CLAMP_EPS, 1 - DISC_CLAMP_EPS)


def sample_latents(ckpt: GeneratorCheckpoint, n: int, seed: int = 0) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(n, ckpt.latent_dim, generator=gen) * 2 - 1).numpy()


def save_gan_checkpoint(ckpt: GeneratorCheckpoint, path: str | Path) -> Path:
    """Write <path>.ckpt-style weight file plus a sibling .json manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = {
        "latent_dim": ckpt.latent_dim,
        "resolution": list(ckpt.resolution),
        "ngf": ckpt.generator.ngf,
        "ndf": ckpt.discriminator.conv1.out_channels,
    }
    torch.save({
        "arch": arch,
        "generator": ckpt.generator.state_dict(),
        "discriminator": ckpt.discriminator.state_dict(),
    }, path)
    path.with_suffix(".json").write_text(json.dumps(ckpt.manifest, indent=2, sort_keys=True))
    return path


def load_gan_checkpoint(path: str | Path) -> GeneratorCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    arch = blob["arch"]
    res = tuple(arch["resolution"])
    netG = Generator(arch["latent_dim"], res, ngf=arch["ngf"])
    netD = Discriminator(res, ndf=arch["ndf"])
    netG.load_state_dict(blob["generator"])
    netD.load_state_dict(blob["discriminator"])
    _freeze(netG)
    _freeze(netD)
    man_path = path.with_suffix(".json")
    manifest = json.loads(man_path.read_text()) if man_path.exists() else {}
    return GeneratorCheckpoint(netG, netD, arch["latent_dim"], res, manifest)


# ---------------------------------------------------------------------------
# Classifier (used by the adversarial-defense application)
# ---------------------------------------------------------------------------


class SmallCNN(nn.Module):
    def __init__(self, resolution: tuple[int, int, int], num_classes: int):
        super().__init__()
        c, h, w = resolution
        self.resolution = (c, h, w)
        self.num_classes = num_classes
        self.conv1 = nn.Conv2d(c, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.fc1 = nn.Linear(32 * (h // 4) * (w // 4), 128)
        self.fc2 = nn.Linear(128, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.fc1(h.flatten(1)))
        return self.fc2(h)


@dataclass
class ClassifierConfig:
    epochs: int = 3
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ClassifierCheckpoint:
    model: SmallCNN
    num_classes: int
    test_accuracy: float
    manifest: dict = field(default_factory=dict)


def train_classifier(train: Dataset, cfg: ClassifierConfig,
                     test: Dataset | None = None) -> ClassifierCheckpoint:
    """Supervised training; records accuracy on `test` (or a 10% carve-out)."""
    torch.manual_seed(cfg.seed)
    if test is None:
        train, test = make_split(train, SplitSpec(train_fraction=0.9, seed=cfg.seed))
    res = (train.channels, *train.resolution)
    k = max(train.num_classes, test.num_classes)
    model = SmallCNN(res, k)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    images = torch.from_numpy(train.images)
    labels = torch.from_numpy(train.labels)
    gen = torch.Generator().manual_seed(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in _iter_batches(len(train), cfg.batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            loss.backward()
            opt.step()
    _freeze(model)
    acc = classifier_accuracy_model(model, test)
    manifest = {
        "kind": "classifier",
        "dataset": train.name,
        "n_train": len(train),
        "num_classes": k,
        "config": asdict(cfg),
        "test_accuracy": acc,
    }
    return ClassifierCheckpoint(model, k, acc, manifest)


def classify(clf: ClassifierCheckpoint, x) -> np.ndarray:
    """Predicted labels for an image batch (numpy or torch)."""
    xt, _ = _to_torch(x, clf.model)
    with torch.no_grad():
        return clf.model(xt).argmax(dim=1).numpy()


def classifier_accuracy_model(model: SmallCNN, ds: Dataset, batch: int = 512) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(ds), batch):
            x = torch.from_numpy(ds.images[i:i + batch])
            pred = model(x).argmax(dim=1).numpy()
            correct += int((pred == ds.labels[i:i + batch]).sum())
    return correct / len(ds)


def classifier_accuracy(clf: ClassifierCheckpoint, ds: Dataset) -> float:
    return classifier_accuracy_model(clf.model, ds)


def save_classifier_checkpoint(clf: ClassifierCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "arch": {"resolution": list(clf.model.resolution), "num_classes": clf.num_classes},
        "model": clf.model.state_dict(),
        "test_accuracy": clf.test_accuracy,
    }, path)
    path.with_suffix(".json").write_text(json.dumps(clf.manifest, indent=2, sort_keys=True))
    return path


def load_classifier_checkpoint(path: str | Path) -> ClassifierCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = SmallCNN(tuple(blob["arch"]["resolution"]), blob["arch"]["num_classes"])
    model.load_state_dict(blob["model"])
    _freeze(model)
    man_path = path.with_suffix(".json")
    manifest = json.loads(man_path.read_text()) if man_path.exists() else {}
    return ClassifierCheckpoint(model, blob["arch"]["num_classes"],
                                blob["test_accuracy"], manifest)
