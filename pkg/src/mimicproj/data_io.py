"""Dataset ingestion and preprocessing for small grayscale image corpora.

Supports the IDX binary layout (MNIST family), a flat-binary layout with a
JSON sidecar (USPS-style), and a procedurally generated glyph corpus that can
stand in for the real datasets when they are not on disk. All images are
normalized to [-1, 1] to match the tanh output of the generators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DATASET_NAMES = ("mnist", "fashion_mnist", "usps", "synthetic")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Standard filenames inside root/<name>/ for IDX datasets.
IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DatasetError(Exception):
    """Base error for dataset ingestion problems."""


class MissingFileError(DatasetError):
    pass


class FormatError(DatasetError):
    """Magic number, checksum, or shape mismatch in a dataset file."""


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """Map raw [0, 255] intensities to [-1, 1] via x/127.5 - 1."""
    return raw.astype(np.float32) / 127.5 - 1.0


def denormalize_pixels(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_pixels` (returns float, not quantized)."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


@dataclass(frozen=True)
class Dataset:
    """Labeled image corpus with pixel values in [-1, 1].

    images: float32 array of shape (N, C, H, W)
    labels: int64 array of shape (N,)
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    resolution: tuple[int, int]
    channels: int

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise DatasetError(f"unknown dataset name {self.name!r}")
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N,C,H,W), got {self.images.shape}")
        n, c, h, w = self.images.shape
        if (h, w) != tuple(self.resolution) or c != self.channels:
            raise DatasetError("resolution/channels fields disagree with images array")
        if len(self.labels) != n:
            raise DatasetError(f"{n} images but {len(self.labels)} labels")
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise DatasetError(f"pixel values outside [-1,1]: [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/test partition.

    With holdout_class set, the train side contains only non-holdout images
    (train_fraction of them); the test side gets the remaining non-holdout
    images plus every holdout-class image (anomaly protocol).
    """

    train_fraction: float = 0.8
    holdout_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must be in (0,1), got {self.train_fraction}")


def read_idx_images(path: Path) -> np.ndarray:
    """Read an IDX3 image file (big-endian, magic 0x00000803) as uint8 (N,H,W)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing IDX image file: {path}")
    data = path.read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    expected = 16 + n * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} != expected {expected} for {n}x{h}x{w}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, h, w)


def read_idx_labels(path: Path) -> np.ndarray:
    """Read an IDX1 label file (big-endian, magic 0x00000801) as int64 (N,)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing IDX label file: {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(data) != 8 + n:
        raise FormatError(f"{path}: size {len(data)} != expected {8 + n} for {n} labels")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path: Path, images_u8: np.ndarray) -> None:
    n, h, w = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def _load_idx_dataset(name: str, root: Path) -> Dataset:
    d = root / name
    imgs_tr = read_idx_images(d / IDX_FILES["train_images"])
    labs_tr = read_idx_labels(d / IDX_FILES["train_labels"])
    test_imgs = d / IDX_FILES["test_images"]
    if test_imgs.exists():
        imgs = np.concatenate([imgs_tr, read_idx_images(test_imgs)])
        labs = np.concatenate([labs_tr, read_idx_labels(d / IDX_FILES["test_labels"])])
    else:
        imgs, labs = imgs_tr, labs_tr
    if len(imgs) != len(labs):
        raise FormatError(f"{name}: {len(imgs)} images but {len(labs)} labels")
    x = normalize_pixels(imgs)[:, None, :, :]
    return Dataset(name=name, images=x, labels=labs,
                   resolution=imgs.shape[1:], channels=1)


def _load_usps(root: Path) -> Dataset:
    """USPS-style layout: flat uint8 binaries plus a JSON sidecar manifest.

    root/usps/manifest.json: {"n": N, "resolution": [16,16],
    "images_file": "images.bin", "labels_file": "labels.bin"}
    """
    d = root / "usps"
    man_path = d / "manifest.json"
    if not man_path.exists():
        raise MissingFileError(f"missing USPS manifest: {man_path}")
    man = json.loads(man_path.read_text())
    n = int(man["n"])
    h, w = (int(v) for v in man.get("resolution", (16, 16)))
    img_path = d / man.get("images_file", "images.bin")
    lab_path = d / man.get("labels_file", "labels.bin")
    for p in (img_path, lab_path):
        if not p.exists():
            raise MissingFileError(f"missing USPS data file: {p}")
    raw = np.fromfile(img_path, dtype=np.uint8)
    if raw.size != n * h * w:
        raise FormatError(f"{img_path}: {raw.size} bytes != {n}x{h}x{w}")
    labels = np.fromfile(lab_path, dtype=np.uint8).astype(np.int64)
    if labels.size != n:
        raise FormatError(f"{lab_path}: {labels.size} labels != {n}")
    x = normalize_pixels(raw.reshape(n, h, w))[:, None, :, :]
    return Dataset(name="usps", images=x, labels=labels, resolution=(h, w), channels=1)


def save_dataset_idx(ds: Dataset, root: Path, manifest_extra: dict | None = None) -> Path:
    """Materialize a dataset in the IDX layout under root/<name>/ with a JSON manifest."""
    d = Path(root) / ds.name
    d.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.rint(denormalize_pixels(ds.images[:, 0])), 0, 255).astype(np.uint8)
    write_idx_images(d / IDX_FILES["train_images"], u8)
    write_idx_labels(d / IDX_FILES["train_labels"], ds.labels)
    manifest = {
        "name": ds.name,
        "n": len(ds),
        "resolution": list(ds.resolution),
        "channels": ds.channels,
        "format": "idx",
    }
    manifest.update(manifest_extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_dataset(name: str, root: str | Path) -> Dataset:
    """Load a dataset by name from root, normalized to [-1, 1].

    mnist/fashion_mnist expect the IDX layout; usps the flat-binary layout.
    synthetic is generated deterministically (and cached as IDX files under
    root) if not already materialized.
    """
    root = Path(root)
    if name in ("mnist", "fashion_mnist"):
        return _load_idx_dataset(name, root)
    if name == "usps":
        return _load_usps(root)
    if name == "synthetic":
        d = root / "synthetic"
        if not (d / IDX_FILES["train_images"]).exists():
            ds = generate_synthetic(seed=0)
            save_dataset_idx(ds, root, manifest_extra={"generator": "glyphs-v1", "seed": 0})
        return _load_idx_dataset("synthetic", root)
    raise DatasetError(f"unknown dataset name {name!r}")


def make_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic split; see :class:`SplitSpec` for the holdout protocol."""
    rng = np.random.default_rng(spec.seed)
    if spec.holdout_class is None:
        perm = rng.permutation(len(ds))
        n_train = int(round(spec.train_fraction * len(ds)))
        return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])

    k = spec.holdout_class
    anom_idx = np.flatnonzero(ds.labels == k)
    if anom_idx.size == 0:
        raise DatasetError(f"holdout_class {k} absent from dataset {ds.name}")
    norm_idx = np.flatnonzero(ds.labels != k)
    perm = norm_idx[rng.permutation(norm_idx.size)]
    n_train = int(round(spec.train_fraction * norm_idx.size))
    train = ds.subset(perm[:n_train])
    test = ds.subset(np.concatenate([perm[n_train:], anom_idx]))
    return train, test


def resize_images(batch: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (N,C,H,W) batch; output clipped to [-1, 1].

    Uses the half-pixel-center sampling convention (align_corners=False,
    no antialiasing); a same-size target returns the input unchanged.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ValueError(f"batch must be (N,C,H,W), got shape {batch.shape}")
    if batch.shape[2:] == (th, tw):
        return batch.copy()
    t = torch.from_numpy(batch)
    out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False)
    return np.clip(out.numpy(), -1.0, 1.0)


# ---------------------------------------------------------------------------
# Procedural glyph corpus
# ---------------------------------------------------------------------------

GLYPH_CLASSES = 10

SHADE_Y = 0.50   # background shading slope, vertical (top brighter)
SHADE_X = 0.26   # background shading slope, horizontal (left brighter)


def _glyph_sdf(cls: int, x: np.ndarray, y: np.ndarray, w: float) -> np.ndarray:
    """Signed distance (negative inside) for glyph class `cls` on a [-1,1]^2 frame."""
    r = np.hypot(x, y)
    if cls == 0:  # ring
        return np.abs(r - 0.55) - w
    if cls == 1:  # vertical bar
        return np.maximum(np.abs(x) - w, np.abs(y) - 0.6)
    if cls == 2:  # horizontal bar
        return np.maximum(np.abs(y) - w, np.abs(x) - 0.6)
    if cls == 3:  # filled disk
        return r - 0.42
    if cls == 4:  # plus
        v = np.maximum(np.abs(x) - w, np.abs(y) - 0.6)
        h = np.maximum(np.abs(y) - w, np.abs(x) - 0.6)
        return np.minimum(v, h)
    if cls == 5:  # main diagonal stroke
        c = np.cos(np.pi / 4)
        xr, yr = c * (x + y), c * (y - x)
        return np.maximum(np.abs(xr) - w, np.abs(yr) - 0.62)
    if cls == 6:  # X
        c = np.cos(np.pi / 4)
        d1 = np.maximum(np.abs(c * (x + y)) - w, np.abs(c * (y - x)) - 0.62)
        d2 = np.maximum(np.abs(c * (y - x)) - w, np.abs(c * (x + y)) - 0.62)
        return np.minimum(d1, d2)
    if cls == 7:  # square outline
        box = np.maximum(np.abs(x), np.abs(y))
        return np.abs(box - 0.5) - w
    if cls == 8:  # two stacked disks
        d1 = np.hypot(x, y - 0.33) - 0.26
        d2 = np.hypot(x, y + 0.33) - 0.26
        return np.minimum(d1, d2)
    if cls == 9:  # T
        top = np.maximum(np.abs(y - 0.45) - w, np.abs(x) - 0.55)
        stem = np.maximum(np.abs(x) - w, np.abs(y) - 0.55)
        return np.minimum(top, stem)
    raise ValueError(f"glyph class out of range: {cls}")


_DEFAULT_STYLE = dict(scale=(0.85, 1.15), angle_deg=(-4.0, 4.0), shift=(-0.10, 0.10),
                      width=(0.12, 0.18), intensity=(0.75, 1.0))
# Systematically shifted domain: smaller, thinner, rotated, lower contrast.
_SHIFTED_STYLE = dict(scale=(0.62, 0.80), angle_deg=(6.0, 18.0), shift=(-0.08, 0.08),
                      width=(0.08, 0.12), intensity=(0.55, 0.80))

SYNTH_STYLES = {"default": _DEFAULT_STYLE, "shifted": _SHIFTED_STYLE}


def generate_synthetic(n_per_class: int = 200, resolution: tuple[int, int] = (28, 28),
                       n_classes: int = GLYPH_CLASSES, style: str = "default",
                       seed: int = 0) -> Dataset:
    """Render a deterministic corpus of antialiased glyphs on a black background.

    Ten parametric shape classes with per-sample jitter in pose, stroke width
    and intensity. The "shifted" style applies a systematic distribution shift
    (scale/rotation/contrast) used as the cross-domain target corpus.
    """
    if style not in SYNTH_STYLES:
        raise ValueError(f"unknown synthetic style {style!r}")
    st = SYNTH_STYLES[style]
    h, w = resolution
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    edge = 2.0 / min(h, w)  # ~1 px antialias band
    glyph_lift = -0.12     # glyph sits slightly above the baseline stroke

    n = n_per_class * n_classes
    images = np.empty((n, 1, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cls in range(n_classes):
        for _ in range(n_per_class):
            s = rng.uniform(*st["scale"])
            ang = np.deg2rad(rng.uniform(*st["angle_deg"]))
            cx, cy = rng.uniform(*st["shift"], size=2)
            sw = rng.uniform(*st["width"])
            amp = rng.uniform(*st["intensity"])
            # inverse pose: map canvas coords into the glyph frame
            xs, ys = (xx - cx) / s, (yy - cy) / s
            xr = np.cos(ang) * xs + np.sin(ang) * ys
            yr = -np.sin(ang) * xs + np.cos(ang) * ys
            sdf = _glyph_sdf(cls % GLYPH_CLASSES, xr, yr - glyph_lift, sw)
            glyph_ink = amp * np.clip(0.5 - sdf / edge, 0.0, 1.0)
            # Smooth directional shading behind the glyph (lit from the top
            # left, in the glyph frame): a dense low-frequency cue that
            # anchors the pose over the whole frame, the way shading does in
            # face photos. Sparse floating glyphs alone are nearly
            # pose-ambiguous, which makes corruption recovery ill-posed.
            shade = amp * (SHADE_Y * (1.0 - yr) / 2.0 + SHADE_X * (1.0 - xr) / 2.0)
            ink = np.maximum(glyph_ink, np.clip(shade, 0.0, 1.0))
            images[i, 0] = -1.0 + 2.0 * ink
            labels[i] = cls
            i += 1
    perm = rng.permutation(n)
    return Dataset(name="synthetic", images=images[perm], labels=labels[perm],
                   resolution=(h, w), channels=1)
