"""Desk-scale datasets: synthetic shapes, IDX / CIFAR-binary I/O, corruptions."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import rng_for


class DataFormatError(ValueError):
    pass


class BadMagic(DataFormatError):
    pass


class TruncatedData(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray            # (N,) int64
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.labels = np.asarray(self.labels, np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n], labels=self.labels[:n], meta=dict(self.meta))

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("circle", "ring", "bar", "cross", "square", "triangle", "frame", "star", "half_disk", "hexagon")


def _regular_polygon(u, v, sides, apothem, phase):
    inside = np.ones_like(u, dtype=bool)
    for k in range(sides):
        a = phase + 2 * math.pi * k / sides
        inside &= (u * math.cos(a) + v * math.sin(a)) <= apothem
    return inside


def _inside(shape: str, u, v):
    r = np.hypot(u, v)
    if shape == "circle":
        return r <= 1.0
    if shape == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8
    if shape == "triangle":
        return _regular_polygon(u, v, 3, 0.5, -math.pi / 2)
    if shape == "cross":
        return ((abs(u) <= 0.3) & (abs(v) <= 0.95)) | ((abs(v) <= 0.3) & (abs(u) <= 0.95))
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if shape == "bar":
        return (abs(u) <= 1.0) & (abs(v) <= 0.3)
    if shape == "star":
        return r <= 0.55 + 0.4 * np.cos(5 * np.arctan2(v, u))
    if shape == "frame":
        m = np.maximum(abs(u), abs(v))
        return (m <= 0.85) & (m >= 0.55)
    if shape == "half_disk":
        return (r <= 1.0) & (v >= -0.2)
    if shape == "hexagon":
        return _regular_polygon(u, v, 6, 0.87, 0.0)
    raise ValueError(shape)


def render_shape(shape: str, size: int, cx: float, cy: float, radius: float, angle: float,
                 fg: float, bg: float, supersample: int = 4) -> np.ndarray:
    """Anti-aliased (supersampled) grey image ``(1, size, size)``."""
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    c, sn = math.cos(angle), math.sin(angle)
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    cover = _inside(shape, u, v).reshape(size, s, size, s).mean(axis=(1, 3))
    return (bg + (fg - bg) * cover)[None].astype(np.float32)


def _shading(rng, size: int, amplitude: float) -> np.ndarray:
    """Smooth random field: a 4x4 grid of offsets bilinearly upsampled."""
    grid = rng.uniform(-amplitude, amplitude, size=(4, 4))
    t = np.linspace(0, 3, size)
    i0 = np.minimum(np.floor(t).astype(int), 2)
    f = t - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def generate_synthetic(num_classes: int, n_per_class: int, image_size: int = 32, seed: int = 0,
                       split: str = "train", shading: float = 0.08, grain: float = 0.03,
                       contrast_range=(0.25, 0.6)) -> Dataset:
    """Balanced shape-classification set; the class is the shape type.

    Each image gets smooth background shading of amplitude ``shading`` and
    per-pixel sensor grain of standard deviation ``grain``.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    rng = rng_for(seed, 0x5EED)
    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[rng.permutation(n)] if n else labels
    images = np.empty((n, 1, image_size, image_size), np.float32)
    for i, y in enumerate(labels):
        radius = rng.uniform(0.22, 0.36) * image_size
        margin = radius * 0.9
        cx = rng.uniform(margin, image_size - margin)
        cy = rng.uniform(margin, image_size - margin)
        angle = rng.uniform(0, 2 * math.pi)
        bg = rng.uniform(0.1, 0.9)
        gap = rng.uniform(*contrast_range) * (1 if rng.random() < 0.5 else -1)
        fg = bg + gap
        if not 0.0 <= fg <= 1.0:
            fg = min(max(bg - gap, 0.0), 1.0)
        img = render_shape(SHAPES[y], image_size, cx, cy, radius, angle, fg, bg)
        if shading:
            img = img + _shading(rng, image_size, shading)
        if grain:
            img = img + grain * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split,
                   {"source": "synthetic", "seed": seed, "image_size": image_size,
                    "n_per_class": n_per_class, "shading": shading, "grain": grain})


# ---------------------------------------------------------------------------
# IDX and CIFAR binary

IDX_UBYTE = 0x08


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise TypeError("write_idx expects uint8 data")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (IDX_UBYTE << 8) | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedData(f"{path}: file shorter than IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != IDX_UBYTE or not 1 <= magic & 0xFF <= 4:
        raise BadMagic(f"{path}: bad IDX magic 0x{magic:08x}")
    nd = magic & 0xFF
    if len(raw) < 4 + 4 * nd:
        raise TruncatedData(f"{path}: IDX header truncated")
    dims = struct.unpack(f">{nd}I", raw[4:4 + 4 * nd])
    need = int(np.prod(dims))
    body = raw[4 + 4 * nd:]
    if len(body) < need:
        raise TruncatedData(f"{path}: expected {need} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body[:need], np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "test_clean") -> Dataset:
    """Load an IDX image file (N,H,W or N,C,H,W) with its label file."""
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    if imgs.ndim != 4:
        raise DataFormatError(f"{images_path}: expected 3 or 4 image dims, got {imgs.ndim}")
    if labels.ndim != 1 or len(labels) != len(imgs):
        raise DataFormatError(f"{labels_path}: {labels.shape} labels for {len(imgs)} images")
    if len(labels) and labels.max() >= num_classes:
        raise LabelRangeError(f"{labels_path}: label {int(labels.max())} outside [0, {num_classes})")
    return Dataset(imgs.astype(np.float32) / 255.0, labels.astype(np.int64), num_classes, split,
                   {"source": "idx", "path": str(images_path)})


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(images) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_idx(dataset: Dataset, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>-images.idx`` and ``<prefix>-labels.idx``."""
    prefix = Path(prefix)
    ip = prefix.with_name(prefix.name + "-images.idx")
    lp = prefix.with_name(prefix.name + "-labels.idx")
    imgs = to_uint8(dataset.images)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    write_idx(ip, imgs)
    write_idx(lp, dataset.labels.astype(np.uint8))
    return ip, lp


CIFAR_ROW = 1 + 3 * 32 * 32


def load_cifar_binary(path, num_classes: int = 10, split: str = "test_clean") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_ROW:
        raise TruncatedData(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_ROW}-byte row")
    rows = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_ROW)
    labels = rows[:, 0].astype(np.int64)
    bad = labels >= num_classes
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LabelRangeError(f"{path}: row {i} has label {int(labels[i])} outside [0, {num_classes})")
    imgs = rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(imgs, labels, num_classes, split, {"source": "cifar_binary", "path": str(path)})


# ---------------------------------------------------------------------------
# corruptions

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "defocus_blur_approx", "contrast", "brightness", "pixelate")
# held out for hyperparameter selection, never used as a test corruption
VALIDATION_KINDS = ("speckle_noise",)

SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    "defocus_blur_approx": (1.0, 1.5, 2.0, 2.5, 3.0),
    "contrast": (0.6, 0.45, 0.3, 0.2, 0.12),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "pixelate": (0.8, 0.65, 0.5, 0.4, 0.3),
    "speckle_noise": (0.08, 0.15, 0.25, 0.35, 0.5),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def param(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def _disk_blur(img: np.ndarray, radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    kern = (xx ** 2 + yy ** 2 <= radius ** 2 + 1e-9).astype(np.float64)
    kern /= kern.sum()
    _, h, w = img.shape
    p = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(2 * r + 1):
        for j in range(2 * r + 1):
            if kern[i, j]:
                out += kern[i, j] * p[:, i:i + h, j:j + w]
    return out


def _pixelate(img: np.ndarray, factor: float) -> np.ndarray:
    """Box-average onto a coarser grid, then paint each cell back at full size."""
    _, h, w = img.shape
    sh, sw = max(1, round(h * factor)), max(1, round(w * factor))
    cell = (np.arange(h) * sh // h)[:, None] * sw + (np.arange(w) * sw // w)[None, :]
    counts = np.bincount(cell.ravel(), minlength=sh * sw)
    out = np.empty(img.shape, np.float64)
    for c in range(img.shape[0]):
        sums = np.bincount(cell.ravel(), weights=img[c].ravel(), minlength=sh * sw)
        out[c] = (sums / counts)[cell]
    return out


def apply_corruption(img: np.ndarray, kind: str, param: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one ``(C,H,W)`` image with an explicit strength parameter."""
    x = img.astype(np.float64)
    if kind == "gaussian_noise":
        out = x + param * rng.standard_normal(x.shape)
    elif kind == "speckle_noise":
        out = x + x * param * rng.standard_normal(x.shape)
    elif kind == "shot_noise":
        out = rng.poisson(x * param) / param
    elif kind == "defocus_blur_approx":
        out = _disk_blur(x, param)
    elif kind == "contrast":
        mu = x.mean(axis=(1, 2), keepdims=True)
        out = mu + param * (x - mu)
    elif kind == "brightness":
        out = x + param
    elif kind == "pixelate":
        out = _pixelate(x, param)
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupt every image; image ``i`` draws from the stream ``(seed, kind, severity, i)``."""
    kind_id = list(SEVERITY_TABLE).index(spec.kind)
    imgs = np.empty_like(dataset.images)
    for i, img in enumerate(dataset.images):
        imgs[i] = apply_corruption(img, spec.kind, spec.param, rng_for(spec.seed, kind_id, spec.severity, i))
    meta = dict(dataset.meta, corruption=spec.kind, severity=spec.severity, corruption_seed=spec.seed)
    return Dataset(imgs, dataset.labels.copy(), dataset.num_classes,
                   f"test_shifted({spec.kind},{spec.severity})", meta)
