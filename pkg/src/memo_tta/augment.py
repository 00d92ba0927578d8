"""Test-time augmentation families: AugMix-lite, standard crop/flip, identity.

Images are float arrays shaped ``(C, H, W)`` with values in ``[0, 1]``.
All randomness flows from :func:`rng_for`, a Philox (counter-based)
generator keyed by ``(seed, *keys)``, so a draw depends only on its key and
never on evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Photometric and geometric ops with no counterpart among the test corruptions.
DEFAULT_OPS = ("autocontrast", "equalize", "posterize", "rotate", "solarize",
               "shear_x", "shear_y", "translate_x", "translate_y")
# Opt-in; these overlap with the brightness/contrast corruptions.
EXTENDED_OPS = ("brightness", "contrast", "sharpness")
ALL_OPS = DEFAULT_OPS + EXTENDED_OPS
FORBIDDEN_OP_WORDS = ("noise", "blur", "pixel", "jpeg", "compress")

POLICY_KINDS = ("augmix_lite", "standard", "identity")
MAX_LEVEL = 10


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def point_seed(global_seed: int, index: int) -> int:
    """Stable per-test-point seed derived from ``(global_seed, index)``."""
    return int(np.random.SeedSequence([int(global_seed), int(index)]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "augmix_lite"
    ops: tuple = DEFAULT_OPS
    chains: int = 3
    depth: int = 3
    alpha: float = 1.0
    severity: int = 3

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {POLICY_KINDS}")
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            if any(w in op for w in FORBIDDEN_OP_WORDS):
                raise ValueError(f"op {op!r} resembles a test corruption and is not allowed")
            if op not in ALL_OPS:
                raise ValueError(f"unknown augmentation op {op!r}")
        if not self.ops and self.kind == "augmix_lite":
            raise ValueError("augmix_lite needs at least one op")
        if self.chains < 1 or self.depth < 1 or self.alpha <= 0:
            raise ValueError("chains and depth must be >= 1 and alpha > 0")
        if not 1 <= self.severity <= MAX_LEVEL:
            raise ValueError(f"severity must be in 1..{MAX_LEVEL}")


# ---------------------------------------------------------------------------
# resampling

def _bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C,H,W) at float coords with edge clamping."""
    _, h, w = img.shape
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(img.dtype)
    fx = (sx - x0).astype(img.dtype)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _affine(img: np.ndarray, mat) -> np.ndarray:
    """Apply the inverse map ``(x, y) -> mat @ (x - c, y - c, 1) + c`` around the image centre."""
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx, dy = xx - cx, yy - cy
    (a, b, tx), (c, d, ty) = mat
    sx = a * dx + b * dy + tx + cx
    sy = c * dx + d * dy + ty + cy
    return _bilinear(img, sy, sx)


# ---------------------------------------------------------------------------
# ops: (img, level, sign) -> img

def _to_levels(img):
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.int64)


def autocontrast(img, level=0, sign=1):
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (img - lo) / safe, img).astype(img.dtype)


def equalize(img, level=0, sign=1):
    """Histogram equalization per channel on 256 grey levels."""
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        q = _to_levels(img[ch])
        hist = np.bincount(q.ravel(), minlength=256)
        nz = np.flatnonzero(hist)
        if len(nz) <= 1:
            out[ch] = img[ch]
            continue
        cdf = np.cumsum(hist)
        cdf_min = cdf[nz[0]]
        lut = (cdf - cdf_min) / max(cdf[-1] - cdf_min, 1)
        out[ch] = lut[q]
    return out


def posterize(img, level, sign=1):
    bits = max(1, 4 - int(level * 4 / MAX_LEVEL))
    shift = 8 - bits
    return ((_to_levels(img) >> shift) << shift).astype(img.dtype) / 255.0


def solarize(img, level, sign=1):
    thresh = 1.0 - level / MAX_LEVEL
    return np.where(img >= thresh, 1.0 - img, img).astype(img.dtype)


def rotate(img, level, sign=1):
    theta = math.radians(sign * level * 30.0 / MAX_LEVEL)
    c, s = math.cos(theta), math.sin(theta)
    return _affine(img, ((c, s, 0.0), (-s, c, 0.0)))


def shear_x(img, level, sign=1):
    return _affine(img, ((1.0, sign * level * 0.3 / MAX_LEVEL, 0.0), (0.0, 1.0, 0.0)))


def shear_y(img, level, sign=1):
    return _affine(img, ((1.0, 0.0, 0.0), (sign * level * 0.3 / MAX_LEVEL, 1.0, 0.0)))


def translate_x(img, level, sign=1):
    px = sign * int(level * img.shape[2] / 3 / MAX_LEVEL)
    return _affine(img, ((1.0, 0.0, float(px)), (0.0, 1.0, 0.0)))


def translate_y(img, level, sign=1):
    px = sign * int(level * img.shape[1] / 3 / MAX_LEVEL)
    return _affine(img, ((1.0, 0.0, 0.0), (0.0, 1.0, float(px))))


def _factor(level, sign):
    return 1.0 + sign * level * 0.9 / MAX_LEVEL


def brightness(img, level, sign=1):
    return img * _factor(level, sign)


def contrast(img, level, sign=1):
    mu = img.mean()
    return mu + _factor(level, sign) * (img - mu)


def _box3(img):
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[1:]
    return sum(p[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def sharpness(img, level, sign=1):
    """Unsharp mask: blend between a 3x3 box blur and the image."""
    blur = _box3(img)
    return blur + _factor(level, sign) * (img - blur)


OPS = {
    "autocontrast": autocontrast, "equalize": equalize, "posterize": posterize,
    "solarize": solarize, "rotate": rotate, "shear_x": shear_x, "shear_y": shear_y,
    "translate_x": translate_x, "translate_y": translate_y, "brightness": brightness,
    "contrast": contrast, "sharpness": sharpness,
}


def apply_op(img: np.ndarray, name: str, level: int, sign: int = 1) -> np.ndarray:
    return np.clip(OPS[name](img, level, sign), 0.0, 1.0).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# AugMix-lite

@dataclass(frozen=True)
class OpCall:
    name: str
    level: int
    sign: int


@dataclass(frozen=True)
class AugMixPlan:
    """A fully sampled augmentation: skip weight ``m``, chain weights, chains."""
    m: float
    weights: tuple
    chains: tuple = field(default_factory=tuple)


def sample_augmix_plan(rng: np.random.Generator, policy: AugmentationPolicy) -> AugMixPlan:
    weights = rng.dirichlet([policy.alpha] * policy.chains)
    m = rng.beta(policy.alpha, policy.alpha)
    chains = []
    for _ in range(policy.chains):
        depth = int(rng.integers(1, policy.depth + 1))
        chain = []
        for _ in range(depth):
            name = policy.ops[int(rng.integers(len(policy.ops)))]
            level = int(rng.integers(1, policy.severity + 1))
            sign = 1 if rng.random() < 0.5 else -1
            chain.append(OpCall(name, level, sign))
        chains.append(tuple(chain))
    return AugMixPlan(float(m), tuple(float(w) for w in weights), tuple(chains))


def apply_augmix_plan(x: np.ndarray, plan: AugMixPlan) -> np.ndarray:
    """``m * x + (1 - m) * sum_i w_i * chain_i(x)``, clamped to [0, 1]."""
    mix = np.zeros_like(x)
    for w, chain in zip(plan.weights, plan.chains):
        img = x
        for call in chain:
            img = apply_op(img, call.name, call.level, call.sign)
        mix += np.asarray(w, x.dtype) * img
    out = np.asarray(plan.m, x.dtype) * x + np.asarray(1.0 - plan.m, x.dtype) * mix
    return np.clip(out, 0.0, 1.0)


def augmix_lite(x: np.ndarray, seed, policy: AugmentationPolicy,
                force_m: Optional[float] = None) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    plan = sample_augmix_plan(rng, policy)
    if force_m is not None:
        plan = AugMixPlan(float(force_m), plan.weights, plan.chains)
    return apply_augmix_plan(x, plan)


# ---------------------------------------------------------------------------
# standard augmentations

def resized_crop(x: np.ndarray, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    """Crop the box ``(top, left, ch, cw)`` and resample it back to full size."""
    _, h, w = x.shape
    sy = top + (np.arange(h) + 0.5) * (ch / h) - 0.5
    sx = left + (np.arange(w) + 0.5) * (cw / w) - 0.5
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    return _bilinear(x, yy, xx)


def hflip(x: np.ndarray) -> np.ndarray:
    return x[:, :, ::-1].copy()


def standard_augment(x: np.ndarray, seed, force_scale: Optional[float] = None,
                     force_flip: Optional[bool] = None) -> np.ndarray:
    """Random resized crop (area scale in [0.5, 1]) followed by a coin-flip mirror."""
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    _, h, w = x.shape
    scale = rng.uniform(0.5, 1.0)
    log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3))
    fy, fx = rng.random(), rng.random()
    flip = rng.random() < 0.5
    if force_scale is not None:
        scale, log_ratio = force_scale, 0.0
    if force_flip is not None:
        flip = force_flip
    area = scale * h * w
    ratio = math.exp(log_ratio)
    cw = min(float(w), math.sqrt(area * ratio))
    ch = min(float(h), math.sqrt(area / ratio))
    out = resized_crop(x, fy * (h - ch), fx * (w - cw), ch, cw)
    if flip:
        out = hflip(out)
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------

def augment_one(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    if policy.kind == "identity":
        return x.copy()
    if policy.kind == "standard":
        return standard_augment(x, rng)
    return augmix_lite(x, rng, policy)


def sample_augmentations(x: np.ndarray, B: int, policy: AugmentationPolicy, seed: int) -> list:
    """``B`` augmented copies of ``x``; copy ``i`` uses the stream ``(seed, i)``.

    Because each copy has its own key, the first ``k`` copies of a draw of size
    ``B >= k`` coincide with a draw of size ``k``.
    """
    if B < 1:
        raise ValueError(f"need at least one augmentation, got B={B}")
    return [augment_one(x, policy, rng_for(seed, i)) for i in range(B)]


def crop_flip_batch(batch: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Training-time crop-with-padding (edge replicated) and horizontal flip."""
    n, _, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
