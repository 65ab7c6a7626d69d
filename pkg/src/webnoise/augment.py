"""Seed-deterministic augmentation pipelines: weak, strong and contrastive views.

Images are float arrays in [0, 1] with shape H x W x C. Every random choice
comes from an explicit numpy Generator so pipelines are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

WEAK = "WEAK"
STRONG = "STRONG"
CONTRASTIVE_VIEW = "CONTRASTIVE_VIEW"

# the standard 14-op set; magnitudes live on a 0-30 scale
RANDAUGMENT_MAX_MAGNITUDE = 30
RANDAUGMENT_OPS = (
    "identity",
    "autocontrast",
    "equalize",
    "rotate",
    "solarize",
    "color",
    "posterize",
    "contrast",
    "brightness",
    "sharpness",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)


@dataclass(frozen=True)
class AugmentPolicy:
    """Parameters of one augmentation pipeline."""

    kind: str = WEAK
    randaugment_n: int = 1
    randaugment_m: int = 6
    crop_pad: int = 4
    flip_prob: float = 0.5
    resize_crop_scale: tuple[float, float] = (0.2, 1.0)
    ops: tuple[str, ...] = RANDAUGMENT_OPS

    def __post_init__(self):
        if self.kind not in (WEAK, STRONG, CONTRASTIVE_VIEW):
            raise ValueError(f"unknown policy kind: {self.kind!r}")
        if self.kind == STRONG and self.randaugment_n < 1:
            raise ValueError("STRONG policy requires randaugment_n >= 1")
        if not 0 <= self.randaugment_m <= RANDAUGMENT_MAX_MAGNITUDE:
            raise ValueError(f"randaugment_m must be in [0, {RANDAUGMENT_MAX_MAGNITUDE}]")
        for op in self.ops:
            if op not in RANDAUGMENT_OPS:
                raise ValueError(f"unknown RandAugment op: {op!r}")

    @classmethod
    def strong_for_resolution(cls, size: int) -> "AugmentPolicy":
        # low-resolution default (1, 6); high-resolution default (1, 4)
        magnitude = 6 if size <= 64 else 4
        return cls(kind=STRONG, randaugment_n=1, randaugment_m=magnitude)


def _to_pil(image: np.ndarray) -> Image.Image:
    arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return Image.fromarray(arr)


def _from_pil(img: Image.Image) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def _pad_crop(image: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad <= 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top = rng.integers(0, 2 * pad + 1)
    left = rng.integers(0, 2 * pad + 1)
    return padded[top : top + h, left : left + w]


def weak_view(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy | None = None) -> np.ndarray:
    """Random zero-padded crop plus horizontal flip."""
    policy = policy or AugmentPolicy(kind=WEAK)
    out = _pad_crop(image, policy.crop_pad, rng)
    if rng.random() < policy.flip_prob:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def _random_resize_crop(image: np.ndarray, scale: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        cw = int(round(np.sqrt(target_area * aspect)))
        ch = int(round(np.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = image[top : top + ch, left : left + cw]
            pil = _to_pil(crop).resize((w, h), Image.BILINEAR)
            return _from_pil(pil)
    return image.astype(np.float32)


def _apply_randaugment_op(img: Image.Image, op: str, magnitude: float, rng: np.random.Generator) -> Image.Image:
    frac = magnitude / RANDAUGMENT_MAX_MAGNITUDE
    sign = 1.0 if rng.random() < 0.5 else -1.0
    w, h = img.size
    if op == "identity":
        return img
    if op == "autocontrast":
        return ImageOps.autocontrast(img)
    if op == "equalize":
        return ImageOps.equalize(img)
    if op == "rotate":
        return img.rotate(sign * 30.0 * frac)
    if op == "solarize":
        return ImageOps.solarize(img, 256 - int(256 * frac))
    if op == "color":
        return ImageEnhance.Color(img).enhance(1.0 + sign * 0.9 * frac)
    if op == "posterize":
        return ImageOps.posterize(img, max(1, 8 - int(4 * frac)))
    if op == "contrast":
        return ImageEnhance.Contrast(img).enhance(1.0 + sign * 0.9 * frac)
    if op == "brightness":
        return ImageEnhance.Brightness(img).enhance(1.0 + sign * 0.9 * frac)
    if op == "sharpness":
        return ImageEnhance.Sharpness(img).enhance(1.0 + sign * 0.9 * frac)
    if op == "shear_x":
        return img.transform((w, h), Image.AFFINE, (1, sign * 0.3 * frac, 0, 0, 1, 0))
    if op == "shear_y":
        return img.transform((w, h), Image.AFFINE, (1, 0, 0, sign * 0.3 * frac, 1, 0))
    if op == "translate_x":
        return img.transform((w, h), Image.AFFINE, (1, 0, sign * 0.3 * frac * w, 0, 1, 0))
    if op == "translate_y":
        return img.transform((w, h), Image.AFFINE, (1, 0, 0, 0, 1, sign * 0.3 * frac * h))
    raise ValueError(f"unknown RandAugment op: {op!r}")


def strong_view(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random resize crop then RandAugment, plus horizontal flip."""
    if policy.kind != STRONG:
        raise ValueError("strong_view requires a STRONG policy")
    out = _random_resize_crop(image, policy.resize_crop_scale, rng)
    if rng.random() < policy.flip_prob:
        out = np.ascontiguousarray(out[:, ::-1])
    if policy.randaugment_n > 0:
        pil = _to_pil(out)
        for _ in range(policy.randaugment_n):
            op = policy.ops[rng.integers(0, len(policy.ops))]
            pil = _apply_randaugment_op(pil, op, policy.randaugment_m, rng)
        out = _from_pil(pil)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def contrastive_view(image: np.ndarray, rng: np.random.Generator, scale=(0.2, 1.0)) -> np.ndarray:
    """SimCLR-style view: resize crop, flip, color jitter, random grayscale."""
    out = _random_resize_crop(image, scale, rng)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    # brightness / contrast / saturation jitter
    out = out * rng.uniform(0.6, 1.4)
    mean = out.mean()
    out = (out - mean) * rng.uniform(0.6, 1.4) + mean
    gray = out.mean(axis=-1, keepdims=True)
    out = gray + (out - gray) * rng.uniform(0.6, 1.4)
    if rng.random() < 0.2:
        out = np.repeat(gray, out.shape[-1], axis=-1)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def batch_views(images: np.ndarray, view_fn, rng: np.random.Generator, **kwargs) -> np.ndarray:
    return np.stack([view_fn(img, rng=rng, **kwargs) for img in images])


def mixup_batch(
    xs: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Mix a batch with a shuffled partner; lam is folded so lam >= 0.5.

    The first argument of each pair keeps its position, so per-sample weights
    attached to the batch stay with the dominant image. Targets must be
    probability vectors.
    """
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be > 0, got {alpha}")
    if len(xs) < 2:
        return xs, targets, 1.0
    lam = float(rng.beta(alpha, alpha))
    lam = max(lam, 1.0 - lam)
    perm = rng.permutation(len(xs))
    mixed_x = lam * xs + (1.0 - lam) * xs[perm]
    mixed_t = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x, mixed_t, lam
