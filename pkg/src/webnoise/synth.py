"""Synthetic desk-scale image corpora.

Two disjoint image families:

* class-labeled "shape scenes" (the in-distribution source): textured
  backgrounds carrying a few geometric figures whose kind and hue encode the
  class;
* unlabeled OOD pools, either smooth two-color gradients (visually simple,
  clearly disjoint from the shape family) or held-out shape scenes with
  unseen hue/kind combinations (visually related, harder).

Everything is generated from an explicit numpy Generator so corpora are
bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def _hsv_to_rgb(h, s, v):
    h = (h % 1.0) * 6.0
    i = np.floor(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = int(i) % 6
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _smooth_noise(size: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency grayscale noise by upsampling a coarse grid."""
    coarse = rng.random((cells, cells))
    reps = int(np.ceil(size / cells))
    up = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    # cheap box blur to hide the grid
    k = max(2, reps // 2)
    pad = np.pad(up, k, mode="edge")
    acc = np.zeros_like(up)
    for dy in range(-k, k + 1):
        for dx in range(-k, k + 1):
            acc += pad[k + dy : k + dy + size, k + dx : k + dx + size]
    return acc / (2 * k + 1) ** 2


def _paint_shape(img, kind, cx, cy, r, color, size):
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    if kind == 0:  # disk
        mask = d2 < r * r
    elif kind == 1:  # square
        mask = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) < r
    elif kind == 2:  # ring
        mask = (d2 < r * r) & (d2 > (0.55 * r) ** 2)
    else:  # diagonal stripes clipped to a disk
        band = np.sin((xx + yy) * (np.pi / max(2.0, r / 1.5))) > 0
        mask = band & (d2 < (1.3 * r) ** 2)
    img[mask] = 0.72 * np.asarray(color) + 0.28 * img[mask]


def shape_class_images(
    n: int,
    n_classes: int,
    size: int,
    rng: np.random.Generator,
    hue_offset: float = 0.0,
    kind_offset: int = 0,
    hue_jitter: float = 0.04,
    n_distractors: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Textured scenes of class-coded geometric figures; returns (images, labels).

    Classes encode (hue, figure kind); hue jitter plus random-hue distractor
    figures keep neighboring classes confusable so the classification task is
    learnable but not saturated at desk scale.
    """
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = rng.integers(0, n_classes, size=n)
    for i in range(n):
        c = int(labels[i])
        base = 0.25 + 0.3 * rng.random()
        bg = base + 0.35 * (_smooth_noise(size, 4, rng) - 0.5)
        img = np.stack([bg, bg, bg], axis=-1)
        tint = _hsv_to_rgb(rng.random(), 0.25, 0.3 + 0.2 * rng.random())
        img = 0.85 * img + 0.15 * np.asarray(tint)
        hue = (hue_offset + c / n_classes + rng.normal(0, hue_jitter)) % 1.0
        kind = (c + kind_offset) % 4
        for _ in range(n_distractors):
            color = _hsv_to_rgb(rng.random(), 0.5 + 0.3 * rng.random(), 0.5 + 0.4 * rng.random())
            cx, cy = rng.uniform(0.15 * size, 0.85 * size, size=2)
            r = rng.uniform(0.08 * size, 0.16 * size)
            _paint_shape(img, int(rng.integers(0, 4)), cx, cy, r, color, size)
        for _ in range(2):
            color = _hsv_to_rgb(hue + rng.normal(0, 0.015), 0.65 + 0.2 * rng.random(), 0.55 + 0.4 * rng.random())
            cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
            r = rng.uniform(0.10 * size, 0.2 * size)
            _paint_shape(img, kind, cx, cy, r, color, size)
        img += rng.normal(0, 0.03, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def gradient_pool_images(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth two-color gradients; a visually simple, disjoint OOD family."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        theta = rng.uniform(0, 2 * np.pi)
        t = xx * np.cos(theta) + yy * np.sin(theta)
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        c0 = rng.uniform(0.05, 0.95, size=3)
        c1 = rng.uniform(0.05, 0.95, size=3)
        img = (1 - t)[..., None] * c0 + t[..., None] * c1
        img += rng.normal(0, 0.01, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images


def related_pool_images(n: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Shape scenes from held-out hue/kind combinations; a visually related OOD family."""
    images, _ = shape_class_images(
        n, n_classes, size, rng, hue_offset=0.5 / n_classes, kind_offset=2
    )
    return images


def make_corpus(
    kind: str,
    n_train: int,
    n_test: int,
    n_ood: int,
    n_classes: int,
    size: int,
    seed: int,
) -> dict:
    """Generate a full desk-scale corpus: labeled train/test plus an OOD pool."""
    rng = np.random.default_rng(seed)
    train_images, train_labels = shape_class_images(n_train, n_classes, size, rng)
    test_images, test_labels = shape_class_images(n_test, n_classes, size, rng)
    if kind == "gradients":
        ood = gradient_pool_images(n_ood, size, rng)
    elif kind == "related-shapes":
        ood = related_pool_images(n_ood, n_classes, size, rng)
    elif kind == "mixed":
        # half visually simple, half visually related: gives loss-based and
        # feature-based detectors complementary blind spots
        half = n_ood // 2
        ood = np.concatenate(
            [
                gradient_pool_images(half, size, rng),
                related_pool_images(n_ood - half, n_classes, size, rng),
            ]
        )
        ood = ood[rng.permutation(n_ood)]
    else:
        raise ValueError(f"unknown OOD pool kind: {kind!r}")
    return {
        "train_images": train_images,
        "train_labels": train_labels,
        "test_images": test_images,
        "test_labels": test_labels,
        "ood_images": ood,
        "class_names": [f"class{c:02d}" for c in range(n_classes)],
        "ood_kind": kind,
    }
