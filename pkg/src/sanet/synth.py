"""Synthetic scene generator.

Scenes are a textured background (class 0) with overlapping rectangles,
ellipses and stripes painted on top; every shape carries one foreground
class.  A class always has the same base colour and texture (oriented
sinusoid with a class-specific frequency) regardless of the dataset seed, so
train and validation splits drawn with different seeds share appearance.
Each image also receives one deliberately small shape.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import encode_pgm, encode_ppm, atomic_write
from .tensor import SeededRng

APPEARANCE_SEED = 20200701


def class_appearance(num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base colours in [0.15, 0.85], texture frequencies and orientations per class."""
    rng = np.random.default_rng(APPEARANCE_SEED)
    colors = rng.uniform(0.15, 0.85, size=(num_classes, 3))
    freqs = rng.uniform(0.25, 1.2, size=num_classes)
    angles = rng.uniform(0, np.pi, size=num_classes)
    return colors, freqs, angles


def _shape_mask(kind: str, h: int, w: int, rng: SeededRng, small: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if small:
        size = rng.integers(3, max(4, min(h, w) // 10) + 1, size=2)
    else:
        size = rng.integers(min(h, w) // 5, min(h, w) // 2 + 1, size=2)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    if kind == "rect":
        return (np.abs(yy - cy) <= size[0] // 2) & (np.abs(xx - cx) <= size[1] // 2)
    if kind == "ellipse":
        ry, rx = max(size[0] / 2, 1.5), max(size[1] / 2, 1.5)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    theta = rng.uniform(0, np.pi)
    width = max(2, int(size[0]) // (2 if not small else 1))
    dist = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
    return np.abs(dist) <= width / 2


def render_scene(h: int, w: int, num_classes: int, rng: SeededRng, anchor_class: int | None = None):
    """One (rgb uint8 (H, W, 3), labels uint8 (H, W)) pair."""
    colors, freqs, angles = class_appearance(num_classes)
    labels = np.zeros((h, w), dtype=np.uint8)
    n_large = int(rng.integers(2, 5))
    n_small = 1
    kinds = ("rect", "ellipse", "stripe")
    for s in range(n_large + n_small):
        small = s >= n_large
        kind = kinds[int(rng.integers(0, 3))]
        if anchor_class is not None and s == 0:
            cls = anchor_class
        else:
            cls = int(rng.integers(1, num_classes)) if num_classes > 1 else 0
        mask = _shape_mask(kind, h, w, rng, small)
        labels[mask] = cls
    yy, xx = np.mgrid[0:h, 0:w]
    image = colors[labels].copy()
    phase = rng.uniform(0, 2 * np.pi, size=num_classes)
    tex = np.sin(freqs[labels] * (np.cos(angles[labels]) * yy + np.sin(angles[labels]) * xx) + phase[labels])
    image += 0.08 * tex[..., None]
    image *= rng.uniform(0.85, 1.15)  # global illumination
    image += rng.normal((h, w, 3), 0.03)
    rgb = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return rgb, labels


def generate(count: int, extents: tuple[int, int], num_classes: int, rng: SeededRng):
    h, w = extents
    if h % 8 or w % 8:
        raise ValueError(f"extents {h}x{w} must be divisible by 8")
    if num_classes < 1 or num_classes > 255:
        raise ValueError("num_classes must be in [1, 255]")
    out = []
    for i in range(count):
        anchor = 1 + i % (num_classes - 1) if num_classes > 1 else None
        out.append(render_scene(h, w, num_classes, rng.child(i), anchor))
    return out


def write_dataset(directory, count: int, extents: tuple[int, int], num_classes: int, seed: int) -> Path:
    """Generate ``count`` scenes and write ``image_XXXX.ppm`` / ``label_XXXX.pgm``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (rgb, lab) in enumerate(generate(count, extents, num_classes, SeededRng(seed))):
        atomic_write(directory / f"image_{i:04d}.ppm", encode_ppm(rgb))
        atomic_write(directory / f"label_{i:04d}.pgm", encode_pgm(lab))
    return directory


def to_arrays(scenes) -> tuple[np.ndarray, np.ndarray]:
    """Stack scenes into float images (N, 3, H, W) in [0, 1] and labels (N, H, W)."""
    images = np.stack([rgb.transpose(2, 0, 1) for rgb, _ in scenes]).astype(np.float64) / 255.0
    labels = np.stack([lab for _, lab in scenes])
    return images, labels
