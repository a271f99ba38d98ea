"""Synthetic noisily-tagged segmentation benchmark.

Each image holds one main object whose class is fixed by geometry, colour
range and surface texture, drawn over a cluttered low-saturation
background.  Optionally a smaller off-class distractor co-occurs.  A fixed
fraction of records gets a wrong tag (a class that does not appear in the
image); the true mask is written next to every image for evaluation.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from noisyseg.data.imageio import save_mask, write_pixels, to_uint8
from noisyseg.data.manifest import ATTENTION_TRAIN, EVAL, FINETUNE_POOL, Manifest, Record
from noisyseg.seeding import rng_for

log = logging.getLogger(__name__)

GEOMETRIES = ("disk", "square", "triangle", "cross", "diamond", "ring", "bar")
TEXTURES = ("flat", "stripes", "checker", "dots")


@dataclass(frozen=True)
class ClassStyle:
    geometry: str
    hue: float  # centre of the hue range, in [0, 1)
    hue_width: float = 0.05
    texture: str = "flat"


def default_styles(class_count: int) -> list[ClassStyle]:
    return [
        ClassStyle(GEOMETRIES[c % len(GEOMETRIES)], hue=c / class_count, texture=TEXTURES[c % len(TEXTURES)])
        for c in range(class_count)
    ]


@dataclass
class SynthSpec:
    class_count: int = 5
    image_size: int = 64
    styles: list[ClassStyle] | None = None
    distractor_rate: float = 0.2
    noise_rate: float = 0.3
    counts: dict = field(default_factory=lambda: {ATTENTION_TRAIN: 2000, FINETUNE_POOL: 500, EVAL: 500})
    seed: int = 0
    radius: tuple[float, float] = (10.0, 17.0)
    distractor_radius: tuple[float, float] = (5.0, 8.0)
    clutter: int = 3

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must lie in [0, 1]")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if self.styles is None:
            self.styles = default_styles(self.class_count)
        if len(self.styles) != self.class_count:
            raise ValueError("one style per class is required")


# -- rendering ---------------------------------------------------------------

def shape_mask(geometry: str, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if geometry == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if geometry == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if geometry == "triangle":
        # equilateral, circumradius r
        out = np.ones_like(u, dtype=bool)
        for k in range(3):
            th = angle + np.pi / 2 + 2 * np.pi * k / 3
            out &= dx * np.cos(th) + dy * np.sin(th) <= r / 2
        return out
    if geometry == "cross":
        w = r / 3
        return ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    if geometry == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if geometry == "ring":
        d2 = u ** 2 + v ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if geometry == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.4 * r)
    raise ValueError(f"unknown geometry {geometry!r}")


def _texture(kind: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    period = int(rng.integers(4, 7))
    phase = int(rng.integers(0, period))
    if kind == "flat":
        return np.zeros((size, size))
    if kind == "stripes":
        return (((xx + yy + phase) // (period // 2 + 1)) % 2).astype(np.float64)
    if kind == "checker":
        return (((xx + phase) // period + (yy + phase) // period) % 2).astype(np.float64)
    if kind == "dots":
        return ((((xx + phase) % period) < 2) & (((yy + phase) % period) < 2)).astype(np.float64)
    raise ValueError(f"unknown texture {kind!r}")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _background(size, clutter, rng):
    c0 = _hsv(rng.random(), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.75))
    c1 = _hsv(rng.random(), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.75))
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    t = np.clip(0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(int(rng.integers(0, clutter + 1))):
        col = _hsv(rng.random(), rng.uniform(0.0, 0.3), rng.uniform(0.2, 0.8))
        m = shape_mask("disk", size, rng.uniform(0, size), rng.uniform(0, size), rng.uniform(3, 9), 0.0)
        img[:, m] = col[:, None]
    return img


def _object_colour(style: ClassStyle, rng):
    return _hsv(style.hue + rng.uniform(-style.hue_width, style.hue_width),
                rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95))


def _paint(img, truth, cls, style, center, radius, rng):
    size = img.shape[1]
    m = shape_mask(style.geometry, size, center[0], center[1], radius, rng.uniform(0, 2 * np.pi))
    col = _object_colour(style, rng)
    tex = _texture(style.texture, size, rng)
    shade = col[:, None, None] * (1.0 - 0.3 * tex)[None]
    img[:, m] = shade[:, m]
    truth[m] = cls
    return m


def render(spec: SynthSpec, main_class: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One ``3 x S x S`` image in [0, 1] and its true label mask (classes 1..K)."""
    size = spec.image_size
    img = _background(size, spec.clutter, rng)
    truth = np.zeros((size, size), dtype=np.int64)
    r = rng.uniform(*spec.radius)
    margin = r + 1
    center = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
    if rng.random() < spec.distractor_rate:
        other = int(rng.choice([c for c in range(1, spec.class_count + 1) if c != main_class]))
        dr = rng.uniform(*spec.distractor_radius)
        # place away from the main object where possible
        for _ in range(20):
            dc = (rng.uniform(dr + 1, size - dr - 1), rng.uniform(dr + 1, size - dr - 1))
            if np.hypot(dc[0] - center[0], dc[1] - center[1]) > r + dr:
                break
        _paint(img, truth, other, spec.styles[other - 1], dc, dr, rng)
    _paint(img, truth, main_class, spec.styles[main_class - 1], center, r, rng)
    img = img + rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0), truth


def synth_generate(spec: SynthSpec, out_dir) -> Manifest:
    """Render every split to ``out_dir`` and write ``out_dir/manifest.tsv``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "truth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic data to {out}: {exc}") from exc
    records, truth_paths = [], {}
    k = spec.class_count
    for split, n in spec.counts.items():
        rng = rng_for(spec.seed, "synth", split)
        classes = rng.integers(1, k + 1, size=n)
        noisy = np.zeros(n, dtype=bool)
        noisy[rng.choice(n, size=int(round(spec.noise_rate * n)), replace=False)] = True
        for i in range(n):
            img, truth = render(spec, int(classes[i]), rng)
            tag = int(classes[i])
            if noisy[i]:
                present = set(np.unique(truth).tolist()) - {0}
                pool = [c for c in range(1, k + 1) if c not in present] or \
                    [c for c in range(1, k + 1) if c != classes[i]]
                tag = int(rng.choice(pool))
            name = f"{split}_{i:05d}.png"
            write_pixels(out / "images" / name, to_uint8(img))
            save_mask(out / "truth" / name, truth)
            records.append(Record(f"images/{name}", tag, split))
            truth_paths[f"images/{name}"] = f"truth/{name}"
        log.info("rendered %d %s images", n, split)
    manifest = Manifest(out, records, truth_paths)
    manifest.write(out / "manifest.tsv")
    return manifest
