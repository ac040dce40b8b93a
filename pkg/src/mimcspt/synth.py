"""Procedural two-domain image corpora with a controlled appearance gap.

Both domains draw the same shape classes with the same colors and textures;
they differ only in pose policy. The canonical domain renders each shape
upright and near the image center (an eye-level look). The overhead domain
rotates shapes uniformly and places them anywhere that fits, the way objects
sit under a top-down view. Class identity is geometry alone, so a model that
keys on upright poses degrades on the overhead split.

Rendering is deterministic from (spec, count, seed): 4x supersampled masks,
smooth low-frequency backgrounds, and optional small clutter discs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import CorpusManifest, write_manifest
from .ppm import write_ppm
from .tensor import Rng

__all__ = ["DomainSpec", "gen_synthetic_domain", "SHAPE_NAMES"]

SHAPE_NAMES = ("disc", "square", "bar", "cross", "triangle", "ring")

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class DomainSpec:
    """Generator settings for one domain."""

    kind: str                        # canonical | overhead
    classes: int = 4
    image_size: int = 32
    shapes: tuple = SHAPE_NAMES
    clutter: float = 2.0             # expected clutter dots per image
    scale_range: tuple = (0.55, 0.8) # shape diameter as fraction of image side
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("canonical", "overhead"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.classes > len(self.shapes):
            raise ValueError(f"{self.classes} classes but only {len(self.shapes)} shapes")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "classes": self.classes,
                "image_size": self.image_size, "shapes": list(self.shapes),
                "clutter": self.clutter, "scale_range": list(self.scale_range),
                "texture_seed": self.texture_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["shapes"] = tuple(d.get("shapes", SHAPE_NAMES))
        d["scale_range"] = tuple(d.get("scale_range", (0.5, 0.75)))
        return cls(**d)


def _shape_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of local coordinates (u right, v down, unit half-extent)."""
    if name == "disc":
        return u * u + v * v <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.82
    if name == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.32)
    if name == "cross":
        return ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)) & (np.maximum(np.abs(u), np.abs(v)) <= 1.0)
    if name == "triangle":
        return (v <= 0.85) & (v >= 2.0 * np.abs(u) - 0.85)
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.4)
    raise ValueError(f"unknown shape {name!r}")


def _smooth_background(side: int, rng: Rng) -> np.ndarray:
    """Low-frequency color field: coarse random grid, bilinearly upsampled.

    The palette is muted so foreground shapes can always contrast with it.
    """
    coarse = rng.uniform(0.2, 0.6, (4, 4, 3))
    idx = np.linspace(0, 3, side)
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, 3)
    frac = idx - lo
    rows = coarse[lo] * (1 - frac)[:, None, None] + coarse[hi] * frac[:, None, None]
    field = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    field = field + rng.normal(0.0, 0.015, field.shape)
    return np.clip(field, 0.0, 1.0)


def _render_blob(canvas: np.ndarray, name: str, center: tuple, radius: float,
                 angle: float, color: np.ndarray) -> None:
    """Composite one anti-aliased shape onto `canvas` in place."""
    side = canvas.shape[0]
    ss = side * _SUPERSAMPLE
    ys, xs = np.mgrid[0:ss, 0:ss]
    px = (xs + 0.5) / _SUPERSAMPLE
    py = (ys + 0.5) / _SUPERSAMPLE
    dx = (px - center[0]) / radius
    dy = (py - center[1]) / radius
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    mask = _shape_mask(name, u, v).astype(np.float32)
    coverage = mask.reshape(side, _SUPERSAMPLE, side, _SUPERSAMPLE).mean(axis=(1, 3))
    canvas += coverage[..., None] * (color - canvas)


def _draw_image(spec: DomainSpec, class_id: int, rng: Rng) -> np.ndarray:
    side = spec.image_size
    img = _smooth_background(side, rng)

    # clutter dots are far smaller than any class shape, so they add texture
    # without impersonating the disc class
    n_clutter = int(rng.integers(0, max(1, int(spec.clutter * 2)) + 1))
    for _ in range(n_clutter):
        c = rng.uniform(0.0, 1.0, 3)
        r = rng.uniform(0.02, 0.045) * side
        pos = (rng.uniform(r, side - r), rng.uniform(r, side - r))
        _render_blob(img, "disc", pos, r, 0.0, c)

    radius = rng.uniform(*spec.scale_range) * side / 2.0
    if spec.kind == "canonical":
        angle = 0.0
        cx = side / 2.0 + rng.uniform(-0.06, 0.06) * side
        cy = side / 2.0 + rng.uniform(-0.06, 0.06) * side
    else:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        cx = rng.uniform(radius, side - radius)
        cy = rng.uniform(radius, side - radius)
    # colors are shared across classes (geometry is the only class signal),
    # rejection-sampled until they contrast strongly with the local background
    local = img[int(np.clip(cy, 0, side - 1)), int(np.clip(cx, 0, side - 1))]
    color = rng.uniform(0.0, 1.0, 3)
    while np.abs(color - local).sum() < 0.9:
        color = rng.uniform(0.0, 1.0, 3)
    _render_blob(img, spec.shapes[class_id], (cx, cy), radius, angle, color)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic_domain(spec: DomainSpec, count: int, seed: int, out_dir,
                         corpus_id: str | None = None, split: str = "train",
                         labeled: bool = True) -> str:
    """Write a balanced corpus of `count` images and return the manifest path.

    Identical (spec, count, seed) produce byte-identical output. Class c
    occupies records c*count/K .. (c+1)*count/K - 1; the loader's epoch
    shuffle handles ordering.
    """
    if count % spec.classes != 0:
        raise ValueError(f"count {count} not divisible by {spec.classes} classes")
    os.makedirs(out_dir, exist_ok=True)
    rng = Rng(seed).substream(f"synth:{spec.kind}:{spec.texture_seed}")
    per_class = count // spec.classes
    records = []
    for class_id in range(spec.classes):
        for j in range(per_class):
            img = _draw_image(spec, class_id, rng)
            name = f"{spec.kind}_{class_id}_{j:05d}.ppm"
            write_ppm(os.path.join(out_dir, name), img)
            records.append({"path": name,
                            "label": class_id if labeled else None,
                            "mask": None})
    corpus_id = corpus_id or f"{spec.kind}-{seed}"
    manifest = CorpusManifest(corpus_id=corpus_id,
                              split=split if labeled else "unlabeled",
                              records=records, image_size=spec.image_size,
                              note=f"procedural {spec.kind} domain, seed {seed}")
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, manifest)
    return manifest_path
