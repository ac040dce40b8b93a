"""Corpus ingestion, tiling, and training-time augmentations.

A corpus is a directory holding PPM images plus a JSON-lines manifest, one
record per image: {"path": ..., "label": int|null, "mask": path|null}.
Label access is instrumented: batches expose labels through a property that
bumps a global counter, which lets tests assert that self-supervised stages
never read a label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ppm import bytes_to_image, read_pgm, read_ppm
from .tensor import Rng

__all__ = [
    "CorpusManifest",
    "Batch",
    "LabelReadCounter",
    "LABEL_READS",
    "load_manifest",
    "write_manifest",
    "load_corpus",
    "iter_epoch",
    "tile_image",
    "random_resized_crop",
    "hflip",
]


class LabelReadCounter:
    """Global counter of label accesses, for the no-labels-in-pretraining guarantee."""

    def __init__(self):
        self.count = 0

    def bump(self, n: int = 1) -> None:
        self.count += n


LABEL_READS = LabelReadCounter()


@dataclass
class CorpusManifest:
    """One corpus: id, split, and per-image records."""

    corpus_id: str
    split: str                      # train | test | unlabeled
    records: list[dict]
    image_size: int
    note: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test", "unlabeled"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "unlabeled":
            for r in self.records:
                if r.get("label") is not None:
                    raise ValueError(f"unlabeled corpus {self.corpus_id} carries a label")

    def __len__(self) -> int:
        return len(self.records)


def write_manifest(path, manifest: CorpusManifest) -> None:
    with open(path, "w") as f:
        header = {"corpus_id": manifest.corpus_id, "split": manifest.split,
                  "image_size": manifest.image_size, "note": manifest.note}
        f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in manifest.records:
            f.write(json.dumps({"path": r["path"],
                                "label": r.get("label"),
                                "mask": r.get("mask")}, sort_keys=True) + "\n")


def load_manifest(path) -> CorpusManifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    header = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                records.append(obj)
    if header is None:
        raise ValueError(f"{path}: missing manifest header line")
    return CorpusManifest(corpus_id=header["corpus_id"], split=header["split"],
                          records=records, image_size=int(header["image_size"]),
                          note=header.get("note", ""))


@dataclass
class LoadedCorpus:
    """Images decoded to float [0,1] with lazily counted label access."""

    manifest: CorpusManifest
    images: np.ndarray              # (N, H, W, 3) float32
    _labels: np.ndarray | None      # (N,) int64 or None
    label_grids: list | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise ValueError(f"corpus {self.manifest.corpus_id} has no labels")
        LABEL_READS.bump(self._labels.size)
        return self._labels


@dataclass
class Batch:
    """One training batch; reading ``labels`` or ``grids`` counts as a label access."""

    images: np.ndarray
    _labels: np.ndarray | None
    _grids: np.ndarray | None = None

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise ValueError("batch has no labels")
        LABEL_READS.bump(self._labels.size)
        return self._labels

    @property
    def grids(self) -> np.ndarray:
        if self._grids is None:
            raise ValueError("batch has no label grids")
        LABEL_READS.bump(self._grids.shape[0])
        return self._grids


def load_corpus(manifest_paths) -> LoadedCorpus:
    """Load one or more corpora (unioned, in order) into memory.

    All images must share one size. Labels stay None if any member corpus is
    label-free. Missing files raise with the offending path.
    """
    if isinstance(manifest_paths, (str, os.PathLike)):
        manifest_paths = [manifest_paths]
    manifests = [load_manifest(p) for p in manifest_paths]
    size = manifests[0].image_size
    for m in manifests:
        if m.image_size != size:
            raise ValueError(f"corpus {m.corpus_id} size {m.image_size} != {size}")
    images, labels, grids = [], [], []
    have_labels = all(all(r.get("label") is not None for r in m.records) for m in manifests)
    have_grids = all(all(r.get("mask") is not None for r in m.records) for m in manifests)
    for m, mpath in zip(manifests, manifest_paths):
        base = os.path.dirname(os.fspath(mpath))
        for r in m.records:
            img_path = os.path.join(base, r["path"])
            if not os.path.exists(img_path):
                raise FileNotFoundError(f"image not found: {img_path}")
            images.append(bytes_to_image(read_ppm(img_path)))
            if have_labels:
                labels.append(int(r["label"]))
            if have_grids:
                grids.append(read_pgm(os.path.join(base, r["mask"])))
    merged = CorpusManifest(
        corpus_id="+".join(m.corpus_id for m in manifests),
        split=manifests[0].split if len(manifests) == 1 else "train",
        records=[r for m in manifests for r in m.records],
        image_size=size)
    n_classes = max(labels) + 1 if have_labels and labels else 0
    if have_labels:
        for lab in labels:
            if lab < 0 or lab >= n_classes:
                raise ValueError(f"label {lab} out of range")
    return LoadedCorpus(manifest=merged,
                        images=np.stack(images),
                        _labels=np.array(labels, dtype=np.int64) if have_labels else None,
                        label_grids=grids if have_grids else None)


def iter_epoch(corpus: LoadedCorpus, batch_size: int, rng: Rng):
    """Deterministically shuffled batches; the final partial batch is kept."""
    order = rng.permutation(len(corpus))
    grids = (np.stack(corpus.label_grids) if corpus.label_grids else None)
    for start in range(0, len(corpus), batch_size):
        sel = order[start:start + batch_size]
        labels = corpus._labels[sel] if corpus._labels is not None else None
        yield Batch(images=corpus.images[sel], _labels=labels,
                    _grids=grids[sel] if grids is not None else None)


# -- geometry ----------------------------------------------------------------


def tile_image(image: np.ndarray, tile: int, stride: int) -> list[np.ndarray]:
    """Cut raster-order tile x tile crops covering the whole image.

    When a tile would overrun the edge it is anchored to the edge instead
    (overlapping the previous tile), so coverage is total.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} larger than image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    def offsets(extent: int) -> list[int]:
        out = list(range(0, extent - tile + 1, stride))
        if out[-1] != extent - tile:
            out.append(extent - tile)
        return out

    return [image[r:r + tile, c:c + tile].copy()
            for r in offsets(h) for c in offsets(w)]


def _bilinear_resize(image: np.ndarray, target: int) -> np.ndarray:
    """Square bilinear resize with half-pixel centers."""
    src = image.shape[0]
    if src == target:
        return image.astype(np.float32, copy=True)
    scale = src / target
    coords = (np.arange(target, dtype=np.float64) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0, src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = (coords - lo).astype(np.float32)
    rows = (image[lo][:, :, :] * (1 - frac)[:, None, None]
            + image[hi][:, :, :] * frac[:, None, None])
    out = (rows[:, lo] * (1 - frac)[None, :, None]
           + rows[:, hi] * frac[None, :, None])
    return out.astype(np.float32)


def random_resized_crop(image: np.ndarray, scale_range: tuple[float, float],
                        target: int, rng: Rng, record: list | None = None) -> np.ndarray:
    """Crop a random square whose area ratio lies in scale_range, resize to target.

    Aspect ratio is fixed at 1:1. The crop side is ceil(sqrt(ratio) * side),
    clamped to the image, so the realized area ratio never drops below the
    requested minimum. An infeasible draw falls back to a center crop after
    10 attempts and appends an event to `record` when provided.
    """
    image = np.asarray(image)
    side = image.shape[0]
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"scale range must sit inside (0, 1], got {scale_range}")
    if target > side:
        raise ValueError(f"target {target} exceeds image side {side}")
    for _ in range(10):
        ratio = rng.uniform(lo, hi)
        crop = min(side, int(np.ceil(np.sqrt(ratio) * side)))
        if crop < 1 or crop > side:
            continue
        r = int(rng.integers(0, side - crop + 1))
        c = int(rng.integers(0, side - crop + 1))
        return _bilinear_resize(image[r:r + crop, c:c + crop], target)
    if record is not None:
        record.append({"event": "center_crop_fallback"})
    crop = min(side, target)
    r = (side - crop) // 2
    return _bilinear_resize(image[r:r + crop, r:r + crop], target)


def hflip(image: np.ndarray, probability: float, rng: Rng) -> np.ndarray:
    """Mirror columns with the given probability."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {probability}")
    if probability > 0 and rng.uniform() < probability:
        return np.asarray(image)[:, ::-1].copy()
    return np.asarray(image)
