"""Synthetic labelled image collections and their on-disk layout.

Each class is a primitive pattern (disk, ring, cross, bars, checker, ...)
drawn in a class hue. Every image gets its own background, layout, sizes
and colour offsets, so two images of one class are different instances.
Shapes are rendered from continuous coordinates, so the same image can be
drawn at any resolution.
"""

from __future__ import annotations

import csv
import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mgt

KINDS = ("disk", "ring", "cross", "bars", "checker", "triangle")


@dataclass
class ImageRecord:
    image_id: int
    label: int
    pixels: np.ndarray  # H x W x 3 in [0, 1]


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 3
    labels: np.ndarray  # class, -1 for unlabelled distractors
    image_ids: np.ndarray
    partitions: np.ndarray  # "train" | "val" | "distractor"
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, partition: str) -> "Dataset":
        keep = self.partitions == partition
        return Dataset(self.images[keep], self.labels[keep], self.image_ids[keep], self.partitions[keep], self.n_classes)

    def record(self, index: int) -> ImageRecord:
        return ImageRecord(int(self.image_ids[index]), int(self.labels[index]), self.images[index])

    def index_of(self, image_ids) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.image_ids)}
        return np.array([lookup[int(i)] for i in np.atleast_1d(image_ids)], dtype=np.intp)


@dataclass
class ImageSpec:
    """Resolution-free description of one image."""

    kind: str
    hue: float
    background: tuple
    shapes: list  # (cx, cy, radius, phase, colour) per primitive


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _class_style(label: int, n_classes: int):
    kind = KINDS[label % len(KINDS)]
    n_hues = -(-n_classes // len(KINDS))
    hue = (label // len(KINDS)) / max(n_hues, 1) + 0.05
    return kind, hue


def draw_spec(label: int, n_classes: int, rng: np.random.Generator, kind: str | None = None, hue: float | None = None) -> ImageSpec:
    ckind, chue = _class_style(label, n_classes)
    kind = ckind if kind is None else kind
    hue = chue if hue is None else hue
    background = (rng.uniform(0, 1), rng.uniform(0.0, 0.3), rng.uniform(0.15, 0.6), rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.2))
    shapes = []
    for _ in range(rng.integers(1, 4)):
        colour = _hsv(hue + rng.normal(0, 0.02), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        shapes.append((rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.12, 0.25), rng.uniform(0, 1), colour))
    return ImageSpec(kind, hue, background, shapes)


def _coverage(kind: str, dx, dy, r, phase, px):
    """Soft mask of a primitive of radius r centred at the origin; px is one pixel in unit coords."""
    def edge(sd):
        return np.clip(0.5 - sd / px, 0.0, 1.0)

    dist = np.sqrt(dx * dx + dy * dy)
    if kind == "disk":
        return edge(dist - r)
    if kind == "ring":
        return edge(np.abs(dist - 0.7 * r) - 0.25 * r)
    if kind == "cross":
        arm = np.minimum(np.maximum(np.abs(dx) - 0.25 * r, np.abs(dy) - r), np.maximum(np.abs(dy) - 0.25 * r, np.abs(dx) - r))
        return edge(arm)
    if kind == "triangle":
        sd = np.maximum(np.maximum(-dy - 0.5 * r, 0.866 * dx + 0.5 * dy - 0.5 * r), -0.866 * dx + 0.5 * dy - 0.5 * r)
        return edge(sd)
    box = np.maximum(np.abs(dx), np.abs(dy)) - r
    period = r / 1.5
    if kind == "bars":
        stripe = np.abs(((dy / period + phase) % 1.0) - 0.5) - 0.25
        return edge(np.maximum(box, stripe * period))
    if kind == "checker":
        cx = ((dx / period + phase) % 1.0) < 0.5
        cy = ((dy / period + phase) % 1.0) < 0.5
        return edge(box) * (cx ^ cy)
    raise ValueError(f"unknown primitive {kind}")


def render(spec: ImageSpec, size: int) -> np.ndarray:
    """Rasterize a spec to size x size x 3."""
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    bh, bs, bv, angle, grad = spec.background
    base = _hsv(bh, bs, bv)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * grad
    img = np.clip(base[None, None, :] + ramp[..., None], 0.0, 1.0)
    px = 1.0 / size
    for cx, cy, r, phase, colour in spec.shapes:
        m = _coverage(spec.kind, xx - cx, yy - cy, r, phase, px)[..., None]
        img = img * (1 - m) + np.asarray(colour)[None, None, :] * m
    return np.clip(img, 0.0, 1.0)


def synth_dataset(
    n_classes: int = 20,
    per_class: int = 50,
    size: int = 64,
    seed: int = 0,
    val_per_class: int = 10,
    n_distractors: int = 200,
) -> Dataset:
    """Deterministic collection: ``per_class`` train and ``val_per_class`` val images
    per class, plus unlabelled distractors with random primitives and hues."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or size < 8 or val_per_class < 0 or n_distractors < 0:
        raise ValueError("invalid dataset sizes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    images, labels, parts = [], [], []
    for part, count in (("train", per_class), ("val", val_per_class)):
        for c in range(n_classes):
            for _ in range(count):
                images.append(render(draw_spec(c, n_classes, rng), size))
                labels.append(c)
                parts.append(part)
    for _ in range(n_distractors):
        kind = KINDS[rng.integers(len(KINDS))]
        spec = draw_spec(0, n_classes, rng, kind=kind, hue=rng.uniform(0, 1))
        images.append(render(spec, size))
        labels.append(-1)
        parts.append("distractor")
    n = len(labels)
    return Dataset(
        np.stack(images).astype(np.float64),
        np.array(labels, dtype=np.int64),
        np.arange(n, dtype=np.int64),
        np.array(parts),
        n_classes,
    )


def save_dataset(ds: Dataset, directory) -> None:
    """``images.mgt`` plus ``manifest.csv`` (image_id, class, partition)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mgt.save(d / "images.mgt", ds.images)
    with open(d / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "class", "partition"])
        for i, c, p in zip(ds.image_ids, ds.labels, ds.partitions):
            w.writerow([int(i), int(c), str(p)])


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    images = mgt.load(d / "images.mgt")
    with open(d / "manifest.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != len(images):
        raise ValueError("manifest and image tensor disagree in length")
    labels = np.array([int(r["class"]) for r in rows], dtype=np.int64)
    return Dataset(
        images,
        labels,
        np.array([int(r["image_id"]) for r in rows], dtype=np.int64),
        np.array([r["partition"] for r in rows]),
        int(labels.max()) + 1,
    )
