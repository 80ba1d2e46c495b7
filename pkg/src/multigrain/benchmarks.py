"""Desk-scale retrieval tasks built from a synthetic dataset.

* ``map``: every validation image queries the validation images plus the
  distractors; relevant items are the other images of its class.
* ``ukb``: each validation image yields a group of 4 views (the image and
  three mild augmentations).
* ``inaug``: originals and 5 full-augmentation copies (see :mod:`.retrieval`).
* ``copydetect``: strongly distorted validation images query the undistorted
  originals mixed with the distractors.

Embedding is delegated to a callable mapping an image stack to an (n, d)
array, so the tasks can be scored for any model or exponent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augment import AugmentConfig, augment, pixel_principal_axes
from .data import Dataset
from .retrieval import (
    InAugTask,
    MetricError,
    RetrievalIndex,
    copydetect_eval,
    inaug_build,
    inaug_score,
    mean_average_precision,
    strong_distortion,
    ukb_score,
)

METRICS = ("map", "ukb", "inaug", "copydetect")
Embed = Callable[[np.ndarray], np.ndarray]


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images, dtype=np.float64).tobytes())
    h.update(np.asarray(ds.labels, dtype=np.int64).tobytes())
    h.update(np.asarray(ds.image_ids, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def full_augment(ds: Dataset, size: int) -> AugmentConfig:
    eigval, eigvec = pixel_principal_axes(ds.subset("train").images)
    return AugmentConfig(output_size=size, eigval=eigval, eigvec=eigvec)


def _seeds(seed: int, tag: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, tag])).integers(0, 2**63 - 1, size=n)


def map_eval(ds: Dataset, embed: Embed, partition: str = "val") -> float:
    val = ds.subset(partition)
    dis = ds.subset("distractor")
    if len(val) == 0:
        raise MetricError(f"partition {partition!r} is empty")
    q = embed(val.images)
    d = embed(dis.images) if len(dis) else np.zeros((0, q.shape[1]))
    index = RetrievalIndex(np.concatenate([q, d]), np.concatenate([val.image_ids, dis.image_ids]),
                           np.concatenate([val.labels, dis.labels]),
                           np.concatenate([np.zeros(len(val), bool), np.ones(len(dis), bool)]))
    relevant = [val.image_ids[(val.labels == c) & (val.image_ids != i)] for i, c in zip(val.image_ids, val.labels)]
    return mean_average_precision(index, q, relevant, query_ids=val.image_ids)


def ukb_views(ds: Dataset, seed: int, partition: str = "val") -> tuple[np.ndarray, np.ndarray]:
    """Images and group ids: 4 views per image of ``partition``."""
    val = ds.subset(partition)
    size = val.images.shape[1]
    mild = AugmentConfig(output_size=size, scale=(0.5, 1.0), brightness=0.2, contrast=0.2, saturation=0.2, lighting=0.0)
    seeds = _seeds(seed, 0x0CB, 3 * len(val)).reshape(-1, 3)
    views, groups = [], []
    for img, gid, row in zip(val.images, val.image_ids, seeds):
        views.append(np.asarray(img, dtype=np.float64))
        views.extend(augment(img, mild, int(s)) for s in row)
        groups.extend([gid] * 4)
    return np.stack(views), np.asarray(groups)


def ukb_eval(ds: Dataset, embed: Embed, seed: int, partition: str = "val") -> float:
    views, groups = ukb_views(ds, seed, partition)
    return ukb_score(RetrievalIndex(embed(views), np.arange(len(views)), groups))


def inaug_task(ds: Dataset, per_class: int, seed: int, partition: str = "train") -> InAugTask:
    part = ds.subset(partition)
    size = part.images.shape[1]
    return inaug_build(part.images, part.labels, part.image_ids, per_class, full_augment(ds, size), seed)


def inaug_eval(task: InAugTask, embed: Embed) -> float:
    return inaug_score(task, embed(task.images))


def copydetect_eval_dataset(ds: Dataset, embed: Embed, seed: int, partition: str = "val") -> float:
    val = ds.subset(partition)
    dis = ds.subset("distractor")
    cfg = strong_distortion(val.images.shape[1])
    seeds = _seeds(seed, 0xC0D, len(val))
    queries = np.stack([augment(img, cfg, int(s)) for img, s in zip(val.images, seeds)])
    originals = embed(val.images)
    d = embed(dis.images) if len(dis) else np.zeros((0, originals.shape[1]))
    index = RetrievalIndex(np.concatenate([originals, d]), np.concatenate([val.image_ids, dis.image_ids]),
                           distractor=np.concatenate([np.zeros(len(val), bool), np.ones(len(dis), bool)]))
    return copydetect_eval(index, embed(queries), val.image_ids)


@dataclass
class RetrievalRun:
    metric: str
    value: float
    n_queries: int


def run_metric(metric: str, ds: Dataset, embed: Embed, seed: int, inaug_per_class: int = 2,
               partition: str = "val") -> RetrievalRun:
    if metric == "map":
        return RetrievalRun(metric, map_eval(ds, embed, partition), int(np.sum(ds.partitions == partition)))
    if metric == "ukb":
        return RetrievalRun(metric, ukb_eval(ds, embed, seed, partition), 4 * int(np.sum(ds.partitions == partition)))
    if metric == "inaug":
        task = inaug_task(ds, inaug_per_class, seed)
        return RetrievalRun(metric, inaug_eval(task, embed), task.n_queries)
    if metric == "copydetect":
        return RetrievalRun(metric, copydetect_eval_dataset(ds, embed, seed, partition),
                            int(np.sum(ds.partitions == partition)))
    raise MetricError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
