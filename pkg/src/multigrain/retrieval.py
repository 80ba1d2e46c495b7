"""Exact cosine nearest-neighbour search and ranking metrics.

Rankings sort by decreasing cosine similarity; similarities equal to 12
decimals are broken by ascending image id so every metric is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment

N_COPIES = 5
TIE_DECIMALS = 12
METRIC_RANGES = {"map": (0.0, 1.0), "copydetect": (0.0, 1.0), "ukb": (0.0, 4.0), "inaug": (0.0, 5.0),
                 "accuracy": (0.0, 1.0)}


class MetricError(ValueError):
    """A metric's precondition does not hold (no relevant items, malformed groups, ...)."""


def _normalize(e: np.ndarray) -> np.ndarray:
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise MetricError("zero embedding cannot be normalized")
    return e / norms


class RetrievalIndex:
    """L2-normalized embeddings with parallel image id / instance id / distractor arrays."""

    def __init__(self, embeddings, image_ids=None, instance_ids=None, distractor=None):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or len(emb) == 0:
            raise MetricError("retrieval index is empty")
        n = len(emb)
        self.matrix = _normalize(emb)
        self.image_ids = np.arange(n) if image_ids is None else np.asarray(image_ids)
        self.instance_ids = self.image_ids.copy() if instance_ids is None else np.asarray(instance_ids)
        self.distractor = np.zeros(n, bool) if distractor is None else np.asarray(distractor, bool)
        if not (len(self.image_ids) == len(self.instance_ids) == len(self.distractor) == n):
            raise MetricError("index arrays differ in length")
        if len(np.unique(self.image_ids)) != n:
            raise MetricError("image ids in an index must be unique")

    def __len__(self) -> int:
        return len(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def ranking(self, query, exclude_id=None) -> tuple[np.ndarray, np.ndarray]:
        """All row positions ordered by similarity, and the similarities."""
        q = _normalize(query)[0]
        sims = self.matrix @ q
        # rounding makes equal directions tie exactly despite normalization round-off
        order = np.lexsort((self.image_ids, -np.round(sims, TIE_DECIMALS)))
        if exclude_id is not None:
            order = order[self.image_ids[order] != exclude_id]
        return order, sims[order]


def knn(index: RetrievalIndex, query, k: int, query_id=None) -> tuple[np.ndarray, np.ndarray]:
    """Top-k image ids and similarities; ``query_id`` is skipped if it is stored in the index."""
    if len(index) == 0:
        raise MetricError("retrieval index is empty")
    order, sims = index.ranking(query, exclude_id=query_id)
    if k < 0 or k > len(order):
        raise MetricError(f"k = {k} exceeds the {len(order)} candidates")
    return index.image_ids[order[:k]], sims[:k]


def average_precision(relevance) -> float:
    """AP of one ranked binary relevance list: mean of precision@r over relevant ranks r."""
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        raise MetricError("query has no relevant item")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def mean_average_precision(index: RetrievalIndex, queries, relevant, query_ids=None) -> float:
    """mAP over queries; ``relevant[i]`` is the collection of image ids relevant to query i."""
    q = np.atleast_2d(queries)
    if len(q) != len(relevant):
        raise MetricError("one relevance set per query is required")
    aps = []
    for i, vec in enumerate(q):
        qid = None if query_ids is None else query_ids[i]
        order, _ = index.ranking(vec, exclude_id=qid)
        rel = np.isin(index.image_ids[order], np.asarray(list(relevant[i])))
        aps.append(average_precision(rel))
    return float(np.mean(aps))


def ukb_score(index: RetrievalIndex) -> float:
    """Mean count of same-group images among each image's 4 nearest neighbours (itself included)."""
    _, counts = np.unique(index.instance_ids, return_counts=True)
    if np.any(counts != 4):
        raise MetricError("every group must contain exactly 4 images")
    total = 0
    for row in range(len(index)):
        order, _ = index.ranking(index.matrix[row])
        total += int(np.sum(index.instance_ids[order[:4]] == index.instance_ids[row]))
    return total / len(index)


# ------------------------------------------------------------------ IN-aug


@dataclass
class InAugTask:
    """Queries are original images; each owns ``N_COPIES`` augmented copies.

    The searched collection holds every original and every copy; a query is
    only excluded from its own ranking.
    """

    images: np.ndarray  # originals first, then copies grouped by query
    image_ids: np.ndarray
    instance_ids: np.ndarray  # owning query index
    is_query: np.ndarray
    source_ids: np.ndarray  # dataset id of each query
    seed: int

    @property
    def n_queries(self) -> int:
        return int(self.is_query.sum())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype=np.float64).tobytes())
        h.update(np.asarray(self.source_ids, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def inaug_build(images, labels, image_ids, per_class: int, aug_cfg: AugmentConfig, seed: int,
                size: int | None = None) -> InAugTask:
    """Pick ``per_class`` images of every class and make ``N_COPIES`` augmentations of each.

    Originals are resized to the augmentation output size so all items share one shape.
    """
    from .augment import resize

    labels = np.asarray(labels)
    image_ids = np.asarray(image_ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A06]))
    picks = []
    for c in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise MetricError(f"class {c} has {len(members)} images, {per_class} requested")
        picks.extend(np.sort(rng.choice(members, size=per_class, replace=False)))
    if not picks:
        raise MetricError("no labelled images to build the task from")
    out = size or aug_cfg.output_size
    seeds = rng.integers(0, 2**63 - 1, size=(len(picks), N_COPIES))
    originals = [resize(np.asarray(images[i], dtype=np.float64), out) for i in picks]
    copies = [augment(images[i], aug_cfg, int(s)) for i, row in zip(picks, seeds) for s in row]
    nq = len(picks)
    return InAugTask(
        images=np.stack(originals + copies),
        image_ids=np.arange(nq * (N_COPIES + 1)),
        instance_ids=np.concatenate([np.arange(nq), np.repeat(np.arange(nq), N_COPIES)]),
        is_query=np.concatenate([np.ones(nq, bool), np.zeros(nq * N_COPIES, bool)]),
        source_ids=image_ids[np.asarray(picks)],
        seed=seed,
    )


def inaug_score(task: InAugTask, embeddings) -> float:
    """Mean number of a query's own copies among its 5 nearest items (query excluded)."""
    emb = np.asarray(embeddings)
    if len(emb) != len(task.image_ids):
        raise MetricError(f"expected {len(task.image_ids)} embeddings, got {len(emb)}")
    index = RetrievalIndex(emb, task.image_ids, task.instance_ids)
    total = 0
    for row in np.flatnonzero(task.is_query):
        ids, _ = knn(index, index.matrix[row], N_COPIES, query_id=task.image_ids[row])
        pos = np.searchsorted(task.image_ids, ids)
        total += int(np.sum((task.instance_ids[pos] == task.instance_ids[row]) & ~task.is_query[pos]))
    return total / task.n_queries


# -------------------------------------------------------------- copy detection


def strong_distortion(output_size: int) -> AugmentConfig:
    """Heavy crop and colour jitter standing in for edited copies."""
    return AugmentConfig(output_size=output_size, scale=(0.25, 0.6), brightness=0.4, contrast=0.4, saturation=0.4)


def copydetect_eval(index: RetrievalIndex, queries, query_sources) -> float:
    """mAP where each query's only relevant item is its source original."""
    query_sources = np.asarray(query_sources)
    known = set(index.image_ids[~index.distractor].tolist())
    if any(int(s) not in known for s in query_sources):
        raise MetricError("a query's original is missing from the index")
    return mean_average_precision(index, queries, [[s] for s in query_sources])


# -------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    metric: str
    value: float
    dataset_fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = METRIC_RANGES.get(self.metric, (-math.inf, math.inf))
        if not lo - 1e-12 <= self.value <= hi + 1e-12:
            raise MetricError(f"{self.metric} value {self.value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "dataset_fingerprint": self.dataset_fingerprint,
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
