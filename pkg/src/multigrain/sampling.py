"""Batch composition: repeated augmentations (RA) and the uniform baseline."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

_SEED_HIGH = 2**63 - 1


@dataclass
class BatchPlan:
    image_ids: np.ndarray
    seeds: np.ndarray  # one augmentation seed per entry
    instance_ids: np.ndarray
    batch_size: int
    repetitions: int

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def entries(self) -> list[tuple[int, int, int]]:
        return [(int(i), int(s), int(k)) for i, s, k in zip(self.image_ids, self.seeds, self.instance_ids)]

    def positive_pair_count(self) -> int:
        _, counts = np.unique(self.instance_ids, return_counts=True)
        return int((counts * (counts - 1) // 2).sum())


def copy_counts(batch_size: int, m: int) -> list[int]:
    """Copies per distinct image: m each, the last one takes the remainder."""
    n = math.ceil(batch_size / m)
    return [m] * (n - 1) + [batch_size - m * (n - 1)]


def _fill(chosen: np.ndarray, batch_size: int, m: int, rng: np.random.Generator) -> BatchPlan:
    ids = np.repeat(chosen, copy_counts(batch_size, m))
    seeds = rng.integers(0, _SEED_HIGH, size=batch_size)
    order = rng.permutation(batch_size)
    ids = ids[order]
    return BatchPlan(ids, seeds, ids.copy(), batch_size, m)


def ra_sample(image_ids, batch_size: int, m: int, rng: np.random.Generator) -> BatchPlan:
    """ceil(|B|/m) distinct images, each repeated up to m times with fresh seeds, shuffled."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if m > batch_size:
        raise ValueError(f"m = {m} exceeds the batch size {batch_size}")
    pool = np.asarray(image_ids)
    n = math.ceil(batch_size / m)
    if len(pool) < n:
        raise ValueError(f"dataset of {len(pool)} images cannot supply {n} distinct images")
    return _fill(rng.choice(pool, size=n, replace=False), batch_size, m, rng)


def uniform_sample(image_ids, batch_size: int, rng: np.random.Generator) -> BatchPlan:
    pool = np.asarray(image_ids)
    if batch_size > len(pool):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(pool)}")
    return _fill(rng.choice(pool, size=batch_size, replace=False), batch_size, 1, rng)


class EpochSampler:
    """Batches for one epoch, drawn by walking a shuffled image list.

    Distinct images inside a batch never repeat; the list is reshuffled when
    it runs out. Plans depend only on (seed, epoch, batch index).
    """

    def __init__(self, image_ids, batch_size: int, m: int, iterations: int, seed: int):
        if m < 1 or m > batch_size:
            raise ValueError(f"invalid repetitions m = {m} for batch size {batch_size}")
        self.image_ids = np.asarray(image_ids)
        self.batch_size = batch_size
        self.m = m
        self.iterations = iterations
        self.seed = seed
        if len(self.image_ids) < math.ceil(batch_size / m):
            raise ValueError("dataset too small for the requested batch composition")

    def epoch(self, epoch: int) -> list[BatchPlan]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        n = math.ceil(self.batch_size / self.m)
        queue = deque(rng.permutation(self.image_ids).tolist())
        plans = []
        for _ in range(self.iterations):
            chosen: list = []
            taken: set = set()
            deferred: list = []
            while len(chosen) < n:
                if not queue:
                    queue.extend(rng.permutation(self.image_ids).tolist())
                item = queue.popleft()
                if item in taken:
                    deferred.append(item)
                    continue
                chosen.append(item)
                taken.add(item)
            queue.extendleft(reversed(deferred))
            plans.append(_fill(np.array(chosen, dtype=self.image_ids.dtype), self.batch_size, self.m, rng))
        return plans


def default_iterations(n_images: int, batch_size: int, m: int) -> int:
    """Iterations per epoch so that each image is a distinct RA source about once."""
    return math.ceil(n_images * m / batch_size)
