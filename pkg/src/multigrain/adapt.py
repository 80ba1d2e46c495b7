"""Choosing the test-time pooling exponent p* for a new input resolution.

Two strategies: a grid sweep scored on the IN-aug proxy task, and SGD on p*
alone with the trunk and classifier frozen. The trunk is run once per
resolution; only the pooling is recomputed for each candidate exponent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .augment import eval_view
from .gem import gem, gem_numpy
from .model import MultiGrainNet
from .objectives import ClassifierHead, cross_entropy
from .retrieval import InAugTask, inaug_score
from .tensor import Tensor


class AdaptError(ValueError):
    pass


@dataclass
class AdaptConfig:
    resolution: int
    base_resolution: int = 32
    grid: tuple[float, ...] = tuple(float(p) for p in range(1, 11))
    mode: str = "sweep"
    batch_size: int = 4
    momentum: float = 0.9
    lr: float = 0.005
    power: float = 0.9
    per_class: int = 50
    seed: int = 0
    p_min: float = 1e-3
    p_init: float | None = None  # finetune start; defaults to the trained exponent

    def __post_init__(self):
        self.grid = tuple(float(p) for p in self.grid)
        if self.mode not in ("sweep", "finetune"):
            raise AdaptError(f"unknown mode {self.mode!r}")
        if any(p <= 0 for p in self.grid):
            raise AdaptError("grid exponents must be positive")
        if self.batch_size < 1 or self.lr < 0 or not 0 <= self.momentum < 1 or self.power < 0:
            raise AdaptError("invalid finetune schedule")

    def lr_at(self, i: int, i_max: int) -> float:
        return self.lr * (1.0 - i / i_max) ** self.power


def eval_maps(model: MultiGrainNet, images, resolution: int, base_resolution: int) -> np.ndarray:
    """Frozen trunk activations (N, C, h, w) under the evaluation resize protocol."""
    if resolution < model.trunk_cfg.min_resolution:
        raise AdaptError(f"resolution {resolution} below the trunk minimum {model.trunk_cfg.min_resolution}")
    views = [eval_view(np.asarray(img), resolution, base_resolution) for img in images]
    if len({v.shape for v in views}) != 1:
        raise AdaptError("images must share an aspect ratio to be batched")
    return np.stack(model.feature_maps(np.stack(views)))


@dataclass
class SweepResult:
    p_star: float
    score: float
    table: list[tuple[float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p_star", "inaug_score"])
        for p, s in self.table:
            w.writerow([repr(p), repr(s)])
        return buf.getvalue()


def pstar_sweep(model: MultiGrainNet, task: InAugTask, cfg: AdaptConfig) -> SweepResult:
    """Score every grid exponent on the proxy task at ``cfg.resolution``; ties go to the smaller p*."""
    grid = sorted(set(cfg.grid))
    if not grid:
        raise AdaptError("empty p* grid")
    maps = eval_maps(model, task.images, cfg.resolution, cfg.base_resolution)
    table = [(p, inaug_score(task, gem_numpy(maps, p, model.gem_cfg.epsilon))) for p in grid]
    best_p, best_s = table[0]
    for p, s in table[1:]:
        if s > best_s:
            best_p, best_s = p, s
    return SweepResult(best_p, best_s, table)


@dataclass
class FinetuneResult:
    p_star: float
    history: list[float]  # p* after every step
    losses: list[float]


def finetune_sample(labels, per_class: int, seed: int) -> np.ndarray:
    """Indices of ``per_class`` images of every class (fewer if a class is smaller)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17E]))
    picks = []
    for c in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == c)
        picks.extend(np.sort(rng.choice(members, size=min(per_class, len(members)), replace=False)))
    return np.asarray(picks, dtype=np.intp)


def pstar_finetune(model: MultiGrainNet, images, labels, cfg: AdaptConfig) -> FinetuneResult:
    """One pass of momentum SGD on p* alone, cross-entropy loss, polynomial learning-rate decay."""
    labels = np.asarray(labels)
    maps = eval_maps(model, images, cfg.resolution, cfg.base_resolution)
    head = ClassifierHead(Tensor(np.asarray(model.head.W.data, dtype=np.float64)))
    eps = model.gem_cfg.epsilon
    p = float(model.pool.p.data) if cfg.p_init is None else float(cfg.p_init)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xADA7]))
    order = rng.permutation(len(labels))
    batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    velocity = 0.0
    history, losses = [], []
    for i, rows in enumerate(batches):
        pt = Tensor(np.array(p), requires_grad=True)
        with T.Tape():
            loss = T.mean(cross_entropy(gem(Tensor(maps[rows]), pt, eps), head, labels[rows]))
        T.backward(loss)
        velocity = cfg.momentum * velocity + float(pt.grad)
        p = max(p - cfg.lr_at(i, len(batches)) * velocity, cfg.p_min)
        history.append(p)
        losses.append(float(loss.data))
    return FinetuneResult(p, history, losses)


@dataclass
class CurveCell:
    resolution: int
    p_star: float
    accuracy: float
    inaug: float | None = None


def scale_accuracy_curve(model: MultiGrainNet, images, labels, resolutions, p_values, base_resolution: int,
                         task: InAugTask | None = None) -> list[CurveCell]:
    """Top-1 accuracy (and optionally the proxy score) for every (resolution, p*) pair."""
    labels = np.asarray(labels)
    cells = []
    for s in resolutions:
        maps = eval_maps(model, images, s, base_resolution)
        task_maps = eval_maps(model, task.images, s, base_resolution) if task is not None else None
        for p in p_values:
            emb = gem_numpy(maps, float(p), model.gem_cfg.epsilon)
            acc = float(np.mean(model.classify(emb) == labels))
            score = inaug_score(task, gem_numpy(task_maps, float(p), model.gem_cfg.epsilon)) if task is not None else None
            cells.append(CurveCell(int(s), float(p), acc, score))
    return cells


def curve_csv(cells: list[CurveCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["resolution", "p_star", "accuracy", "inaug"])
    for c in cells:
        w.writerow([c.resolution, repr(c.p_star), repr(c.accuracy), "" if c.inaug is None else repr(c.inaug)])
    return buf.getvalue()


def config_dict(cfg: AdaptConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = list(d["grid"])
    return d
