"""SGD training of the joint classification + retrieval network."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment, pixel_principal_axes
from .data import Dataset
from .gem import GemConfig
from .model import MultiGrainNet, TrunkConfig
from .objectives import MarginState, gradient_fraction, joint_loss, sample_pairs
from .sampling import EpochSampler, default_iterations

LOG_FIELDS = ["epoch", "lr", "loss", "class_loss", "retr_loss", "val_acc", "grad_fraction", "beta"]


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 0.05
    decay_epochs: tuple[int, ...] = (20, 26)
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    m: int = 3
    lam: float = 0.5
    seed: int = 0
    iterations: int | None = None
    resolution: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.epochs > 0 and self.decay_epochs[-1] >= self.epochs:
            raise ValueError("decay epochs must precede the final epoch")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.m < 1 or self.m > self.batch_size:
            raise ValueError("m must be in [1, batch_size]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= d for d in self.decay_epochs)

    def iterations_for(self, n_images: int) -> int:
        return self.iterations if self.iterations else default_iterations(n_images, self.batch_size, self.m)


@dataclass
class TrainResult:
    model: MultiGrainNet
    log: list[dict] = field(default_factory=list)
    iterations: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: _fmt(row.get(k)) for k in LOG_FIELDS})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return v


def training_augment(train: Dataset, resolution: int) -> AugmentConfig:
    """Full augmentation with lighting axes measured on the training pixels."""
    eigval, eigvec = pixel_principal_axes(train.images)
    return AugmentConfig(output_size=resolution, eigval=eigval, eigvec=eigvec)


def evaluate_accuracy(model: MultiGrainNet, images, labels, resolution: int, base_resolution: int,
                      p_star: float | None = None) -> float:
    emb = model.embed_images(images, resolution, base_resolution, p_star)
    return float(np.mean(model.classify(emb) == np.asarray(labels)))


def train(
    dataset: Dataset,
    trunk_cfg: TrunkConfig,
    cfg: TrainConfig,
    gem_cfg: GemConfig,
    margin: MarginState,
    aug_cfg: AugmentConfig | None = None,
    progress=None,
) -> TrainResult:
    """Minimize the joint loss over RA batches (``cfg.m == 1`` is uniform sampling)."""
    train_set = dataset.subset("train")
    val_set = dataset.subset("val")
    margin = MarginState(**{**margin.__dict__, "dim": trunk_cfg.dim})
    model = MultiGrainNet(trunk_cfg, gem_cfg, margin, dataset.n_classes, cfg.seed, cfg.dtype)
    aug_cfg = aug_cfg or training_augment(train_set, cfg.resolution)
    iterations = cfg.iterations_for(len(train_set))
    sampler = EpochSampler(train_set.image_ids, cfg.batch_size, cfg.m, iterations, cfg.seed)
    result = TrainResult(model, iterations=iterations)

    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    beta_velocity = 0.0
    use_retrieval = cfg.lam < 1
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        sums = {"loss": 0.0, "class_loss": 0.0, "retr_loss": 0.0}
        fractions = []
        for b, plan in enumerate(sampler.epoch(epoch)):
            idx = train_set.index_of(plan.image_ids)
            pixels = np.stack([augment(train_set.images[i], aug_cfg, int(s)) for i, s in zip(idx, plan.seeds)])
            labels = train_set.labels[idx]
            pair_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, b, 1]))
            with T.Tape():
                e = model.embed_tensor(pixels, training=True)
                if not np.all(np.isfinite(e.data)):
                    raise DivergenceError(step)
                pairs = sample_pairs(e.data, plan.instance_ids, margin, pair_rng) if use_retrieval else None
                terms = joint_loss(e, labels, model.head, margin, cfg.lam, pairs, model.beta if use_retrieval else None)
            loss = float(terms.total.data)
            if not math.isfinite(loss):
                raise DivergenceError(step)
            T.backward(terms.total)
            sums["loss"] += loss
            if terms.classification is not None:
                sums["class_loss"] += float(terms.classification.data) / cfg.lam
            if terms.retrieval is not None:
                sums["retr_loss"] += float(terms.retrieval.data) / (1 - cfg.lam)
            if 0 < cfg.lam < 1:
                fractions.append(gradient_fraction(e.data, labels, model.head, margin, cfg.lam, pairs, model.beta))

            for p, v in zip(params, velocity):
                g = p.grad + cfg.weight_decay * p.data if p.ndim > 1 else p.grad
                v *= cfg.momentum
                v += g
                p.data -= lr * v
            if use_retrieval:
                beta_velocity = cfg.momentum * beta_velocity + float(model.beta.grad)
                new_beta = max(float(model.beta.data) - margin.beta_lr * beta_velocity, 1e-3)
                model.beta.data = np.array(new_beta)
            step += 1
            if progress is not None:
                progress(epoch, b, loss)

        val_acc = (evaluate_accuracy(model, val_set.images, val_set.labels, cfg.resolution, cfg.resolution)
                   if len(val_set) else float("nan"))
        n = max(iterations, 1)
        result.log.append({
            "epoch": epoch,
            "lr": lr,
            "loss": sums["loss"] / n,
            "class_loss": sums["class_loss"] / n if cfg.lam > 0 else None,
            "retr_loss": sums["retr_loss"] / n if use_retrieval else None,
            "val_acc": val_acc,
            "grad_fraction": float(np.mean(fractions)) if fractions else None,
            "beta": float(model.beta.data),
        })
    margin.beta = float(model.beta.data)
    return result
