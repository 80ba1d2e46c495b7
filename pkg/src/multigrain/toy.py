"""Linear SVM on two 2-D Gaussians: uniform versus paired batch sampling.

Class y in {+1, -1} draws points (x, y') with x ~ N(0, sigma) and
y' ~ N(y * mean, sigma). Each training point gets one mirrored copy; the
training set of 4N points is then consumed once in batches of two, either
in random order (uniform) or as (point, its copy) pairs (paired).
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

MODES = ("uniform", "paired")


@dataclass
class ToyConfig:
    n_per_class: int = 100
    mean: float = 1.0
    sigma: float = 1.0
    batch_size: int = 2
    runs: int = 100
    lr: float = 0.05
    seed: int = 0
    n_test: int = 2000
    init_scale: float = 0.1
    flip_axis: str = "x"  # which coordinate the augmentation negates

    def __post_init__(self):
        if self.batch_size != 2:
            raise ValueError("paired sampling needs batches of exactly 2 (a point and its copy)")
        if self.n_per_class < 1 or self.runs < 1 or self.n_test < 2:
            raise ValueError("n_per_class, runs and n_test must be positive")
        if self.sigma <= 0 or self.lr < 0 or self.init_scale < 0:
            raise ValueError("sigma must be positive; lr and init_scale non-negative")
        if self.flip_axis not in ("x", "y"):
            raise ValueError("flip_axis must be 'x' or 'y'")


@dataclass
class ToyData:
    points: np.ndarray  # 4N x 2: originals then their mirrored copies
    labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    w0: np.ndarray


def _gaussians(rng: np.random.Generator, n_per_class: int, mean: float, sigma: float):
    y = np.r_[np.ones(n_per_class), -np.ones(n_per_class)]
    p = np.c_[rng.normal(0.0, sigma, 2 * n_per_class), rng.normal(y * mean, sigma)]
    return p, y


def mirror(points: np.ndarray, axis: str) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    out[:, 0 if axis == "x" else 1] *= -1
    return out


def toy_data(cfg: ToyConfig, run: int) -> ToyData:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, run, 0]))
    p, y = _gaussians(rng, cfg.n_per_class, cfg.mean, cfg.sigma)
    tp, ty = _gaussians(rng, cfg.n_test // 2, cfg.mean, cfg.sigma)
    w0 = rng.normal(0.0, 1.0, 2) * cfg.init_scale
    return ToyData(np.r_[p, mirror(p, cfg.flip_axis)], np.r_[y, y], tp, ty, w0)


def batch_order(mode: str, n_originals: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices into the 4N training set, one row of two per iteration."""
    if mode == "uniform":
        return rng.permutation(2 * n_originals).reshape(-1, 2)
    if mode == "paired":
        perm = rng.permutation(n_originals)
        return np.c_[perm, perm + n_originals]
    raise ValueError(f"unknown sampling mode {mode!r}")


def hinge_step(w: np.ndarray, x: np.ndarray, y: np.ndarray, lr: float) -> np.ndarray:
    """One SGD step on the batch-mean of max(1 - y w.x, 0); the kink counts as inactive."""
    active = 1.0 - y * (x @ w) > 0
    g = -(y[active, None] * x[active]).sum(axis=0) / len(y)
    return w - lr * g


def accuracy(w: np.ndarray, points: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.sign(points @ w) == labels))


def toy_run(cfg: ToyConfig, mode: str, run: int = 0, order_mode: str | None = None) -> np.ndarray:
    """Test accuracy after each iteration of one pass (2N iterations).

    ``order_mode`` overrides the batch order while keeping the label ``mode``;
    it exists so a comparison can be forced onto identical orders.
    """
    data = toy_data(cfg, run)
    n = len(data.points) // 2
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, run, 1, MODES.index(order_mode or mode)]))
    w = data.w0.copy()
    curve = np.empty(n)
    for it, rows in enumerate(batch_order(order_mode or mode, n, order_rng)):
        w = hinge_step(w, data.points[rows], data.labels[rows], cfg.lr)
        curve[it] = accuracy(w, data.test_points, data.test_labels)
    return curve


@dataclass
class ToyComparison:
    config: ToyConfig
    modes: tuple[str, str]
    curves: dict  # mode -> runs x iterations

    def mean_curve(self, mode: str) -> np.ndarray:
        return self.curves[mode].mean(axis=0)

    def final(self, mode: str) -> np.ndarray:
        return self.curves[mode][:, -1]

    @property
    def differences(self) -> np.ndarray:
        a, b = self.modes
        return self.final(a) - self.final(b)

    def summary(self) -> dict:
        a, b = self.modes
        d = self.differences
        sd = float(d.std(ddof=1)) if len(d) > 1 else 0.0
        return {
            "config": asdict(self.config),
            "modes": list(self.modes),
            f"final_mean_{a}": float(self.final(a).mean()),
            f"final_mean_{b}": float(self.final(b).mean()),
            "mean_difference": float(d.mean()),
            "std_difference": sd,
            "t_statistic": float(d.mean() / (sd / np.sqrt(len(d)))) if sd > 0 else 0.0,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["iteration"]
        for m in self.modes:
            cols += [f"{m}_mean", f"{m}_std"]
        w.writerow(cols)
        stats = {m: (self.curves[m].mean(axis=0), self.curves[m].std(axis=0)) for m in self.modes}
        for it in range(self.curves[self.modes[0]].shape[1]):
            row = [it + 1]
            for m in self.modes:
                row += [repr(float(stats[m][0][it])), repr(float(stats[m][1][it]))]
            w.writerow(row)
        return buf.getvalue()


def toy_compare(cfg: ToyConfig, modes: tuple[str, str] = ("paired", "uniform"), force_order: str | None = None) -> ToyComparison:
    """Run both modes on the same datasets (run r of each mode shares data and init)."""
    if len(modes) != 2:
        raise ValueError("compare exactly two modes")
    curves = {m: np.stack([toy_run(cfg, m, r, force_order) for r in range(cfg.runs)]) for m in dict.fromkeys(modes)}
    return ToyComparison(cfg, tuple(modes), curves)
