"""Central finite-difference validation of recorded gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


class GradCheckError(ArithmeticError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(f(Tensor(x)).data)
        x[idx] = orig - eps
        fm = float(f(Tensor(x)).data)
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * eps)
    return out


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(xt)
    backward(y)
    return xt.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    bad = ~np.isfinite(a) | ~np.isfinite(n)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise GradCheckError(f"non-finite gradient at coordinate {idx}", idx)
    err = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
    return float(err.max()) if err.size else 0.0


# ------------------------------------------------------------ standard suite


def _weighted_sum(y: Tensor, c: np.ndarray) -> Tensor:
    from . import tensor as T

    return T.sum(T.mul(y, Tensor(c)))


def _suite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One (function, point) per checked quantity, all drawn from ``rng``."""
    from . import tensor as T
    from .gem import gem
    from .objectives import ClassifierHead, MarginState, cross_entropy, margin_loss

    maps = rng.uniform(0.1, 2.0, size=(2, 3, 3, 3))
    p = rng.uniform(1.5, 4.0)
    c_gem = rng.normal(size=(2, 3))
    x_conv = rng.normal(size=(2, 3, 5, 5))
    w_conv = rng.normal(size=(4, 3, 3, 3))
    c_conv = rng.normal(size=(2, 4, 3, 3))
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    c_mm = rng.normal(size=(3, 2))
    e = rng.normal(size=(5, 4))
    head = ClassifierHead(Tensor(rng.normal(size=(3, 5))))
    labels = rng.integers(0, 3, size=5)
    left, right = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y = np.where(rng.random(6) < 0.5, 1.0, -1.0)
    state = MarginState(dim=4)

    def conv_x(x):
        return _weighted_sum(T.conv2d(x, Tensor(w_conv), None, stride=2, padding=1), c_conv)

    def conv_w(w):
        return _weighted_sum(T.conv2d(Tensor(x_conv), w, None, stride=2, padding=1), c_conv)

    return {
        "gem_x": (lambda x: _weighted_sum(gem(x, p), c_gem), maps),
        "gem_p": (lambda q: _weighted_sum(gem(Tensor(maps), q), c_gem), np.array(p)),
        "conv2d_x": (conv_x, x_conv),
        "conv2d_w": (conv_w, w_conv),
        "matmul_a": (lambda t: _weighted_sum(T.matmul(t, Tensor(b)), c_mm), a),
        "matmul_b": (lambda t: _weighted_sum(T.matmul(Tensor(a), t), c_mm), b),
        "cross_entropy_e": (lambda t: T.sum(cross_entropy(t, head, labels)), e),
        "margin_loss_e": (lambda t: T.sum(margin_loss(t, Tensor(right), state, y)), left),
    }


def standard_suite(seed: int = 0, points: int = 10, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per quantity over ``points`` random float64 draws."""
    worst: dict[str, float] = {}
    for k in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        for name, (f, x) in _suite_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, x, eps))
    return worst
