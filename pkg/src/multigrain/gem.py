"""Generalized-mean (GeM) pooling over the spatial axes of an activation map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op


@dataclass
class GemConfig:
    p: float = 3.0
    p_star: float | None = None
    learnable: bool = False
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"GeM exponent must be positive, got {self.p}")
        if self.p_star is not None and not self.p_star > 0:
            raise ValueError(f"GeM test exponent must be positive, got {self.p_star}")


def _pooled_logs(xd: np.ndarray, p: float, eps: float):
    spatial = xd.shape[-2] * xd.shape[-1]
    if spatial < 1:
        raise ValueError("GeM: empty spatial extent")
    xc = np.maximum(xd, eps).reshape(xd.shape[:-2] + (spatial,))
    lx = np.log(xc)
    lp = p * lx
    top = lp.max(axis=-1, keepdims=True)
    w = np.exp(lp - top)
    total = w.sum(axis=-1, keepdims=True)
    # log of mean(x^p), factored by the largest term
    log_mean = top[..., 0] + np.log(total[..., 0]) - np.log(spatial)
    return xc, lx, w / total, log_mean


def gem_numpy(x, p: float, eps: float = 1e-6) -> np.ndarray:
    """Plain-array GeM; ``p == 1`` is the arithmetic spatial mean."""
    xd = np.asarray(x, dtype=np.float64)
    if not p > 0:
        raise ValueError(f"GeM exponent must be positive, got {p}")
    if p == 1:
        spatial = xd.shape[-2] * xd.shape[-1]
        return np.maximum(xd, eps).reshape(xd.shape[:-2] + (spatial,)).mean(axis=-1)
    _, _, _, log_mean = _pooled_logs(xd, p, eps)
    return np.exp(log_mean / p)


def gem(x: Tensor, p, eps: float = 1e-6) -> Tensor:
    """Pool ``(..., C, H, W)`` to ``(..., C)``; ``p`` is a float or a scalar Tensor."""
    p_tensor = p if isinstance(p, Tensor) else None
    pv = float(p_tensor.data.reshape(-1)[0]) if p_tensor is not None else float(p)
    if not pv > 0:
        raise ValueError(f"GeM exponent must be positive, got {pv}")
    xd = x.data
    if xd.ndim < 2 or xd.shape[-2] * xd.shape[-1] < 1:
        raise ValueError("GeM: empty spatial extent")
    spatial = xd.shape[-2] * xd.shape[-1]
    live = (xd >= eps).reshape(xd.shape[:-2] + (spatial,))
    inputs = (x,) if p_tensor is None else (x, p_tensor)

    if pv == 1 and (p_tensor is None or not p_tensor.requires_grad):
        out = np.maximum(xd, eps).reshape(xd.shape[:-2] + (spatial,)).mean(axis=-1)

        def bw_mean(g):
            gx = (g[..., None] * live / spatial).reshape(xd.shape)
            return (gx,) if p_tensor is None else (gx, None)

        return custom_op("gem", out, inputs, bw_mean)

    xc, lx, weights, log_mean = _pooled_logs(xd, pv, eps)
    out = np.exp(log_mean / pv).astype(xd.dtype)

    def bw(g):
        # de/dx_u = e * w_u / x_u, with w the normalized x^p weights
        gx = (g[..., None] * out[..., None] * weights / xc * live).reshape(xd.shape)
        if p_tensor is None:
            return (gx,)
        de_dp = out * (-log_mean / pv**2 + (weights * lx).sum(axis=-1) / pv)
        return gx, np.asarray((g * de_dp).sum()).reshape(p_tensor.shape)

    return custom_op("gem", out, inputs, bw)


def gem_dp(x, p: float, eps: float = 1e-6) -> np.ndarray:
    """Analytic derivative of the pooled vector with respect to the exponent."""
    xd = np.asarray(x, dtype=np.float64)
    if not p > 0:
        raise ValueError(f"GeM exponent must be positive, got {p}")
    _, lx, weights, log_mean = _pooled_logs(xd, p, eps)
    e = np.exp(log_mean / p)
    return e * (-log_mean / p**2 + (weights * lx).sum(axis=-1) / p)


class GemPool:
    """GeM layer holding its exponent; ``p`` becomes a trainable scalar when learnable."""

    def __init__(self, cfg: GemConfig):
        self.cfg = cfg
        self.p = Tensor(np.array(cfg.p), requires_grad=cfg.learnable)

    def parameters(self) -> list[Tensor]:
        return [self.p] if self.cfg.learnable else []

    def __call__(self, x: Tensor, p_star: float | None = None) -> Tensor:
        override = self.cfg.p_star if p_star is None else p_star
        if override is not None:
            # evaluation path: the override is a constant, nothing flows into p
            return gem(x, float(override), self.cfg.epsilon)
        return gem(x, self.p if self.cfg.learnable else float(self.p.data), self.cfg.epsilon)
