"""PCA whitening of embeddings and folding of the whitening into the classifier.

The transform maps an embedding to ``S (e / |e| - mu)``. Because the map is
affine in the normalized embedding, a linear classifier trained on raw
embeddings can be rewritten to act on whitened ones without changing any
decision.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mgt
from .objectives import ClassifierHead

DEFAULT_FLOOR = 1e-6


class WhiteningError(ValueError):
    """Raised for zero embeddings or a transform that cannot be inverted."""


def fingerprint(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    h = hashlib.sha256(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()[:16]


def _unit_rows(e: np.ndarray) -> np.ndarray:
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise WhiteningError("cannot whiten a zero embedding")
    return e / norms


def oriented_eigh(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order; each eigenvector's largest-magnitude entry is positive."""
    val, vec = np.linalg.eigh(cov)
    order = np.argsort(-val, kind="stable")
    val, vec = val[order], vec[:, order]
    lead = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[lead, np.arange(vec.shape[1])])
    signs[signs == 0] = 1.0
    return val, vec * signs


@dataclass
class WhiteningTransform:
    mu: np.ndarray
    S: np.ndarray
    floor: float
    eigenvalues: np.ndarray
    fit_fingerprint: str = ""
    n_fit: int = 0
    shrinkage: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.mu)

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return apply_whitening(e, self)

    def metadata(self) -> dict:
        return {
            "format": "multigrain-whitening/1",
            "dim": self.dim,
            "floor": self.floor,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "fit_fingerprint": self.fit_fingerprint,
            "n_fit": self.n_fit,
            "shrinkage": self.shrinkage,
            **self.meta,
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        mgt.save(d / "mu.mgt", self.mu)
        mgt.save(d / "S.mgt", self.S)
        (d / "whitening.json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "WhiteningTransform":
        d = Path(directory)
        meta = json.loads((d / "whitening.json").read_text())
        extra = {k: v for k, v in meta.items()
                 if k not in {"format", "dim", "floor", "eigenvalues", "fit_fingerprint", "n_fit", "shrinkage"}}
        return cls(mgt.load(d / "mu.mgt"), mgt.load(d / "S.mgt"), meta["floor"], np.asarray(meta["eigenvalues"]),
                   meta["fit_fingerprint"], meta["n_fit"], meta["shrinkage"], extra)


def whitening_from_moments(mu: np.ndarray, cov: np.ndarray, floor: float = DEFAULT_FLOOR) -> WhiteningTransform:
    """Transform for a known mean and covariance; ``floor`` is relative to the largest eigenvalue."""
    if floor < 0:
        raise WhiteningError("eigenvalue floor must be non-negative")
    cov = np.asarray(cov, dtype=np.float64)
    val, vec = oriented_eigh((cov + cov.T) / 2)
    eps = floor * max(val[0], 0.0)
    if np.any(val < eps):
        warnings.warn(f"{int(np.sum(val < eps))} eigenvalue(s) below the floor {eps:.3g}; clamping",
                      RuntimeWarning, stacklevel=2)
    clamped = np.maximum(val, eps)
    if np.any(clamped <= 0):
        raise WhiteningError("covariance is singular and the eigenvalue floor is zero")
    S = vec.T / np.sqrt(clamped)[:, None]
    return WhiteningTransform(np.asarray(mu, dtype=np.float64).copy(), S, float(floor), val)


def fit_whitening(embeddings: np.ndarray, floor: float = DEFAULT_FLOOR, shrinkage: float = 0.0) -> WhiteningTransform:
    """Fit on unlabelled embeddings: normalize rows, centre, eigendecompose the (1/n) covariance.

    ``shrinkage`` blends the covariance toward a scaled identity; 0 disables it.
    """
    x = _unit_rows(embeddings)
    n, d = x.shape
    if n < 2:
        raise WhiteningError("need at least two embeddings to fit a whitening")
    if not 0.0 <= shrinkage <= 1.0:
        raise WhiteningError("shrinkage must be in [0, 1]")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / n
    if shrinkage:
        cov = (1 - shrinkage) * cov + shrinkage * np.trace(cov) / d * np.eye(d)
    t = whitening_from_moments(mu, cov, floor)
    t.fit_fingerprint = fingerprint(embeddings)
    t.n_fit = n
    t.shrinkage = float(shrinkage)
    return t


def apply_whitening(e: np.ndarray, t: WhiteningTransform) -> np.ndarray:
    """``S (e/|e| - mu)`` for one embedding or each row of a matrix."""
    arr = np.asarray(e, dtype=np.float64)
    out = (_unit_rows(arr) - t.mu) @ t.S.T
    return out[0] if arr.ndim == 1 else out


@dataclass
class FoldedHead:
    """Classifier on whitened embeddings: ``|e| (<w'_c, phi(e)> + b'_c) + c_c``.

    ``c_c`` is the original head's constant-channel bias, carried over unchanged.
    """

    weight: np.ndarray  # C x d
    offset: np.ndarray  # b'_c
    bias: np.ndarray  # c_c

    def scores(self, whitened: np.ndarray, norms: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(whitened)
        return np.asarray(norms, dtype=np.float64).reshape(-1, 1) * (w @ self.weight.T + self.offset) + self.bias

    def scores_from_embeddings(self, e: np.ndarray, t: WhiteningTransform) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        return self.scores(apply_whitening(e, t), np.linalg.norm(e, axis=1))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        mgt.save(d / "weight.mgt", self.weight)
        mgt.save(d / "offset.mgt", self.offset)
        mgt.save(d / "bias.mgt", self.bias)

    @classmethod
    def load(cls, directory) -> "FoldedHead":
        d = Path(directory)
        return cls(mgt.load(d / "weight.mgt"), mgt.load(d / "offset.mgt"), mgt.load(d / "bias.mgt"))


def fold_classifier(head: ClassifierHead | np.ndarray, t: WhiteningTransform) -> FoldedHead:
    """``w'_c = S^{-T} w_c`` and ``b'_c = <w_c, mu>``.

    Accepts a :class:`ClassifierHead` (last column is the constant-channel bias)
    or a bare C x d weight matrix.
    """
    if isinstance(head, ClassifierHead):
        full = np.asarray(head.W.data, dtype=np.float64)
        w, c = full[:, :-1], full[:, -1]
    else:
        w = np.asarray(head, dtype=np.float64)
        c = np.zeros(w.shape[0])
    if w.shape[1] != t.dim:
        raise WhiteningError(f"head dimension {w.shape[1]} does not match transform dimension {t.dim}")
    if not np.all(np.isfinite(t.S)) or np.linalg.cond(t.S) > 1e15:
        raise WhiteningError("whitening matrix is singular")
    weight = np.linalg.solve(t.S.T, w.T).T
    return FoldedHead(weight, w @ t.mu, c.copy())
