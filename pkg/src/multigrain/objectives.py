"""Classification and retrieval objectives for the joint embedding.

The retrieval side is a margin loss over positive pairs (augmented copies of
one image) and negatives drawn by distance-weighted sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DISTANCE_FLOOR = 1e-4


@dataclass
class ClassifierHead:
    """Linear classifier whose last weight column multiplies a constant 1 channel."""

    W: Tensor

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator, dtype=np.float64) -> "ClassifierHead":
        w = rng.normal(0.0, np.sqrt(1.0 / dim), size=(n_classes, dim + 1))
        w[:, -1] = 0.0
        return cls(Tensor(w.astype(dtype), requires_grad=True))

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1] - 1

    def logits(self, e: Tensor) -> Tensor:
        return T.matmul(with_bias_channel(e), T.transpose(self.W))

    def scores_numpy(self, e: np.ndarray) -> np.ndarray:
        w = self.W.data
        return e @ w[:, :-1].T + w[:, -1]


@dataclass
class MarginState:
    alpha: float = 0.2
    beta: float = 1.2
    beta_lr: float = 0.1
    tau: float | None = None
    dim: int = 64
    d_min: float = DISTANCE_FLOOR

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("margin alpha and beta must be positive")

    @property
    def tau_value(self) -> float:
        return default_tau(self.dim) if self.tau is None else float(self.tau)


@dataclass
class PairSet:
    positives: np.ndarray  # (P, 2), canonical i < j
    negatives: np.ndarray  # (P, 2), anchor first
    batch_size: int

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Left indices, right indices and labels y_ij of all sampled pairs."""
        pairs = np.concatenate([self.positives, self.negatives]).astype(np.intp)
        y = np.concatenate([np.ones(len(self.positives)), -np.ones(len(self.negatives))])
        return pairs[:, 0], pairs[:, 1], y


def with_bias_channel(e: Tensor) -> Tensor:
    ones = Tensor(np.ones(e.shape[:-1] + (1,), dtype=e.data.dtype))
    return T.concat([e, ones], axis=-1)


# ---------------------------------------------------------------- classification


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross-entropy of an (N, C) logit matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise T.ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    top = z.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=1))
    rows = np.arange(len(labels))
    out = lse - z[rows, labels]

    def bw(g):
        prob = np.exp(z - lse[:, None])
        prob[rows, labels] -= 1.0
        return (prob * g[:, None],)

    return T.custom_op("cross_entropy", out, (logits,), bw)


def cross_entropy(e: Tensor, head: ClassifierHead, labels) -> Tensor:
    """Cross-entropy of embeddings under ``head``; a single 1-D embedding yields a scalar."""
    if e.ndim == 1:
        losses = cross_entropy_logits(head.logits(T.reshape(e, (1, -1))), [labels])
        return T.reshape(losses, ())
    return cross_entropy_logits(head.logits(e), labels)


# ---------------------------------------------------------------- retrieval


def pair_distance(e_i: Tensor, e_j: Tensor) -> Tensor:
    """Euclidean distance between row-normalized embeddings, per row."""
    return T.l2norm(T.normalize(e_i, axis=-1) - T.normalize(e_j, axis=-1), axis=-1)


def margin_loss(e_i: Tensor, e_j: Tensor, state: MarginState, y, beta=None) -> Tensor:
    """max(0, alpha + y (D - beta)) per pair; ``beta`` may be a trainable scalar Tensor."""
    for e in (e_i, e_j):
        if np.any(np.sqrt((e.data**2).sum(axis=-1)) == 0):
            raise T.DomainError("margin_loss: zero-norm embedding")
    if beta is None:
        beta = state.beta
    y = np.asarray(y, dtype=e_i.data.dtype)
    d = pair_distance(e_i, e_j)
    yt = Tensor(np.broadcast_to(y, d.shape).copy())
    shifted = d - (beta if isinstance(beta, Tensor) else Tensor(np.array(float(beta))))
    return T.relu(T.mul(yt, shifted) + state.alpha)


def log_negative_density(z, d: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return (d - 2) * np.log(z) + 0.5 * (d - 3) * np.log1p(-0.25 * z * z)


def negative_density(z, d: int) -> np.ndarray:
    """Unnormalized density of distances between uniform points on the unit sphere in R^d."""
    z = np.asarray(z, dtype=np.float64)
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if np.any((z <= 0) | (z >= 2)):
        raise ValueError("distance must lie in (0, 2)")
    return np.exp(log_negative_density(z, d))


def default_tau(d: int) -> float:
    """Clamp equal to 1/q(0.5): inverse-density weights saturate below distance 0.5."""
    return float(np.exp(-log_negative_density(0.5, d)))


def negative_log_weights(dist, d: int, tau: float, d_min: float = DISTANCE_FLOOR) -> np.ndarray:
    """log min(tau, 1/q(D)) with D clamped to [d_min, 2 - d_min]."""
    z = np.clip(np.asarray(dist, dtype=np.float64), d_min, 2.0 - d_min)
    return np.minimum(np.log(tau), -log_negative_density(z, d))


def negative_probabilities(embeddings, instance_ids, anchor: int, state: MarginState) -> np.ndarray:
    """Exact sampling law p(j | anchor) over the whole batch (zero on matching items)."""
    en = _unit_rows(np.asarray(embeddings, dtype=np.float64))
    ids = np.asarray(instance_ids)
    dist = np.sqrt(np.maximum(((en - en[anchor]) ** 2).sum(axis=1), 0.0))
    mask = ids != ids[anchor]
    if not mask.any():
        raise ValueError(f"anchor {anchor} has no negatives in the batch")
    logw = negative_log_weights(dist, en.shape[1], state.tau_value, state.d_min)
    logw = np.where(mask, logw, -np.inf)
    w = np.exp(logw - logw[mask].max())
    return w / w.sum()


def _unit_rows(e: np.ndarray) -> np.ndarray:
    nrm = np.sqrt((e * e).sum(axis=1, keepdims=True))
    if np.any(nrm == 0):
        raise T.DomainError("zero-norm embedding")
    return e / nrm


def positive_pairs(instance_ids) -> np.ndarray:
    ids = np.asarray(instance_ids)
    i, j = np.triu_indices(len(ids), k=1)
    keep = ids[i] == ids[j]
    return np.stack([i[keep], j[keep]], axis=1)


def sample_negatives(embeddings, instance_ids, anchors, state: MarginState, rng: np.random.Generator) -> np.ndarray:
    """One distance-weighted negative per entry of ``anchors`` (anchors may repeat).

    Draws by inverting the cumulative weights of each anchor's row, one uniform per draw.
    """
    e = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    ids = np.asarray(instance_ids)
    anchors = np.asarray(anchors, dtype=np.intp)
    en = _unit_rows(e)
    gram = np.clip(en @ en.T, -1.0, 1.0)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * gram, 0.0))
    logw = negative_log_weights(dist, e.shape[1], state.tau_value, state.d_min)
    logw = np.where(ids[:, None] != ids[None, :], logw, -np.inf)
    peak = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(peak[anchors])):
        raise ValueError("sample_negatives: an instance has no negatives in the batch")
    cum = np.cumsum(np.exp(logw - np.where(np.isfinite(peak), peak, 0.0)), axis=1)[anchors]
    u = rng.random(len(anchors)) * cum[:, -1]
    picks = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(picks, e.shape[0] - 1)


def sample_pairs(embeddings, instance_ids, state: MarginState, rng: np.random.Generator) -> PairSet:
    """All positive pairs plus one distance-weighted negative per positive pair."""
    e = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    ids = np.asarray(instance_ids)
    if len(np.unique(ids)) < 2:
        raise ValueError("sample_pairs: batch needs at least two instances")
    pos = positive_pairs(ids)
    if len(pos) == 0:
        raise ValueError("sample_pairs: batch has no positive pair; check the batch sampler")
    anchors = pos[:, 0]
    neg = np.stack([anchors, sample_negatives(e, ids, anchors, state, rng)], axis=1)
    return PairSet(pos, neg, e.shape[0])


# ---------------------------------------------------------------- joint objective


@dataclass
class JointTerms:
    total: Tensor
    classification: Tensor | None
    retrieval: Tensor | None


def classification_term(e: Tensor, labels, head: ClassifierHead, lam: float) -> Tensor:
    return T.scale(T.mean(cross_entropy(e, head, labels)), lam)


def retrieval_term(e: Tensor, pairs: PairSet, state: MarginState, lam: float, beta=None) -> Tensor:
    left, right, y = pairs.as_arrays()
    losses = margin_loss(T.take_rows(e, left), T.take_rows(e, right), state, y, beta)
    return T.scale(T.sum(losses), (1.0 - lam) / len(y))


def joint_loss(
    e: Tensor,
    labels,
    head: ClassifierHead,
    state: MarginState,
    lam: float,
    pairs: PairSet | None = None,
    beta=None,
) -> JointTerms:
    """lam * mean cross-entropy + (1 - lam) * mean margin loss over all sampled pairs."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    cls_term = classification_term(e, labels, head, lam) if lam > 0 else None
    retr_term = None
    if lam < 1:
        if pairs is None or len(pairs) == 0:
            raise ValueError("joint_loss: retrieval weight is positive but no pairs were sampled")
        retr_term = retrieval_term(e, pairs, state, lam, beta)
    if cls_term is None:
        total = retr_term
    elif retr_term is None:
        total = cls_term
    else:
        total = cls_term + retr_term
    return JointTerms(total, cls_term, retr_term)


def gradient_fraction(e, labels, head: ClassifierHead, state: MarginState, lam: float, pairs: PairSet, beta=None) -> float:
    """||g_class|| / (||g_class|| + ||g_retr||), gradients taken at the embedding layer."""
    if not 0.0 < lam < 1.0:
        raise ValueError("gradient_fraction needs both loss terms (0 < lambda < 1)")
    e_data = np.array(e.data if isinstance(e, Tensor) else e, dtype=np.float64)
    frozen = ClassifierHead(Tensor(head.W.data))
    beta_v = float(beta.data) if isinstance(beta, Tensor) else (state.beta if beta is None else float(beta))

    def norm_of(term_fn):
        leaf = Tensor(e_data.copy(), requires_grad=True)
        with T.Tape():
            out = term_fn(leaf)
        T.backward(out)
        return float(np.sqrt((leaf.grad**2).sum()))

    g_cls = norm_of(lambda x: classification_term(x, labels, frozen, lam))
    g_retr = norm_of(lambda x: retrieval_term(x, pairs, state, lam, beta_v))
    if g_cls + g_retr == 0:
        return float("nan")
    return g_cls / (g_cls + g_retr)
