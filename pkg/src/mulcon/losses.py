"""Classification and contrastive objectives.

Conventions: BCE is averaged over images (summed over labels); contrastive
losses are averaged over the anchors that have at least one positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-7
DEFAULT_TAU = 0.2
DEFAULT_GAMMA = 0.1


def bce_loss(s, y) -> Tensor:
    s = T.as_tensor(s)
    y = np.asarray(y, dtype=s.dtype)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    sc = T.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(sc) * y + T.log(1.0 - sc) * (1.0 - y)
    return T.scale(T.sum(ll), -1.0 / s.shape[0])


@dataclass
class AnchorIndex:
    """Active (image, label) pairs and, per anchor, its positive and candidate sets.

    ``positives[a]`` and ``candidates[a]`` hold indices into ``pairs``.
    """

    pairs: List[Tuple[int, int]]
    positives: List[List[int]]
    candidates: List[List[int]]

    def __len__(self) -> int:
        return len(self.pairs)

    def positive_mask(self) -> np.ndarray:
        m = np.zeros((len(self), len(self)), dtype=bool)
        for a, ps in enumerate(self.positives):
            m[a, ps] = True
        return m

    def candidate_mask(self) -> np.ndarray:
        m = np.zeros((len(self), len(self)), dtype=bool)
        for a, cs in enumerate(self.candidates):
            m[a, cs] = True
        return m


def build_anchor_sets(y) -> AnchorIndex:
    y = np.asarray(y)
    if y.ndim != 2:
        raise ShapeError(f"labels must be N x L, got {y.shape}")
    rows, cols = np.nonzero(y == 1)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    labels = cols
    n = len(pairs)
    everyone = np.arange(n)
    positives, candidates = [], []
    for a in range(n):
        others = everyone[everyone != a]
        candidates.append(others.tolist())
        positives.append(others[labels[others] == labels[a]].tolist())
    return AnchorIndex(pairs, positives, candidates)


def _anchor_terms(z: Tensor, pos: np.ndarray, cand: np.ndarray, tau: float) -> Tuple[Tensor, np.ndarray]:
    """Per-anchor -mean_p log(exp(z.z_p/t) / sum_a exp(z.z_a/t)) for anchors with positives."""
    sim = T.scale(z @ T.transpose(z), 1.0 / tau)
    masked = np.where(cand, sim.data, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0).astype(z.dtype)
    # Non-candidates get -inf logits so they vanish from the denominator.
    bias = np.where(cand, 0.0, -np.inf).astype(z.dtype) - shift
    e = T.exp(sim + bias)
    log_den = T.log(T.sum(e, axis=1, keepdims=True)) + shift
    log_prob = sim - log_den
    counts = pos.sum(axis=1)
    keep = counts > 0
    pos_f = pos.astype(z.dtype)
    per_anchor = T.sum(log_prob * pos_f, axis=1) * (-1.0 / np.maximum(counts, 1)).astype(z.dtype)
    return per_anchor, keep


def _masked_mean(values: Tensor, keep: np.ndarray) -> Tensor:
    n = int(keep.sum())
    if n == 0:
        return T.scale(T.sum(values), 0.0)
    return T.scale(T.sum(values * keep.astype(values.dtype)), 1.0 / n)


def mulcon_con_loss(z, idx: AnchorIndex, tau: float = DEFAULT_TAU) -> Tuple[Tensor, int]:
    """Multi-label contrastive loss over active label-level embeddings.

    Returns the loss and the number of anchors skipped for lacking positives.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = T.as_tensor(z)
    if z.ndim != 3:
        raise ShapeError(f"z must be N x L x d, got {z.shape}")
    n, L, d = z.shape
    if len(idx) < 2:
        return Tensor(np.zeros((), dtype=z.dtype)), len(idx)
    flat = np.array([i * L + j for i, j in idx.pairs], dtype=np.intp)
    za = T.take(T.reshape(z, (n * L, d)), flat)
    per_anchor, keep = _anchor_terms(za, idx.positive_mask(), idx.candidate_mask(), tau)
    return _masked_mean(per_anchor, keep), int((~keep).sum())


def image_positive_mask(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    shared = (y @ y.T) >= 1
    np.fill_diagonal(shared, False)
    return shared


def supcon_image_loss(z_img, y, tau: float = DEFAULT_TAU) -> Tuple[Tensor, int]:
    """Image-level supervised contrastive loss; positives share >= 1 active label."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z_img = T.as_tensor(z_img)
    n = z_img.shape[0]
    if n < 2:
        return Tensor(np.zeros((), dtype=z_img.dtype)), n
    cand = ~np.eye(n, dtype=bool)
    per_anchor, keep = _anchor_terms(z_img, image_positive_mask(y), cand, tau)
    return _masked_mean(per_anchor, keep), int((~keep).sum())


@dataclass
class LossReport:
    bce: float
    con: float
    combined: float
    gamma: float
    anchors_total: int = 0
    anchors_skipped: int = 0
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        return {
            "bce": self.bce,
            "con": self.con,
            "combined": self.combined,
            "anchors_total": self.anchors_total,
            "anchors_skipped": self.anchors_skipped,
        }


def combined_loss(bce, con=None, gamma: float = DEFAULT_GAMMA, anchors_total: int = 0,
                  anchors_skipped: int = 0) -> LossReport:
    """bce + gamma * con, keeping the differentiable sum for backprop."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    bce_t = T.as_tensor(bce)
    if con is None:
        total = bce_t
        con_v = 0.0
    else:
        con_t = T.as_tensor(con)
        total = bce_t + T.scale(con_t, gamma) if gamma else bce_t
        con_v = float(con_t.item())
    bce_v = float(bce_t.item())
    # Reported in float64 from the parts so the decomposition holds exactly.
    return LossReport(bce_v, con_v, bce_v + gamma * con_v, gamma, anchors_total, anchors_skipped, total)
