"""Classification metrics, label-level retrieval and visual exports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .tensor import no_grad

log = logging.getLogger(__name__)


def average_precision(scores, relevance) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks k of relevant items.

    Items are ranked by descending score, ties broken by ascending index.
    Returns 0.0 when nothing is relevant.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if scores.shape != rel.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and relevance {rel.shape} must be equal-length vectors")
    if not rel.any():
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = rel[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


@dataclass
class MetricsReport:
    ap: List[float]
    mAP: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    CF1: float
    OF1: float
    threshold: float
    classes_scored: int
    classes_skipped: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def summary(self) -> Dict[str, float]:
        return {"mAP": self.mAP, "CF1": self.CF1, "OF1": self.OF1}


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def metrics(s, y, threshold: float = 0.5) -> MetricsReport:
    """mAP, macro F1 over classes (CF1) and micro F1 over all cells (OF1).

    Classes without a positive in ``y`` are left out of mAP and CF1.
    """
    s = np.asarray(getattr(s, "data", s), dtype=np.float64)
    y = np.asarray(y).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    pred = s >= threshold
    present = y.any(axis=0)
    aps, ps, rs, fs = [], [], [], []
    for j in np.flatnonzero(present):
        aps.append(average_precision(s[:, j], y[:, j]))
        tp = int(np.sum(pred[:, j] & y[:, j]))
        npred = int(pred[:, j].sum())
        p = tp / npred if npred else 0.0
        r = tp / int(y[:, j].sum())
        ps.append(p)
        rs.append(r)
        fs.append(_f1(p, r))
    skipped = int((~present).sum())
    if skipped:
        log.info("%d classes without positives excluded from mAP/CF1", skipped)
    tp = int(np.sum(pred & y))
    op = tp / int(pred.sum()) if pred.any() else 0.0
    orr = tp / int(y.sum()) if y.any() else 0.0
    return MetricsReport(
        ap=aps,
        mAP=float(np.mean(aps)) if aps else 0.0,
        precision=ps,
        recall=rs,
        f1=fs,
        CF1=float(np.mean(fs)) if fs else 0.0,
        OF1=_f1(op, orr),
        threshold=threshold,
        classes_scored=len(aps),
        classes_skipped=skipped,
    )


# -- inference helpers ----------------------------------------------------------


def predict(model, images: np.ndarray, batch_size: int = 128, return_embeddings: bool = False):
    """Probabilities (and optionally label-level embeddings) without building a graph."""
    probs, embs = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start : start + batch_size])
            probs.append(out.probs.data)
            if return_embeddings:
                embs.append(out.g.data)
    p = np.concatenate(probs)
    return (p, np.concatenate(embs)) if return_embeddings else p


def evaluate_split(model, split, threshold: float = 0.5, batch_size: int = 128) -> MetricsReport:
    probs = predict(model, split.float_images(dtype=model.dtype), batch_size)
    return metrics(probs, split.labels, threshold)


# -- retrieval -------------------------------------------------------------------


@dataclass
class RetrievalHit:
    image_id: int
    distance: float
    nearest_label: int


@dataclass
class RetrievalResult:
    query_id: int
    labels: List[int]
    hits: List[RetrievalHit] = field(default_factory=list)

    def ids(self) -> List[int]:
        return [h.image_id for h in self.hits]


def retrieve(query: np.ndarray, labels: Sequence[int], gallery: np.ndarray, k: int = 4,
             query_id: int = -1, gallery_ids: Optional[Sequence[int]] = None) -> RetrievalResult:
    """Rank gallery images by Euclidean distance of label-level embeddings.

    ``query`` is one image's L x D embeddings and ``gallery`` is M x L x D.
    A single label compares row ``j`` of each image; several labels compare
    the concatenation of those rows. Entries whose id equals ``query_id`` are
    skipped. ``nearest_label`` is the gallery row closest to the query vector
    (single-label queries) or the first query label otherwise.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    labels = [int(j) for j in labels]
    if not labels:
        raise ValueError("query needs at least one label")
    if gallery.ndim != 3 or len(gallery) == 0:
        raise ValueError("gallery must be a non-empty M x L x D array")
    L = gallery.shape[1]
    if any(not 0 <= j < L for j in labels):
        raise IndexError(f"label index out of range [0, {L})")
    ids = np.arange(len(gallery)) if gallery_ids is None else np.asarray(gallery_ids)
    keep = ids != query_id
    q = query[labels].reshape(-1)
    cand = gallery[keep][:, labels].reshape(int(keep.sum()), -1)
    dist = np.sqrt(np.sum((cand - q) ** 2, axis=1))
    kept_ids = ids[keep]
    order = np.lexsort((kept_ids, dist))[:k]
    hits = []
    for i in order:
        if len(labels) == 1:
            rows = gallery[keep][i]
            nearest = int(np.argmin(np.sum((rows - q) ** 2, axis=1)))
        else:
            nearest = labels[0]
        hits.append(RetrievalHit(int(kept_ids[i]), float(dist[i]), nearest))
    return RetrievalResult(int(query_id), labels, hits)


def retrieval_precision(embeddings: np.ndarray, labels: np.ndarray, k: int = 4) -> Dict[str, float]:
    """Mean fraction of top-k hits sharing the query label, versus its base rate.

    Every active (image, label) pair of the split serves once as a query.
    """
    labels = np.asarray(labels).astype(bool)
    fracs, base = [], []
    n = len(embeddings)
    for i in range(n):
        for j in np.flatnonzero(labels[i]):
            res = retrieve(embeddings[i], [j], embeddings, k=k, query_id=i)
            fracs.append(np.mean([labels[h.image_id, j] for h in res.hits]))
            others = np.delete(labels[:, j], i)
            base.append(others.mean())
    return {"precision_at_k": float(np.mean(fracs)), "base_rate": float(np.mean(base))}


# -- exports -----------------------------------------------------------------------


def active_embeddings(embeddings: np.ndarray, labels: np.ndarray):
    """Rows (image_id, label_id, vector) for every active label."""
    rows, cols = np.nonzero(np.asarray(labels) == 1)
    return rows, cols, embeddings[rows, cols]


def export_embeddings(model, split, path: Union[str, Path], batch_size: int = 128) -> int:
    """Write one CSV row per active (image, label) embedding; returns the row count."""
    _, g = predict(model, split.float_images(dtype=model.dtype), batch_size, return_embeddings=True)
    rows, cols, vecs = active_embeddings(g, split.labels)
    D = g.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label_id"] + [f"d{k}" for k in range(D)])
        for i, j, v in zip(rows, cols, vecs):
            w.writerow([int(i), int(j)] + [repr(float(x)) for x in v])
    return len(rows)


def read_embeddings_csv(path: Union[str, Path]):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2:]


def cluster_ratio(vectors: np.ndarray, classes: np.ndarray) -> Dict[str, float]:
    """Mean intra-class over mean inter-class pairwise Euclidean distance."""
    vectors = np.asarray(vectors, dtype=np.float64)
    classes = np.asarray(classes)
    sq = np.sum(vectors**2, axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * vectors @ vectors.T, 0.0))
    same = classes[:, None] == classes[None, :]
    off = ~np.eye(len(vectors), dtype=bool)
    intra = float(d[same & off].mean())
    inter = float(d[~same].mean())
    return {"intra": intra, "inter": inter, "ratio": intra / inter}


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Binary greyscale PGM (P5) from values in [0, 1]."""
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def attention_weights(model, image: np.ndarray) -> np.ndarray:
    """Per-head attention of every class query over spatial cells: h x L x WH."""
    with no_grad():
        out = model(image[None].astype(model.dtype), return_weights=True)
    return np.stack([w.data[0] for w in out.attention])


def export_attention(model, image: np.ndarray, labels: np.ndarray, path_prefix: Union[str, Path],
                     head_label: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Write head-averaged maps per active label and per-head maps for ``head_label``.

    Maps are min-max scaled, upsampled by pixel repetition to the input size
    and written as PGM. Returns the raw (pre-normalisation) grids by file stem.
    """
    weights = attention_weights(model, image)
    grid = model.config.encoder.grid
    up = model.config.encoder.image_size // grid
    active = [int(j) for j in np.flatnonzero(labels)]
    if head_label is None:
        head_label = active[0] if active else 0
    prefix = str(path_prefix)
    raw = {}

    def emit(stem: str, cells: np.ndarray):
        g = cells.reshape(grid, grid)
        raw[stem] = g
        write_pgm(f"{prefix}_{stem}.pgm", np.kron(_minmax(g), np.ones((up, up))))

    mean = weights.mean(axis=0)
    for j in active:
        emit(f"label{j}", mean[j])
    for h in range(weights.shape[0]):
        emit(f"label{head_label}_head{h}", weights[h, head_label])
    return raw


def glyph_cells(glyph, grid: int, image_size: int) -> np.ndarray:
    """Boolean grid marking encoder cells overlapped by a glyph's bounding box."""
    cell = image_size / grid
    x0, y0, x1, y1 = glyph.box()
    edges = np.arange(grid) * cell
    cols = (edges < x1) & (edges + cell > x0)
    rows = (edges < y1) & (edges + cell > y0)
    return rows[:, None] & cols[None, :]
