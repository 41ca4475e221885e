"""Classification accuracy and retrieval scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["topk_accuracy", "RetrievalResult", "retrieval_eval", "pairwise_similarity",
           "average_precision"]


def topk_accuracy(logits, labels, ks=(1, 5)) -> dict:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties go to the lower class index, so the result is deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    # stable sort on the negated logits keeps lower indices first among equals
    order = np.argsort(-logits, axis=1, kind="stable")
    rank = np.argmax(order == labels[:, None], axis=1)
    return {f"top{k}": float(np.mean(rank < k)) for k in ks}


@dataclass
class RetrievalResult:
    mAP: float
    cmc_rank1: float
    per_query_ap: list[float] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)

    def to_dict(self):
        return {"mAP": self.mAP, "cmc_rank1": self.cmc_rank1,
                "per_query_ap": self.per_query_ap, "excluded_queries": self.excluded,
                "query_count": len(self.per_query_ap)}


def pairwise_similarity(features, metric="cosine"):
    """Higher is more similar; euclidean returns negated distances."""
    f = np.asarray(features, dtype=np.float64)
    if metric == "cosine":
        norm = np.linalg.norm(f, axis=1, keepdims=True)
        u = f / np.where(norm == 0, 1.0, norm)
        return u @ u.T
    if metric == "euclidean":
        sq = np.sum(f * f, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2 * f @ f.T
        return -np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"metric must be 'cosine' or 'euclidean', got {metric!r}")


def average_precision(relevant_in_rank_order) -> float:
    """Mean of precision@k over the ranks ``k`` holding a relevant item."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def retrieval_eval(features, labels, metric="cosine") -> RetrievalResult:
    """Leave-one-out retrieval: every sample queries all the others.

    Gallery items with equal similarity are ranked by index. Queries whose
    class has no other member are skipped and listed in ``excluded``.
    """
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("retrieval needs at least 2 samples")
    sim = pairwise_similarity(features, metric)
    aps, hits1, excluded = [], [], []
    idx = np.arange(len(labels))
    for q in idx:
        others = idx[idx != q]
        rel = labels[others] == labels[q]
        if not rel.any():
            excluded.append(int(q))
            continue
        order = np.argsort(-sim[q, others], kind="stable")
        ranked = rel[order]
        aps.append(average_precision(ranked))
        hits1.append(bool(ranked[0]))
    if not aps:
        raise ValueError("no query has a same-class sample in the gallery")
    return RetrievalResult(float(np.mean(aps)), float(np.mean(hits1)), aps, excluded)
