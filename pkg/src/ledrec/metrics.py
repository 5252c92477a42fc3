"""Top-k ranking metrics and the banner click-rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def top_k(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Indices of the ``k`` highest scores, ties broken by lower index."""
    scores = np.asarray(scores)
    if exclude is not None and len(exclude):
        scores = scores.astype(np.float64, copy=True)
        scores[np.asarray(exclude, dtype=np.int64)] = -np.inf
    n = len(scores)
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    kth = np.partition(scores, n - k)[n - k]
    cand = np.flatnonzero(scores >= kth)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]].astype(np.int64)


def _ranked(topk) -> np.ndarray:
    items = getattr(topk, "items", topk)
    return np.asarray(items, dtype=np.int64)


def recall_at_k(topk, targets, k: int, normalized: bool = True) -> float:
    """
    Hits in the first ``k`` recommendations over ``min(k, |targets|)``.

    With ``normalized=False`` the denominator is ``|targets|``.
    """
    targets = set(np.asarray(list(targets), dtype=np.int64).tolist())
    if not targets:
        raise ValueError("targets must be non-empty")
    hits = sum(1 for i in _ranked(topk)[:k].tolist() if i in targets)
    denom = min(k, len(targets)) if normalized else len(targets)
    return hits / denom


def ndcg_at_k(topk, targets, k: int) -> float:
    """Binary-gain NDCG with ``1 / log2(1 + rank)`` discounts."""
    targets = set(np.asarray(list(targets), dtype=np.int64).tolist())
    if not targets:
        raise ValueError("targets must be non-empty")
    ranked = _ranked(topk)[:k]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    hits = np.array([i in targets for i in ranked.tolist()], dtype=bool)
    dcg = float(discounts[: len(ranked)][hits].sum())
    idcg = float(discounts[: min(k, len(targets))].sum())
    return dcg / idcg


@dataclass(frozen=True)
class BannerSample:
    """Candidate items of one banner, their model scores, and which one was clicked."""

    candidates: np.ndarray
    scores: np.ndarray
    positive: int

    def __post_init__(self):
        if len(self.candidates) < 2 or len(self.scores) != len(self.candidates):
            raise ValueError("a banner needs at least two scored candidates")
        if self.positive not in set(np.asarray(self.candidates).tolist()):
            raise ValueError("clicked item is not among the candidates")


def click_rank(b: BannerSample, rng: np.random.Generator | None = None) -> float:
    """
    Normalized rank of the clicked item: 0 when it scores highest, 0.5 on average
    for a random scorer.

    Candidates scoring strictly higher count fully; candidates tied with the
    positive are placed in a random (seeded) order.
    """
    cands = np.asarray(b.candidates)
    scores = np.asarray(b.scores, dtype=np.float64)
    at = int(np.flatnonzero(cands == b.positive)[0])
    s = scores[at]
    higher = int(np.sum(scores > s))
    ties = int(np.sum(scores == s)) - 1
    if ties:
        rng = rng if rng is not None else np.random.default_rng(0)
        # position of the positive in a uniform shuffle of the tied group
        higher += int(rng.integers(0, ties + 1))
    return higher / (len(cands) - 1)
