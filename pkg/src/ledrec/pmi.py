"""
Item-item pointwise mutual information from timeline co-occurrences.

Two items co-occur when they appear in the same user timeline, whatever the
distance between them.  The context marginal can be flattened with an
exponent below one, which lifts rare context items.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._binio import read_array, read_header, read_struct, write_array, write_header, write_struct
from .data import EventKind, TimelineSet

_log = logging.getLogger(__name__)

PMI_MAGIC = b"LEDP"
PMI_VERSION = 1


@dataclass(frozen=True, eq=False)
class CooccurrenceStats:
    """
    Timeline co-occurrence counts.

    ``pairs`` is the strict upper triangle (``i < j``) of the symmetric pair
    count matrix; ``item_counts[i]`` is the number of timelines containing
    ``i``; ``total_pairs`` is the number of pair increments.
    """

    pairs: sp.csr_matrix
    item_counts: np.ndarray
    total_pairs: int

    @property
    def n_items(self) -> int:
        return len(self.item_counts)

    @property
    def total_items(self) -> int:
        return int(self.item_counts.sum())

    def count(self, i: int, j: int) -> int:
        if i == j:
            return 0
        a, b = min(i, j), max(i, j)
        return int(self.pairs[a, b])

    def merge(self, other: "CooccurrenceStats") -> "CooccurrenceStats":
        """Add counts from another shard over the same vocabulary."""
        if other.n_items != self.n_items:
            raise ValueError("cannot merge statistics over different vocabularies")
        return CooccurrenceStats(
            (self.pairs + other.pairs).tocsr(),
            self.item_counts + other.item_counts,
            self.total_pairs + other.total_pairs,
        )


def count_cooccurrences(
    ts: TimelineSet,
    kinds=(EventKind.VIEW,),
    max_pairs_per_timeline: int = 10_000,
    seed: int = 0,
) -> CooccurrenceStats:
    """
    Count unordered co-occurring pairs of distinct items per timeline.

    Items are deduplicated within a timeline first.  A timeline with more than
    ``max_pairs_per_timeline`` pairs contributes a uniform sample (without
    replacement) of that many pairs.
    """
    n_items = ts.n_items
    keep = np.isin(ts.kinds, np.asarray([int(k) for k in kinds], dtype=ts.kinds.dtype))
    rows = np.repeat(np.arange(len(ts)), ts.lengths())[keep]
    X = sp.csr_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, ts.items[keep])),
        shape=(len(ts), n_items),
    )
    X.sum_duplicates()
    X.data[:] = 1

    item_counts = np.asarray(X.sum(axis=0)).ravel().astype(np.int64)
    n_u = np.diff(X.indptr).astype(np.int64)
    pairs_u = n_u * (n_u - 1) // 2
    heavy = pairs_u > max_pairs_per_timeline

    light = X[~heavy]
    full = (light.T @ light).tocsr()
    full.setdiag(0)
    full.eliminate_zeros()
    upper = sp.triu(full, k=1, format="csr")

    if heavy.any():
        rng = np.random.default_rng(seed)
        hi, hj = [], []
        for u in np.flatnonzero(heavy):
            items = X.indices[X.indptr[u] : X.indptr[u + 1]]
            a, b = _sample_pairs(len(items), max_pairs_per_timeline, rng)
            hi.append(items[a])
            hj.append(items[b])
        hi = np.concatenate(hi)
        hj = np.concatenate(hj)
        lo, up = np.minimum(hi, hj), np.maximum(hi, hj)
        sampled = sp.csr_matrix(
            (np.ones(len(lo), dtype=np.int64), (lo, up)), shape=(n_items, n_items)
        )
        upper = (upper + sampled).tocsr()
        _log.info("subsampled pairs for %d heavy timelines", int(heavy.sum()))

    total = int(np.minimum(pairs_u, max_pairs_per_timeline).sum())
    upper.sort_indices()
    return CooccurrenceStats(upper.astype(np.int64), item_counts, total)


def _sample_pairs(n: int, k: int, rng: np.random.Generator):
    """Uniformly sample ``k`` distinct pairs ``(a, b)``, ``a < b < n``."""
    m = n * (n - 1) // 2
    lin = np.sort(rng.choice(m, size=k, replace=False))
    # first linear index of each row a: a*n - a*(a+1)/2
    a_idx = np.arange(n - 1, dtype=np.int64)
    row_start = a_idx * n - a_idx * (a_idx + 1) // 2
    a = np.searchsorted(row_start, lin, side="right") - 1
    b = lin - row_start[a] + a + 1
    return a, b


@dataclass(frozen=True, eq=False)
class PmiMatrix:
    """Sparse PMI matrix in CSR layout (row = item, column = context item)."""

    matrix: sp.csr_matrix
    alpha: float

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        m = self.matrix
        write_header(fh, PMI_MAGIC, PMI_VERSION)
        write_struct(fh, "QQd", m.shape[0], m.nnz, self.alpha)
        write_array(fh, m.indptr, "u8")
        write_array(fh, m.indices, "u4")
        write_array(fh, m.data, "f4")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def load(cls, path) -> "PmiMatrix":
        with open(path, "rb") as fh:
            read_header(fh, PMI_MAGIC, (PMI_VERSION,))
            n, nnz, alpha = read_struct(fh, "QQd")
            indptr = read_array(fh, "u8", n + 1).astype(np.int64)
            indices = read_array(fh, "u4", nnz).astype(np.int32)
            data = read_array(fh, "f4", nnz).astype(np.float64)
        return cls(sp.csr_matrix((data, indices, indptr), shape=(n, n)), alpha)


def build_pmi(stats: CooccurrenceStats, alpha: float = 0.75, min_count: int = 1) -> PmiMatrix:
    """
    PMI of every observed pair: ``log p(i,j) / (p(i) * p_alpha(j))``.

    ``p(i,j) = c(i,j) / C`` and ``p(i) = c(i) / sum_k c(k)``; the context
    marginal is smoothed, ``p_alpha(j) = c(j)**alpha / sum_k c(k)**alpha``.
    Both orientations of each pair are stored, each with its own context
    marginal.  Unobserved pairs are absent (implicit zero); negative values
    are kept.
    """
    if stats.total_pairs <= 0 or stats.total_items <= 0:
        raise ValueError("co-occurrence statistics are empty; cannot build PMI")
    up = stats.pairs.tocoo()
    mask = up.data >= min_count
    i, j, c = up.row[mask], up.col[mask], up.data[mask].astype(np.float64)
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    counts = np.concatenate([c, c])

    item_counts = stats.item_counts.astype(np.float64)
    log_p_row = np.log(item_counts[rows]) - np.log(item_counts.sum())
    smoothed = item_counts**alpha
    log_p_ctx = alpha * np.log(item_counts[cols]) - np.log(smoothed.sum())
    values = np.log(counts) - np.log(float(stats.total_pairs)) - log_p_row - log_p_ctx

    n = stats.n_items
    m = sp.csr_matrix((values, (rows, cols)), shape=(n, n))
    m.sort_indices()
    _log.info("PMI matrix: %d items, %d non-zeros (alpha=%.2f)", n, m.nnz, alpha)
    return PmiMatrix(m, float(alpha))
