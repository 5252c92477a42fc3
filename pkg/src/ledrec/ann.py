"""
Maximum-inner-product retrieval: an HNSW graph searched with the raw inner
product, plus the exact brute-force ranking used as its oracle.

Both paths return exact float64 scores and break ties by lower item index,
so at exhaustive search settings they agree item for item.
"""

from __future__ import annotations

import io
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _hnsw
from ._binio import read_array, read_header, read_struct, write_array, write_header, write_struct

_log = logging.getLogger(__name__)

INDEX_MAGIC = b"LEDI"
INDEX_VERSION = 1
_REPAIR_SLACK = 4


@dataclass(frozen=True)
class TopK:
    items: np.ndarray
    scores: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.items)


def _rank(ids: np.ndarray, scores: np.ndarray, k: int) -> TopK:
    order = np.lexsort((ids, -scores))[:k]
    return TopK(ids[order].astype(np.int64), scores[order], False)


def brute_force(items: np.ndarray, query: np.ndarray, k: int) -> TopK:
    """Exact top-``k`` by inner product, ties broken by lower index."""
    items = np.ascontiguousarray(items, dtype=np.float32)
    query = np.ascontiguousarray(query, dtype=np.float32)
    ids = np.arange(items.shape[0], dtype=np.int64)
    top = _rank(ids, _hnsw.exact_scores(items, ids, query), k)
    if k > items.shape[0]:
        top = TopK(top.items, top.scores, True)
    return top


@dataclass(eq=False)
class AnnIndex:
    """Layered proximity graph over item vectors (see :func:`build_index`)."""

    vectors: np.ndarray
    levels: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray
    entry: int
    max_level: int
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 100
    seed: int = 0
    _local: threading.local = field(default_factory=threading.local, repr=False)

    @property
    def n_items(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def _visited(self):
        loc = self._local
        buf = getattr(loc, "buf", None)
        if buf is None or buf.shape[0] != self.n_items:
            buf = loc.buf = np.zeros(self.n_items, dtype=np.uint32)
            loc.tag = 0
        loc.tag += 1
        if loc.tag >= 2**32 - 1:
            buf[:] = 0
            loc.tag = 1
        return buf, np.uint32(loc.tag)

    def search(self, query: np.ndarray, k: int, ef_search: int | None = None) -> TopK:
        """Approximate top-``k``; candidates are re-scored exactly before ranking."""
        if k < 1:
            raise ValueError("k must be >= 1")
        truncated = k > self.n_items
        k = min(k, self.n_items)
        ef = max(ef_search or self.ef_search, k)
        q = np.ascontiguousarray(query, dtype=np.float32)
        if q.shape != (self.dim,):
            raise ValueError(f"query has shape {q.shape}, index expects ({self.dim},)")
        visited, tag = self._visited()
        ids = _hnsw.knn_search(
            q, ef, self.entry, self.max_level, self.vectors, self.neighbors, self.counts, visited, tag
        )
        top = _rank(ids, _hnsw.exact_scores(self.vectors, ids, q), k)
        return TopK(top.items, top.scores, truncated)

    def layer0_connected(self) -> bool:
        return bool(_hnsw.reachable(self.entry, self.neighbors, self.counts, 0).all())

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        n, d = self.vectors.shape
        write_header(fh, INDEX_MAGIC, INDEX_VERSION)
        write_struct(
            fh,
            "QIIIIQqiI",
            n,
            d,
            self.m,
            self.ef_construction,
            self.ef_search,
            self.seed,
            self.entry,
            self.max_level,
            self.neighbors.shape[2],
        )
        write_array(fh, self.vectors, "f4")
        write_array(fh, self.levels, "i4")
        for layer in range(self.max_level + 1):
            counts = self.counts[layer]
            write_struct(fh, "IQ", layer, int(counts.sum()))
            write_array(fh, counts, "u4")
            mask = np.arange(self.neighbors.shape[2])[None, :] < counts[:, None]
            write_array(fh, self.neighbors[layer][mask], "u4")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def read(cls, fh) -> "AnnIndex":
        read_header(fh, INDEX_MAGIC, (INDEX_VERSION,))
        n, d, m, efc, efs, seed, entry, max_level, width = read_struct(fh, "QIIIIQqiI")
        vectors = read_array(fh, "f4", n * d).reshape(n, d)
        levels = read_array(fh, "i4", n).astype(np.int32)
        nbrs = np.zeros((max_level + 1, n, width), dtype=np.int64)
        counts = np.zeros((max_level + 1, n), dtype=np.int64)
        for layer in range(max_level + 1):
            got, total = read_struct(fh, "IQ")
            if got != layer:
                raise ValueError(f"index layers out of order: expected {layer}, got {got}")
            c = read_array(fh, "u4", n).astype(np.int64)
            flat = read_array(fh, "u4", total).astype(np.int64)
            mask = np.arange(width)[None, :] < c[:, None]
            nbrs[layer][mask] = flat
            counts[layer] = c
        return cls(vectors, levels, nbrs, counts, entry, max_level, m, efc, efs, seed)

    @classmethod
    def load(cls, path) -> "AnnIndex":
        with open(path, "rb") as fh:
            return cls.read(fh)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AnnIndex":
        return cls.read(io.BytesIO(raw))


def build_index(
    items: np.ndarray,
    m: int = 16,
    ef_construction: int = 200,
    seed: int = 0,
    ef_search: int = 100,
    keep_pruned: bool = True,
) -> AnnIndex:
    """
    Build the HNSW graph over ``items`` (one row per item), inserting rows in
    order with seeded geometric level assignment.  Layer 0 is made fully
    reachable from the entry point before returning.
    """
    vectors = np.ascontiguousarray(items, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ValueError("need a non-empty 2-d item matrix")
    bad = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
    if len(bad):
        raise ValueError(f"item {int(bad[0])} has a non-finite vector")
    if m < 2:
        raise ValueError("m must be >= 2")
    n = vectors.shape[0]
    rng = np.random.default_rng(seed)
    ml = 1.0 / np.log(m)
    levels = np.minimum(np.floor(-np.log(1.0 - rng.random(n)) * ml), 30).astype(np.int64)
    top = int(levels.max())
    width = 2 * m + _REPAIR_SLACK
    nbrs = np.zeros((top + 1, n, width), dtype=np.int64)
    counts = np.zeros((top + 1, n), dtype=np.int64)
    entry, max_level = _hnsw.build_graph(
        vectors, levels, m, ef_construction, nbrs, counts, keep_pruned
    )
    _repair_layer0(vectors, nbrs, counts, int(entry))
    index = AnnIndex(
        vectors, levels.astype(np.int32), nbrs, counts, int(entry), int(max_level),
        m, ef_construction, ef_search, seed,
    )
    _log.info("built HNSW index: %d items, dim %d, %d layers", n, vectors.shape[1], max_level + 1)
    return index


def _repair_layer0(vectors, nbrs, counts, entry) -> None:
    """Link every node unreachable from the entry point into the reachable part."""
    width = nbrs.shape[2]
    while True:
        seen = _hnsw.reachable(entry, nbrs, counts, 0)
        lost = np.flatnonzero(~seen)
        if len(lost) == 0:
            return
        x = int(lost[0])
        sims = vectors @ vectors[x]
        order = np.argsort(-sims, kind="stable")
        for y in order:
            if seen[y] and counts[0, y] < width:
                nbrs[0, y, counts[0, y]] = x
                counts[0, y] += 1
                break
        else:
            raise RuntimeError("no spare capacity left to connect the graph")
