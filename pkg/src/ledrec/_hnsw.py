"""
Numba kernels for an inner-product HNSW graph.

Graph layout: ``nbrs[l, i, :counts[l, i]]`` are the out-neighbors of node
``i`` on layer ``l``.  Similarity is the raw inner product (larger is
closer).  Navigation uses float32 dot products; final candidates are
re-scored with :func:`exact_scores`.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, nogil=True)
def _dot(a, b):
    s = np.float32(0.0)
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True, nogil=True)
def exact_scores(vectors, ids, q):
    """Float64 inner products with a fixed summation order (four interleaved partial sums)."""
    out = np.empty(ids.shape[0], dtype=np.float64)
    d = vectors.shape[1]
    tail = d - d % 4
    for j in range(ids.shape[0]):
        row = vectors[ids[j]]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        for i in range(0, tail, 4):
            s0 += np.float64(row[i]) * np.float64(q[i])
            s1 += np.float64(row[i + 1]) * np.float64(q[i + 1])
            s2 += np.float64(row[i + 2]) * np.float64(q[i + 2])
            s3 += np.float64(row[i + 3]) * np.float64(q[i + 3])
        for i in range(tail, d):
            s0 += np.float64(row[i]) * np.float64(q[i])
        out[j] = (s0 + s1) + (s2 + s3)
    return out


# binary min-heap over (key, value) pairs stored in two arrays


@njit(cache=True, nogil=True)
def _push(keys, vals, size, key, val):
    if size == keys.shape[0]:
        nk = np.empty(keys.shape[0] * 2, dtype=keys.dtype)
        nv = np.empty(vals.shape[0] * 2, dtype=vals.dtype)
        nk[:size] = keys[:size]
        nv[:size] = vals[:size]
        keys, vals = nk, nv
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] <= keys[i]:
            break
        keys[p], keys[i] = keys[i], keys[p]
        vals[p], vals[i] = vals[i], vals[p]
        i = p
    return keys, vals, size + 1


@njit(cache=True, nogil=True)
def _pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        c = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            c = left + 1
        if keys[i] <= keys[c]:
            break
        keys[c], keys[i] = keys[i], keys[c]
        vals[c], vals[i] = vals[i], vals[c]
        i = c
    return key, val, size


@njit(cache=True, nogil=True)
def search_layer(q, entries, ef, layer, vectors, nbrs, counts, visited, tag):
    """
    Best-first search on one layer.

    Returns ``(sims, ids, size)``: the up-to-``ef`` most similar nodes found,
    as an unordered min-heap on similarity.
    """
    cap = max(16, 2 * ef)
    cand_k = np.empty(cap, dtype=np.float32)
    cand_v = np.empty(cap, dtype=np.int64)
    res_k = np.empty(ef + 1, dtype=np.float32)
    res_v = np.empty(ef + 1, dtype=np.int64)
    n_cand = 0
    n_res = 0
    for j in range(entries.shape[0]):
        e = entries[j]
        if visited[e] == tag:
            continue
        visited[e] = tag
        s = _dot(q, vectors[e])
        cand_k, cand_v, n_cand = _push(cand_k, cand_v, n_cand, -s, e)
        res_k, res_v, n_res = _push(res_k, res_v, n_res, s, e)
        if n_res > ef:
            _, _, n_res = _pop(res_k, res_v, n_res)

    while n_cand > 0:
        neg, c, n_cand = _pop(cand_k, cand_v, n_cand)
        if n_res >= ef and -neg < res_k[0]:
            break
        for j in range(counts[layer, c]):
            e = nbrs[layer, c, j]
            if visited[e] == tag:
                continue
            visited[e] = tag
            s = _dot(q, vectors[e])
            if n_res < ef or s > res_k[0]:
                cand_k, cand_v, n_cand = _push(cand_k, cand_v, n_cand, -s, e)
                res_k, res_v, n_res = _push(res_k, res_v, n_res, s, e)
                if n_res > ef:
                    _, _, n_res = _pop(res_k, res_v, n_res)
    return res_k, res_v, n_res


@njit(cache=True, nogil=True)
def _select(base_vec, cand_sims, cand_ids, m, vectors, keep_pruned):
    """
    Neighbor-diversity heuristic: keep a candidate only if no already kept
    neighbor is more similar to it than the base node is.  With
    ``keep_pruned`` the remaining slots are filled with the best rejects.
    """
    order = np.argsort(-cand_sims, kind="mergesort")
    out = np.empty(m, dtype=np.int64)
    rejected = np.empty(order.shape[0], dtype=np.int64)
    n_out = 0
    n_rej = 0
    for oi in range(order.shape[0]):
        if n_out >= m:
            break
        c = cand_ids[order[oi]]
        s_base = cand_sims[order[oi]]
        good = True
        for r in range(n_out):
            if _dot(vectors[c], vectors[out[r]]) > s_base:
                good = False
                break
        if good:
            out[n_out] = c
            n_out += 1
        else:
            rejected[n_rej] = c
            n_rej += 1
    if keep_pruned:
        for r in range(n_rej):
            if n_out >= m:
                break
            out[n_out] = rejected[r]
            n_out += 1
    return out[:n_out]


@njit(cache=True, nogil=True)
def _greedy(q, ep, layer, vectors, nbrs, counts):
    best = ep
    best_s = _dot(q, vectors[ep])
    changed = True
    while changed:
        changed = False
        for j in range(counts[layer, best]):
            e = nbrs[layer, best, j]
            s = _dot(q, vectors[e])
            if s > best_s:
                best_s = s
                best = e
                changed = True
    return best


@njit(cache=True)
def build_graph(vectors, levels, m, ef_construction, nbrs, counts, keep_pruned):
    """Insert nodes ``0..n-1`` in order; returns ``(entry, max_level)``."""
    n = vectors.shape[0]
    cap0 = 2 * m
    visited = np.zeros(n, dtype=np.uint32)
    tag = np.uint32(0)
    entry = 0
    max_level = levels[0]
    for q in range(1, n):
        qv = vectors[q]
        lq = levels[q]
        ep = entry
        for layer in range(max_level, lq, -1):
            ep = _greedy(qv, ep, layer, vectors, nbrs, counts)
        eps = np.empty(1, dtype=np.int64)
        eps[0] = ep
        for layer in range(min(lq, max_level), -1, -1):
            tag += np.uint32(1)
            sims, ids, size = search_layer(
                qv, eps, ef_construction, layer, vectors, nbrs, counts, visited, tag
            )
            sel = _select(qv, sims[:size], ids[:size], m, vectors, keep_pruned)
            for j in range(sel.shape[0]):
                nbrs[layer, q, j] = sel[j]
            counts[layer, q] = sel.shape[0]
            cap = cap0 if layer == 0 else m
            for j in range(sel.shape[0]):
                e = sel[j]
                c = counts[layer, e]
                if c < cap:
                    nbrs[layer, e, c] = q
                    counts[layer, e] = c + 1
                else:
                    pool = np.empty(c + 1, dtype=np.int64)
                    psim = np.empty(c + 1, dtype=np.float32)
                    for t in range(c):
                        pool[t] = nbrs[layer, e, t]
                        psim[t] = _dot(vectors[e], vectors[pool[t]])
                    pool[c] = q
                    psim[c] = _dot(vectors[e], qv)
                    kept = _select(vectors[e], psim, pool, cap, vectors, keep_pruned)
                    for t in range(kept.shape[0]):
                        nbrs[layer, e, t] = kept[t]
                    counts[layer, e] = kept.shape[0]
            eps = ids[:size].copy()
        if lq > max_level:
            max_level = lq
            entry = q
    return entry, max_level


@njit(cache=True, nogil=True)
def knn_search(q, ef, entry, max_level, vectors, nbrs, counts, visited, tag):
    ep = entry
    for layer in range(max_level, 0, -1):
        ep = _greedy(q, ep, layer, vectors, nbrs, counts)
    eps = np.empty(1, dtype=np.int64)
    eps[0] = ep
    sims, ids, size = search_layer(q, eps, ef, 0, vectors, nbrs, counts, visited, tag)
    return ids[:size].copy()


@njit(cache=True)
def reachable(entry, nbrs, counts, layer):
    n = nbrs.shape[1]
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    top = 0
    stack[0] = entry
    top = 1
    seen[entry] = True
    while top > 0:
        top -= 1
        c = stack[top]
        for j in range(counts[layer, c]):
            e = nbrs[layer, c, j]
            if not seen[e]:
                seen[e] = True
                stack[top] = e
                top += 1
    return seen
