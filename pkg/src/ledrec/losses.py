"""
Sampled training objectives and uniform negative sampling.

Every sampled loss takes the scores of one user's positives (one or more)
and of ``N`` negatives shared by all of them.  Losses are averaged over the
positives; gradients are with respect to the scores.  All computations use
log-sigmoid / log-sum-exp forms and never exponentiate a raw score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax


@dataclass(frozen=True)
class LossValue:
    loss: float
    grad_pos: np.ndarray
    grad_negs: np.ndarray


@dataclass(frozen=True)
class DenseLossValue:
    loss: float
    grad: np.ndarray


def _softplus(x):
    return np.logaddexp(0.0, x)


def _shifted_exp(x):
    """``exp(x - max x)`` and ``max x``; cheaper than scipy's helpers on short vectors."""
    m = x.max()
    return np.exp(x - m), m


def _prep(s_pos, s_negs):
    s_pos = np.atleast_1d(np.asarray(s_pos, dtype=np.float64))
    s_negs = np.atleast_1d(np.asarray(s_negs, dtype=np.float64))
    if len(s_negs) == 0:
        raise ValueError("need at least one negative")
    return s_pos, s_negs


def bpr(s_pos, s_negs, margin: float = 0.0) -> LossValue:
    """``-mean_n log sigmoid(s_pos - s_neg - margin)``, averaged over positives."""
    s_pos, s_negs = _prep(s_pos, s_negs)
    diff = s_pos[:, None] - s_negs[None, :] - margin
    n_pos, n_neg = diff.shape
    loss = _softplus(-diff).mean()
    w = expit(-diff) / (n_pos * n_neg)
    return LossValue(float(loss), -w.sum(axis=1), w.sum(axis=0))


def negative_sampling(s_pos, s_negs) -> LossValue:
    """``-[log sigmoid(s_pos) + sum_n log(1 - sigmoid(s_neg))]``, averaged over positives."""
    s_pos, s_negs = _prep(s_pos, s_negs)
    n_pos = len(s_pos)
    loss = _softplus(-s_pos).mean() + _softplus(s_negs).sum()
    return LossValue(float(loss), -expit(-s_pos) / n_pos, expit(s_negs))


def css_multinomial(s_pos, s_negs, n_items: int) -> LossValue:
    """
    Softmax cross-entropy with a sampled partition function.

    For each positive ``Z = exp(s_pos) + (I - 1) / N * sum_n exp(s_neg)``;
    the loss is ``log Z - s_pos``.
    """
    if n_items < 2:
        raise ValueError("need at least two items")
    s_pos, s_negs = _prep(s_pos, s_negs)
    log_w = np.log(n_items - 1) - np.log(len(s_negs))
    e, m = _shifted_exp(s_negs)
    total = e.sum()
    neg_mass = m + np.log(total) + log_w
    # log Z - s_pos == softplus(neg_mass - s_pos)
    gap = neg_mass - s_pos
    loss = _softplus(gap).mean()
    g = expit(gap) / len(s_pos)
    return LossValue(float(loss), -g, g.sum() * (e / total))


def exact_multinomial(scores_all, pos) -> DenseLossValue:
    """Full-softmax cross-entropy, averaged over the positive indices ``pos``."""
    s = np.asarray(scores_all, dtype=np.float64)
    pos = np.atleast_1d(np.asarray(pos, dtype=np.int64))
    lse = logsumexp(s)
    loss = float(np.mean(lse - s[pos]))
    grad = softmax(s)
    np.subtract.at(grad, pos, 1.0 / len(pos))
    return DenseLossValue(loss, grad)


SAMPLED_LOSSES = {
    "bpr": lambda sp, sn, n_items: bpr(sp, sn),
    "ns": lambda sp, sn, n_items: negative_sampling(sp, sn),
    "css": css_multinomial,
}


def sample_negatives(n_items: int, n: int, exclude, rng: np.random.Generator) -> np.ndarray:
    """
    ``n`` distinct items drawn uniformly from the catalog minus ``exclude``.

    Small draws use rejection against a stream of uniform candidates; when
    ``n`` is a sizable share of the eligible items the complement is
    enumerated instead.
    """
    excl = np.unique(np.asarray(exclude, dtype=np.int64).reshape(-1))
    excl = excl[(excl >= 0) & (excl < n_items)]
    available = n_items - len(excl)
    if n < 1 or n > available:
        raise ValueError(f"cannot draw {n} negatives from {available} eligible items")

    if 4 * n > available:
        pool = np.setdiff1d(np.arange(n_items, dtype=np.int64), excl, assume_unique=True)
        return rng.choice(pool, size=n, replace=False)

    out = np.empty(0, dtype=np.int64)
    while len(out) < n:
        need = n - len(out)
        cand = rng.integers(0, n_items, size=need + need // 4 + 8)
        cand = cand[~np.isin(cand, excl, assume_unique=False)]
        merged = np.concatenate([out, cand])
        _, first = np.unique(merged, return_index=True)
        out = merged[np.sort(first)][:n]
    return out
