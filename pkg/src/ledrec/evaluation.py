"""
Offline evaluation: recall@k, NDCG@k and click-rank over held-out users,
the popularity (GBO) baseline, and the negative-count sweep.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ann import AnnIndex, TopK, brute_force
from .data import TimelineSet, TimelineSplit, Vocabulary, has_clicks, holdout_splits
from .losses import sample_negatives
from .metrics import BannerSample, click_rank, ndcg_at_k, recall_at_k, top_k
from .model import LedModel, augment_for_mips, encode_user

_log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    recall_20: float
    recall_50: float
    ndcg_100: float
    click_rank: float
    users: int
    stderr: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value", "stderr"])
            for name in ("recall_20", "recall_50", "ndcg_100", "click_rank"):
                w.writerow([name, getattr(self, name), self.stderr.get(name, "")])
            w.writerow(["users", self.users, ""])


def gbo_baseline(vocab: Vocabulary, k: int) -> TopK:
    """Most viewed items first, ties by lower index."""
    counts = np.asarray(vocab.view_counts, dtype=np.float64)
    items = top_k(counts, k)
    return TopK(items, counts[items], k > len(counts))


def _stderr(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


def _report(rows: dict[str, list[float]]) -> EvalReport:
    arr = {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}
    means = {k: float(v.mean()) if len(v) else float("nan") for k, v in arr.items()}
    return EvalReport(
        means["recall_20"],
        means["recall_50"],
        means["ndcg_100"],
        means["click_rank"],
        len(arr["recall_20"]),
        {k: _stderr(v) for k, v in arr.items()},
    )


def _evaluate(
    rank: Callable[[TimelineSplit, int], np.ndarray],
    banner_scores: Callable[[TimelineSplit, np.ndarray], np.ndarray],
    splits: Sequence[TimelineSplit],
    n_items: int,
    banner_size: int,
    normalized: bool,
    seed: int,
) -> EvalReport:
    rng = np.random.default_rng(seed)
    rows: dict[str, list[float]] = {"recall_20": [], "recall_50": [], "ndcg_100": [], "click_rank": []}
    for split in splits:
        targets = np.unique(split.target)
        ranked = rank(split, 100)
        rows["recall_20"].append(recall_at_k(ranked, targets, 20, normalized))
        rows["recall_50"].append(recall_at_k(ranked, targets, 50, normalized))
        rows["ndcg_100"].append(ndcg_at_k(ranked, targets, 100))
        seen = np.union1d(targets, split.input)
        n_neg = min(banner_size - 1, n_items - len(seen))
        if n_neg < 1:
            continue
        ranks = []
        for pos in targets:
            cands = np.concatenate([[pos], sample_negatives(n_items, n_neg, seen, rng)])
            banner = BannerSample(cands, banner_scores(split, cands), int(pos))
            ranks.append(click_rank(banner, rng))
        rows["click_rank"].append(float(np.mean(ranks)))
    return _report(rows)


def evaluate(
    model: LedModel,
    splits: Sequence[TimelineSplit],
    retrieval: str = "dense",
    index: AnnIndex | None = None,
    ef_search: int | None = None,
    banner_size: int = 10,
    exclude_input: bool = True,
    normalized: bool = True,
    seed: int = 0,
) -> EvalReport:
    """
    Metrics of ``model`` on fixed input/target splits.

    ``retrieval`` selects how the top 100 are found: ``"dense"`` scores the
    whole catalog, ``"brute"`` / ``"ann"`` go through the bias-augmented
    exact or HNSW search.  Input items are removed from the ranking when
    ``exclude_input`` is set.
    """
    eff, b = model.effective, model.biases
    items_aug, query = augment_for_mips(model)
    if retrieval == "ann" and index is None:
        raise ValueError("ann retrieval needs an index")
    cache: dict[int, np.ndarray] = {}

    def user_vec(split):
        key = id(split)
        if key not in cache:
            cache.clear()
            cache[key] = encode_user(split.input, model)
        return cache[key]

    def rank(split, k):
        u = user_vec(split)
        excl = np.unique(split.input) if exclude_input else np.zeros(0, dtype=np.int64)
        if retrieval == "dense":
            return top_k(eff @ u + b, k, excl)
        want = min(k + len(excl), model.n_items)
        q = query(u)
        if retrieval == "brute":
            top = brute_force(items_aug, q, want)
        else:
            top = index.search(q, want, ef_search)
        keep = ~np.isin(top.items, excl)
        return top.items[keep][:k]

    def banner(split, cands):
        return eff[cands] @ user_vec(split) + b[cands]

    return _evaluate(rank, banner, splits, model.n_items, banner_size, normalized, seed)


def evaluate_popularity(
    vocab: Vocabulary,
    splits: Sequence[TimelineSplit],
    banner_size: int = 10,
    exclude_input: bool = True,
    normalized: bool = True,
    seed: int = 0,
) -> EvalReport:
    """The same metrics for the non-personalized most-viewed ranking."""
    counts = np.asarray(vocab.view_counts, dtype=np.float64)

    def rank(split, k):
        return top_k(counts, k, np.unique(split.input) if exclude_input else None)

    def banner(split, cands):
        return counts[cands]

    return _evaluate(rank, banner, splits, len(vocab), banner_size, normalized, seed)


@dataclass
class SweepRow:
    negatives: int
    recall_20: float
    recall_50: float
    drop_20: float
    drop_50: float


def sweep_negatives(
    cfg_template,
    n_values: Sequence[int],
    data,
    base=None,
    eval_seed: int = 0,
) -> tuple[list[SweepRow], EvalReport]:
    """
    Train once with the exact softmax, then once per negative count with the
    template's sampled loss; report test recall and relative drop
    ``(exact - sampled) / exact``.
    """
    from .trainer import train

    train_set, validation, test = data
    click = cfg_template.click_targets
    if click is None:
        click = has_clicks(train_set)
    _, splits, _ = holdout_splits(test, cfg_template.input_fraction, eval_seed, click)
    exclude = not click

    ref_cfg = replace(cfg_template, loss="multinomial")
    ref = evaluate(train(train_set, validation, base, ref_cfg).model, splits, exclude_input=exclude)
    _log.info("multinomial reference: recall@20 %.4f recall@50 %.4f", ref.recall_20, ref.recall_50)
    rows = []
    for n in n_values:
        cfg = replace(cfg_template, negatives=int(n))
        if cfg.loss == "multinomial":
            cfg = replace(cfg, loss="bpr")
        rep = evaluate(train(train_set, validation, base, cfg).model, splits, exclude_input=exclude)
        rows.append(
            SweepRow(
                int(n),
                rep.recall_20,
                rep.recall_50,
                (ref.recall_20 - rep.recall_20) / ref.recall_20,
                (ref.recall_50 - rep.recall_50) / ref.recall_50,
            )
        )
        _log.info("N=%d: recall@50 %.4f (drop %.2f%%)", n, rep.recall_50, 100 * rows[-1].drop_50)
    return rows, ref


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["negatives", "recall_20", "recall_50", "drop_20", "drop_50"])
        for r in rows:
            w.writerow([r.negatives, r.recall_20, r.recall_50, r.drop_20, r.drop_50])


def evaluate_timelines(model: LedModel, ts: TimelineSet, input_fraction=0.8, seed=0, **kw) -> EvalReport:
    """Convenience wrapper: fixed held-out splits of ``ts`` then :func:`evaluate`."""
    _, splits, _ = holdout_splits(ts, input_fraction, seed)
    return evaluate(model, splits, **kw)
