"""
Synthetic interaction data with planted structure, for tests and smoke runs.

Items belong to topics and have Zipf popularity within them; each user
mixes one or two topics, so co-occurrence and next-item signals are
learnable while popularity alone is a weaker baseline.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .data import EventKind, TimelineSet, build_timeline_set
from .model import LedModel, Mode


def generate_timelines(
    n_users: int = 500,
    n_items: int = 200,
    n_topics: int = 10,
    mean_length: float = 20.0,
    click_rate: float = 0.0,
    zipf: float = 1.1,
    seed: int = 0,
) -> TimelineSet:
    rng = np.random.default_rng(seed)
    topic_of = rng.integers(0, n_topics, size=n_items)
    members = [np.flatnonzero(topic_of == t) for t in range(n_topics)]
    members = [m if len(m) else np.array([rng.integers(n_items)]) for m in members]
    weights = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** zipf
        weights.append(w / w.sum())

    users, items, kinds, stamps = [], [], [], []
    for u in range(n_users):
        n = max(2, int(rng.poisson(mean_length)))
        topics = rng.choice(n_topics, size=1 + int(rng.random() < 0.5), replace=False)
        pick = rng.choice(topics, size=n)
        for t, topic in enumerate(pick):
            items.append(int(rng.choice(members[topic], p=weights[topic])))
            users.append(f"u{u}")
            kinds.append(int(EventKind.CLICK if rng.random() < click_rate else EventKind.VIEW))
            stamps.append(1_000_000 + 60 * t)
    return build_timeline_set(
        np.array(users),
        np.array([f"i{i}" for i in items]),
        np.array(kinds, dtype=np.uint8),
        np.array(stamps, dtype=np.int64),
    )


def write_ratings_csv(ts: TimelineSet, path, rating: float = 5.0) -> None:
    """Write ``ts`` in the MovieLens ``ratings.csv`` layout (numeric ids required)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        for u, tl in enumerate(ts):
            uid = ts.users[u].lstrip("u")
            for ev in tl.events:
                w.writerow([uid, ts.vocab.ids[ev.item].lstrip("i"), rating, ev.timestamp])


def write_jsonl(ts: TimelineSet, path) -> None:
    with open(path, "w") as fh:
        for u, tl in enumerate(ts):
            for ev in tl.events:
                rec = {
                    "user": ts.users[u],
                    "item": ts.vocab.ids[ev.item],
                    "kind": EventKind(ev.kind).name.lower(),
                    "ts": int(ev.timestamp),
                }
                fh.write(json.dumps(rec) + "\n")


def random_model(
    n_items: int,
    dim: int,
    seed: int = 0,
    n_clusters: int = 64,
    mode: Mode = Mode.FULL,
) -> LedModel:
    """
    A model with clustered embeddings and spread biases, shaped like a
    trained one (used where only the serving path matters).
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim)) / np.sqrt(dim)
    assign = rng.integers(0, n_clusters, size=n_items)
    emb = centers[assign] + 0.3 * rng.standard_normal((n_items, dim)) / np.sqrt(dim)
    biases = rng.normal(0.0, 0.5, size=n_items)
    emb = emb.astype(np.float32)
    biases = biases.astype(np.float32)
    if mode == Mode.PROJECT:
        p = (np.eye(dim) + 0.05 * rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(np.float32)
        return LedModel(emb, biases, Mode.PROJECT, p)
    return LedModel(emb, biases)
