"""
Event ingestion, item vocabulary, and user / timeline splitting.

Timelines are stored column-wise (one flat array per field plus per-user
offsets) so that an ML20M-sized corpus fits comfortably in memory; the
:class:`Timeline` and :class:`Event` objects are light views built on access.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

from ._binio import (
    read_array,
    read_header,
    read_strings,
    read_struct,
    write_array,
    write_header,
    write_strings,
    write_struct,
)

_log = logging.getLogger(__name__)

TIMELINE_MAGIC = b"LEDT"
TIMELINE_VERSION = 1


class ParseError(ValueError):
    """Malformed input record; the message names the offending line."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyDatasetError(ValueError):
    pass


class EventKind(IntEnum):
    VIEW = 0
    CLICK = 1

    @classmethod
    def parse(cls, name: str) -> "EventKind":
        return cls[name.upper()]


@dataclass(frozen=True)
class Event:
    item: int
    kind: EventKind
    timestamp: int


@dataclass(frozen=True, eq=False)
class Timeline:
    user: str
    items: np.ndarray
    kinds: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    @property
    def events(self) -> list[Event]:
        return [
            Event(int(i), EventKind(int(k)), int(t))
            for i, k, t in zip(self.items, self.kinds, self.timestamps)
        ]


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Bijection between external item ids and dense indices, plus popularity counts."""

    ids: tuple[str, ...]
    view_counts: np.ndarray
    click_counts: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {x: i for i, x in enumerate(self.ids)})
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate item ids in vocabulary")

    def __len__(self) -> int:
        return len(self.ids)

    def lookup(self, item_id: str) -> int | None:
        return self.index.get(item_id)

    def to_json(self) -> dict:
        return {
            "ids": list(self.ids),
            "view_counts": self.view_counts.tolist(),
            "click_counts": self.click_counts.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(
            tuple(obj["ids"]),
            np.asarray(obj["view_counts"], dtype=np.int64),
            np.asarray(obj["click_counts"], dtype=np.int64),
        )


@dataclass(frozen=True, eq=False)
class TimelineSet:
    """
    Per-user event sequences over a shared vocabulary.

    Events of user ``u`` live in ``items[offsets[u]:offsets[u+1]]`` (and the
    matching slices of ``kinds`` / ``timestamps``), sorted by timestamp with
    ties kept in input order.
    """

    users: tuple[str, ...]
    offsets: np.ndarray
    items: np.ndarray
    kinds: np.ndarray
    timestamps: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        if len(self.offsets) != len(self.users) + 1:
            raise ValueError("offsets must have one entry per user plus one")
        if len(self.items) and int(self.items.max()) >= len(self.vocab):
            raise ValueError("item index outside vocabulary")
        if len(self.timestamps) and int(self.timestamps.min()) < 0:
            raise ValueError("negative timestamp")

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Timeline]:
        for u in range(len(self.users)):
            yield self.timeline(u)

    @property
    def n_items(self) -> int:
        return len(self.vocab)

    @property
    def n_events(self) -> int:
        return len(self.items)

    def timeline(self, u: int) -> Timeline:
        a, b = self.offsets[u], self.offsets[u + 1]
        return Timeline(self.users[u], self.items[a:b], self.kinds[a:b], self.timestamps[a:b])

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def stats(self) -> dict:
        return {"users": len(self.users), "items": self.n_items, "events": self.n_events}

    def subset(self, user_indices) -> "TimelineSet":
        """Timelines of the given users, same item indexing, counts recomputed."""
        user_indices = np.asarray(user_indices, dtype=np.int64)
        lens = self.lengths()[user_indices]
        offsets = np.zeros(len(user_indices) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        if len(user_indices):
            sel = np.concatenate(
                [np.arange(self.offsets[u], self.offsets[u + 1]) for u in user_indices]
            ).astype(np.int64)
        else:
            sel = np.zeros(0, dtype=np.int64)
        items, kinds = self.items[sel], self.kinds[sel]
        vocab = Vocabulary(self.vocab.ids, *_count_kinds(items, kinds, self.n_items))
        return TimelineSet(
            tuple(self.users[u] for u in user_indices),
            offsets,
            items,
            kinds,
            self.timestamps[sel],
            vocab,
        )

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        write_header(fh, TIMELINE_MAGIC, TIMELINE_VERSION)
        write_struct(fh, "QQQ", len(self.users), self.n_items, self.n_events)
        write_strings(fh, self.vocab.ids)
        write_array(fh, self.vocab.view_counts, "u8")
        write_array(fh, self.vocab.click_counts, "u8")
        write_strings(fh, self.users)
        write_array(fh, self.offsets, "u8")
        write_array(fh, self.items, "u4")
        write_array(fh, self.kinds, "u1")
        write_array(fh, _delta_encode(self.timestamps, self.offsets), "i8")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def read(cls, fh) -> "TimelineSet":
        read_header(fh, TIMELINE_MAGIC, (TIMELINE_VERSION,))
        n_users, n_items, n_events = read_struct(fh, "QQQ")
        ids = read_strings(fh, n_items)
        views = read_array(fh, "u8", n_items).astype(np.int64)
        clicks = read_array(fh, "u8", n_items).astype(np.int64)
        users = read_strings(fh, n_users)
        offsets = read_array(fh, "u8", n_users + 1).astype(np.int64)
        items = read_array(fh, "u4", n_events).astype(np.int32)
        kinds = read_array(fh, "u1", n_events).astype(np.uint8)
        ts = _delta_decode(read_array(fh, "i8", n_events), offsets)
        return cls(tuple(users), offsets, items, kinds, ts, Vocabulary(tuple(ids), views, clicks))

    @classmethod
    def load(cls, path) -> "TimelineSet":
        with open(path, "rb") as fh:
            return cls.read(fh)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TimelineSet":
        return cls.read(io.BytesIO(raw))


def _delta_encode(ts: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.diff(ts, prepend=0).astype(np.int64)
    starts = offsets[:-1][np.diff(offsets) > 0]
    out[starts] = ts[starts]
    return out


def _delta_decode(deltas: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    total = np.cumsum(deltas).astype(np.int64)
    lens = np.diff(offsets)
    starts = offsets[:-1]
    if len(total) == 0:
        return total
    # subtract the running sum carried over from earlier users
    carry = np.where(starts > 0, total[np.maximum(starts - 1, 0)], 0)
    return total - np.repeat(carry, lens)


def _count_kinds(items: np.ndarray, kinds: np.ndarray, n_items: int):
    views = np.bincount(items[kinds == EventKind.VIEW], minlength=n_items).astype(np.int64)
    clicks = np.bincount(items[kinds == EventKind.CLICK], minlength=n_items).astype(np.int64)
    return views, clicks


def build_timeline_set(users, items, kinds, timestamps) -> TimelineSet:
    """
    Assemble a :class:`TimelineSet` from parallel per-event columns.

    ``users`` and ``items`` hold external ids; users and vocabulary entries are
    numbered by first appearance, and each timeline is stably sorted by time.
    """
    users = pd.Series(users, dtype=object).astype(str)
    items = pd.Series(items, dtype=object).astype(str)
    if len(users) == 0:
        raise EmptyDatasetError("empty dataset")
    user_codes, user_ids = pd.factorize(users, sort=False)
    item_codes, item_ids = pd.factorize(items, sort=False)
    kinds = np.asarray(kinds, dtype=np.uint8)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if timestamps.min() < 0:
        raise ValueError("negative timestamp")

    order = np.lexsort((timestamps, user_codes))
    counts = np.bincount(user_codes, minlength=len(user_ids))
    offsets = np.zeros(len(user_ids) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    s_items = item_codes[order].astype(np.int32)
    s_kinds = kinds[order]
    vocab = Vocabulary(tuple(item_ids), *_count_kinds(s_items, s_kinds, len(item_ids)))
    ts = TimelineSet(tuple(user_ids), offsets, s_items, s_kinds, timestamps[order], vocab)
    _log.info("built timeline set: %(users)d users, %(items)d items, %(events)d events", ts.stats())
    return ts


def ingest_ml20m(ratings_file, min_rating: float = 4.0, min_events: int = 5) -> TimelineSet:
    """
    Load a MovieLens ``ratings.csv`` with the usual implicit-feedback filter.

    Ratings of at least ``min_rating`` become view events; users left with
    fewer than ``min_events`` of them are dropped.
    """
    try:
        df = pd.read_csv(
            ratings_file,
            dtype={"userId": str, "movieId": str, "rating": np.float64, "timestamp": np.int64},
        )
    except (ValueError, pd.errors.ParserError):
        _locate_csv_error(ratings_file)
        raise
    missing = {"userId", "movieId", "rating", "timestamp"} - set(df.columns)
    if missing:
        raise ParseError(1, f"missing columns {sorted(missing)}")
    if df.isna().any().any():
        bad = int(np.flatnonzero(df.isna().any(axis=1).to_numpy())[0])
        raise ParseError(bad + 2, "missing field")

    df = df[df["rating"] >= min_rating]
    n_per_user = df.groupby("userId", sort=False)["movieId"].transform("size")
    df = df[n_per_user >= min_events]
    if len(df) == 0:
        raise EmptyDatasetError("empty dataset")
    return build_timeline_set(
        df["userId"].to_numpy(),
        df["movieId"].to_numpy(),
        np.full(len(df), EventKind.VIEW, dtype=np.uint8),
        df["timestamp"].to_numpy(),
    )


def _locate_csv_error(path) -> None:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError("empty dataset")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            try:
                float(rec["rating"])
                int(rec["timestamp"])
            except (KeyError, ValueError) as e:
                raise ParseError(lineno, f"bad value: {e}") from None


def ingest_jsonl(events_file) -> TimelineSet:
    """Load ``{"user", "item", "kind", "ts"}`` records, one JSON object per line."""
    users, items, kinds, stamps = [], [], [], []
    with open(events_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if not isinstance(kind, str) or kind.upper() not in EventKind.__members__:
                    raise ParseError(lineno, f"unknown kind {kind!r}")
                ts = int(rec["ts"])
                users.append(str(rec["user"]))
                items.append(str(rec["item"]))
            except ParseError:
                raise
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(lineno, f"malformed record: {e}") from None
            kinds.append(EventKind.parse(kind))
            stamps.append(ts)
    return build_timeline_set(users, items, kinds, stamps)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    input_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train, self.validation, self.test)
        if not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")
        if not 0 < self.train <= 1 or any(not 0 <= f < 1 for f in fracs[1:]):
            raise ValueError(f"invalid split fractions {fracs}")
        if not 0 < self.input_fraction < 1:
            raise ValueError("input_fraction must be in (0, 1)")


class UserSplit(NamedTuple):
    train: TimelineSet
    validation: TimelineSet
    test: TimelineSet


def split_users(ts: TimelineSet, spec: SplitSpec) -> UserSplit:
    """Partition users (not events) into disjoint train / validation / test sets."""
    n = len(ts)
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(math.floor(spec.train * n + 0.5))
    n_val = min(int(math.floor(spec.validation * n + 0.5)), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    for name, part in zip(("validation", "test"), parts[1:]):
        if len(part) == 0:
            warnings.warn(f"{name} split is empty", stacklevel=2)
    return UserSplit(*(ts.subset(np.sort(p)) for p in parts))


class TimelineSplit(NamedTuple):
    input: np.ndarray
    target: np.ndarray


def split_timeline(
    t: Timeline,
    input_fraction: float = 0.8,
    seed=None,
    shuffle: bool = True,
    click_targets: bool = False,
    skipped: dict | None = None,
) -> TimelineSplit | None:
    """
    Split one timeline into input and target item lists.

    ``round(input_fraction * T)`` events (at least one, at most ``T - 1``) go
    to the input; with ``shuffle=False`` they are the earliest events.  With
    ``click_targets`` the target keeps only click events.  Timelines that
    cannot be split return ``None`` and bump ``skipped[reason]``.
    """
    n = len(t)
    if n < 2:
        _skip(skipped, "too_short")
        return None
    n_in = min(max(int(math.floor(input_fraction * n + 0.5)), 1), n - 1)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        perm = rng.permutation(n)
        in_pos, tgt_pos = np.sort(perm[:n_in]), np.sort(perm[n_in:])
    else:
        in_pos, tgt_pos = np.arange(n_in), np.arange(n_in, n)
    if click_targets:
        tgt_pos = tgt_pos[t.kinds[tgt_pos] == EventKind.CLICK]
        if len(tgt_pos) == 0:
            _skip(skipped, "no_click_target")
            return None
    return TimelineSplit(t.items[in_pos], t.items[tgt_pos])


def _skip(counter, reason):
    if counter is not None:
        counter[reason] = counter.get(reason, 0) + 1


def save_vocabulary(vocab: Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json()))


def load_vocabulary(path) -> Vocabulary:
    return Vocabulary.from_json(json.loads(Path(path).read_text()))


def has_clicks(ts: TimelineSet) -> bool:
    return bool(np.any(ts.kinds == EventKind.CLICK))


def holdout_splits(
    ts: TimelineSet,
    input_fraction: float = 0.8,
    seed: int = 0,
    click_targets: bool | None = None,
) -> tuple[list[int], list[TimelineSplit], dict]:
    """
    One fixed input/target split per user for evaluation.

    Targets are deduplicated.  Returns the kept user indices, their splits,
    and the skip counter.
    """
    if click_targets is None:
        click_targets = has_clicks(ts)
    rng = np.random.default_rng(seed)
    skipped: dict = {}
    users, splits = [], []
    for u in range(len(ts)):
        s = split_timeline(ts.timeline(u), input_fraction, rng, True, click_targets, skipped)
        if s is None:
            continue
        users.append(u)
        splits.append(TimelineSplit(s.input, np.unique(s.target)))
    return users, splits, skipped
