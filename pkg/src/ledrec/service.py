"""
HTTP recommendation daemon.

A request's history is mapped to item indices, averaged into a user vector,
augmented with the bias coordinate and sent through the HNSW index.  The
loaded artifacts live in one immutable :class:`ServingState` that is
swapped as a whole on reload.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from .ann import AnnIndex, TopK, brute_force
from .data import Vocabulary, load_vocabulary
from .model import LedModel, augment_for_mips, encode_user

_log = logging.getLogger(__name__)

MODEL_FILE = "model.ledm"
INDEX_FILE = "index.ledi"
VOCAB_FILE = "vocab.json"
COLD_START_CACHE = 1000


class StateError(ValueError):
    """Artifacts that cannot be served together."""


class RequestError(ValueError):
    """A request that is well-formed JSON but semantically invalid."""


@dataclass(frozen=True)
class ServingState:
    model: LedModel
    index: AnnIndex
    vocab: Vocabulary
    version: str
    loaded_at: float
    cold_start: TopK = field(repr=False)

    @property
    def n_items(self) -> int:
        return self.model.n_items


def make_state(model: LedModel, index: AnnIndex, vocab: Vocabulary, version: str) -> ServingState:
    """Check that the three artifacts agree and bundle them."""
    n, d = model.n_items, model.dim
    if index.n_items != n:
        raise StateError(f"index has {index.n_items} items, model has {n}")
    if len(vocab) != n:
        raise StateError(f"vocabulary has {len(vocab)} items, model has {n}")
    if index.dim != d + 1:
        raise StateError(f"index dimension {index.dim} does not match model dimension {d} + 1")
    items, query = augment_for_mips(model)
    # zero-history queries rank by bias alone; answered exactly from a cache
    cold = brute_force(items, query(np.zeros(d, dtype=items.dtype)), min(n, COLD_START_CACHE))
    return ServingState(model, index, vocab, version, time.time(), cold)


def load_state(state_dir, version: str | None = None) -> ServingState:
    state_dir = Path(state_dir)
    paths = [state_dir / f for f in (MODEL_FILE, INDEX_FILE, VOCAB_FILE)]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise StateError(f"{state_dir} is missing {', '.join(missing)}")
    if version is None:
        h = hashlib.sha256()
        for p in paths:
            h.update(p.read_bytes())
        version = h.hexdigest()[:12]
    return make_state(
        LedModel.load(paths[0]), AnnIndex.load(paths[1]), load_vocabulary(paths[2]), version
    )


def write_state(state_dir, model: LedModel, index: AnnIndex, vocab: Vocabulary) -> None:
    from .data import save_vocabulary

    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    model.save(state_dir / MODEL_FILE)
    index.save(state_dir / INDEX_FILE)
    save_vocabulary(vocab, state_dir / VOCAB_FILE)


class LatencyHistogram:
    """
    Streaming histogram over fixed log-spaced buckets from 1 µs to 1 s.

    Values below or above the range land in the first or last bucket.
    Percentiles report the upper edge of the bucket holding the requested
    rank, so they overestimate by at most one bucket width.
    """

    def __init__(self, lo_us: float = 1.0, hi_us: float = 1e6, per_decade: int = 20):
        n = int(round(math.log10(hi_us / lo_us) * per_decade))
        self.edges = lo_us * 10.0 ** (np.arange(n + 1) / per_decade)
        self.counts = np.zeros(n + 2, dtype=np.int64)
        self._log_lo = math.log10(lo_us)
        self._per_decade = per_decade
        self._n = n
        self._lock = threading.Lock()

    def bucket(self, us: float) -> int:
        if us <= self.edges[0]:
            return 0
        if us > self.edges[-1]:
            return self._n + 1
        b = math.ceil((math.log10(us) - self._log_lo) * self._per_decade)
        # guard against rounding at the edges
        while b > 1 and us <= self.edges[b - 1]:
            b -= 1
        while b <= self._n and us > self.edges[b]:
            b += 1
        return b

    def record(self, us: float) -> None:
        b = self.bucket(us)
        with self._lock:
            self.counts[b] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def upper_edge(self, b: int) -> float:
        return float(self.edges[min(b, self._n)])

    def percentile(self, p: float) -> float | None:
        with self._lock:
            counts = self.counts.copy()
        total = int(counts.sum())
        if total == 0:
            return None
        rank = max(1, math.ceil(p / 100.0 * total))
        b = int(np.searchsorted(np.cumsum(counts), rank))
        return self.upper_edge(b)

    def summary(self) -> dict:
        return {f"p{k}": self.percentile(v) for k, v in (("50", 50), ("90", 90), ("99", 99), ("999", 99.9))}


class Recommender:
    """Request handling over an atomically replaceable :class:`ServingState`."""

    def __init__(self, state: ServingState | None = None, max_ef: int = 1000, default_ef: int | None = None):
        self._state = state
        self.max_ef = max_ef
        self.default_ef = default_ef
        self._reload_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self.hist = {k: LatencyHistogram() for k in ("encode", "search", "total")}
        self.requests = 0
        self.dropped_ids = 0
        self.started = time.monotonic()
        self._window: dict[int, int] = {}

    @property
    def state(self) -> ServingState | None:
        return self._state

    def swap(self, state: ServingState) -> None:
        self._state = state

    def reload(self, state_dir) -> ServingState:
        """Load and validate a new state; on any error the old one stays."""
        with self._reload_lock:
            try:
                state = load_state(state_dir)
            except Exception:
                _log.exception("reload from %s rejected", state_dir)
                raise
            old = self._state
            if old is not None and old.version == state.version:
                state = make_state(
                    state.model, state.index, state.vocab, f"{state.version}+{int(time.time_ns())}"
                )
            self._state = state
            _log.info("serving version %s", state.version)
            return state

    def recommend(self, history, k: int = 50, ef_search: int | None = None) -> dict:
        t0 = time.perf_counter()
        state = self._state  # one read: the whole request sees this state
        if state is None:
            raise LookupError("no model loaded")
        if k < 1:
            raise RequestError("k must be >= 1")
        if ef_search is not None and ef_search < 1:
            raise RequestError("ef_search must be >= 1")
        ef = ef_search if ef_search is not None else (self.default_ef or state.index.ef_search)
        ef = min(ef, max(self.max_ef, k))

        lookup = state.vocab.index
        idx = [lookup[i] for i in map(str, history) if i in lookup]
        dropped = len(history) - len(idx)
        model = state.model
        if idx:
            u = encode_user(idx, model)
            q = np.empty(model.dim + 1, dtype=np.float32)
            q[:-1] = u
            q[-1] = 1.0
            t1 = time.perf_counter()
            top = state.index.search(q, k, ef)
        else:
            t1 = time.perf_counter()
            top = state.cold_start if k <= len(state.cold_start) else None
            if top is None:
                items, query = augment_for_mips(model)
                top = brute_force(items, query(np.zeros(model.dim, dtype=items.dtype)), k)
            top = TopK(top.items[:k], top.scores[:k])
        t2 = time.perf_counter()

        ids = state.vocab.ids
        enc_us = (t1 - t0) * 1e6
        search_us = (t2 - t1) * 1e6
        total_us = (t2 - t0) * 1e6
        self.hist["encode"].record(enc_us)
        self.hist["search"].record(search_us)
        self.hist["total"].record(total_us)
        sec = int(time.monotonic())
        with self._count_lock:
            self.requests += 1
            self.dropped_ids += dropped
            self._window[sec] = self._window.get(sec, 0) + 1
            if len(self._window) > 20:
                for s in [s for s in self._window if s < sec - 10]:
                    del self._window[s]
        return {
            "items": [ids[i] for i in top.items.tolist()],
            "scores": np.asarray(top.scores, dtype=np.float32).tolist(),
            "served_by": state.version,
            "dropped": dropped,
            "timing": {"encode": enc_us, "search": search_us, "total": total_us},
        }

    def qps(self, window: int = 10) -> float:
        """Mean requests per second over the last ``window`` completed seconds."""
        now = int(time.monotonic())
        with self._count_lock:
            n = sum(c for s, c in self._window.items() if now - window <= s < now)
        span = min(window, max(1, now - int(self.started)))
        return n / span

    def stats(self) -> dict:
        state = self._state
        return {
            "requests": self.requests,
            "qps": self.qps(),
            "latency_us": {k: h.summary() for k, h in self.hist.items()},
            "dropped_ids": self.dropped_ids,
            "version": state.version if state else None,
        }


def handle_recommend(req: dict, state: ServingState, max_ef: int = 1000) -> dict:
    """Stateless single-request entry point (no stats are kept across calls)."""
    return Recommender(state, max_ef).recommend(
        req.get("history", []), req.get("k", 50), req.get("ef_search")
    )


class RecommendRequest(BaseModel):
    history: list[Union[str, int]] = Field(default_factory=list)
    k: int = Field(50, ge=1)
    ef_search: Optional[int] = Field(None, ge=1)


class ReloadRequest(BaseModel):
    dir: str


def create_app(rec: Recommender):
    from fastapi import FastAPI, Request
    from fastapi.concurrency import run_in_threadpool
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse, Response
    app = FastAPI(title="ledrec")

    def error(status: int, code: str, message: str):
        return JSONResponse({"code": code, "message": message}, status_code=status)

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(x) for x in first.get("loc", ()) if x != "body")
        return error(400, "bad_request", f"{where}: {first.get('msg', 'invalid request')}".lstrip(": "))

    @app.post("/v1/recommend")
    async def recommend(body: RecommendRequest):
        try:
            out = rec.recommend(body.history, body.k, body.ef_search)
        except LookupError as e:
            return error(503, "no_model", str(e))
        except RequestError as e:
            return error(400, "bad_request", str(e))
        return Response(json.dumps(out), media_type="application/json")

    @app.get("/v1/stats")
    async def stats():
        return rec.stats()

    @app.get("/health")
    async def health():
        state = rec.state
        if state is None:
            return error(503, "no_model", "no model loaded")
        return {"status": "ok", "version": state.version}

    @app.post("/v1/reload")
    async def reload(body: ReloadRequest):
        try:
            state = await run_in_threadpool(rec.reload, body.dir)
        except Exception as e:
            return error(409, "reload_rejected", str(e))
        return {"version": state.version}

    return app


def serve(state_dir, host: str = "127.0.0.1", port: int = 8080, max_ef: int = 1000, log_level: str = "warning"):
    import uvicorn

    rec = Recommender(load_state(state_dir) if state_dir else None, max_ef)
    uvicorn.run(create_app(rec), host=host, port=port, log_level=log_level, access_log=False)
