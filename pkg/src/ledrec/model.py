"""
The lightweight encoder-decoder: users are the (normalized) sum of their item
embeddings, items are scored by inner product plus a per-item bias.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Callable

import numpy as np

from ._binio import read_array, read_header, read_struct, write_array, write_header, write_struct

MODEL_MAGIC = b"LEDM"
MODEL_VERSION = 1


class Mode(IntEnum):
    FULL = 0
    PROJECT = 1


class NormMode(IntEnum):
    OVER_T = 0
    OVER_SQRT_T = 1


@dataclass(frozen=True, eq=False)
class LedModel:
    """
    Item embeddings plus biases, optionally behind a learned ``d x d`` projection.

    In project mode ``base`` holds the frozen pre-trained embeddings and the
    effective embedding of item ``i`` is ``P @ base[i]``; in full mode
    ``base`` is the effective embedding table itself.
    """

    base: np.ndarray
    biases: np.ndarray
    mode: Mode = Mode.FULL
    projection: np.ndarray | None = None
    norm_mode: NormMode = NormMode.OVER_T
    _effective: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n, d = self.base.shape
        if self.biases.shape != (n,):
            raise ValueError("need one bias per item")
        if self.mode == Mode.PROJECT:
            if self.projection is None or self.projection.shape != (d, d):
                raise ValueError("project mode needs a d x d projection")
        elif self.projection is not None:
            raise ValueError("full mode has no projection")

    @property
    def n_items(self) -> int:
        return self.base.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @cached_property
    def effective(self) -> np.ndarray:
        """Item embeddings used for scoring, materialized once."""
        if self._effective is not None:
            return self._effective
        if self.mode == Mode.FULL:
            return self.base
        return np.ascontiguousarray(self.base @ self.projection.T, dtype=self.base.dtype)

    def denominator(self, t: int) -> float:
        """History-length normalizer: ``T`` or ``sqrt(T)``."""
        return float(t) if self.norm_mode == NormMode.OVER_T else float(np.sqrt(t))

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        write_header(fh, MODEL_MAGIC, MODEL_VERSION)
        write_struct(fh, "BBQI", int(self.mode), int(self.norm_mode), self.n_items, self.dim)
        if self.mode == Mode.PROJECT:
            write_array(fh, self.projection, "f4")
        write_array(fh, self.biases, "f4")
        write_array(fh, self.effective, "f4")
        if self.mode == Mode.PROJECT:
            write_array(fh, self.base, "f4")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def read(cls, fh) -> "LedModel":
        read_header(fh, MODEL_MAGIC, (MODEL_VERSION,))
        mode, norm_mode, n, d = read_struct(fh, "BBQI")
        mode = Mode(mode)
        proj = read_array(fh, "f4", d * d).reshape(d, d) if mode == Mode.PROJECT else None
        biases = read_array(fh, "f4", n)
        eff = read_array(fh, "f4", n * d).reshape(n, d)
        base = read_array(fh, "f4", n * d).reshape(n, d) if mode == Mode.PROJECT else eff
        return cls(base, biases, mode, proj, NormMode(norm_mode), _effective=eff)

    @classmethod
    def load(cls, path) -> "LedModel":
        with open(path, "rb") as fh:
            return cls.read(fh)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LedModel":
        return cls.read(io.BytesIO(raw))


def _check_history(history, n_items: int) -> np.ndarray:
    idx = np.asarray(history, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_items):
        raise IndexError(f"history item outside [0, {n_items})")
    return idx


def encode_user(history, m: LedModel) -> np.ndarray:
    """Normalized sum of the effective embeddings of ``history``; zero when empty."""
    idx = _check_history(history, m.n_items)
    if len(idx) == 0:
        return np.zeros(m.dim, dtype=m.effective.dtype)
    # float64 sum then divide: a history of k copies of one item encodes to it exactly
    total = m.effective[idx].sum(axis=0, dtype=np.float64)
    return (total / m.denominator(len(idx))).astype(m.effective.dtype)


def encode_user_base(history, m: LedModel) -> np.ndarray:
    """Like :func:`encode_user` but over the frozen base embeddings."""
    idx = _check_history(history, m.n_items)
    if len(idx) == 0:
        return np.zeros(m.dim, dtype=m.base.dtype)
    total = m.base[idx].sum(axis=0, dtype=np.float64)
    return (total / m.denominator(len(idx))).astype(m.base.dtype)


def score(u: np.ndarray, item: int, m: LedModel) -> float:
    return float(np.dot(u, m.effective[item]) + m.biases[item])


def score_all(u: np.ndarray, m: LedModel) -> np.ndarray:
    """Scores of every item for user vector ``u`` over effective embeddings."""
    return m.effective @ u + m.biases


def score_all_trick(u_base: np.ndarray, m: LedModel) -> np.ndarray:
    """
    All-item scores from a user vector over *base* embeddings.

    Uses ``<P u, P v> = <P^T P u, v>``: the Gram matrix is applied once to the
    user, then a single pass over the base embeddings.
    """
    if m.mode != Mode.PROJECT:
        raise ValueError("the transposition trick only applies to project mode")
    P = m.projection
    w = P.T @ (P @ u_base)
    return m.base @ w + m.biases


def augment_for_mips(m: LedModel) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """
    Fold biases into the vectors: items become ``[v_i; b_i]``, queries ``[u; 1]``.

    The inner product in ``d + 1`` dimensions then equals the model score.
    """
    eff = m.effective
    items = np.empty((m.n_items, m.dim + 1), dtype=eff.dtype)
    items[:, :-1] = eff
    items[:, -1] = m.biases

    def query(u: np.ndarray) -> np.ndarray:
        q = np.empty(len(u) + 1, dtype=eff.dtype)
        q[:-1] = u
        q[-1] = 1.0
        return q

    return items, query


def parameter_count(m: LedModel) -> dict[str, int]:
    n, d = m.n_items, m.dim
    if m.mode == Mode.PROJECT:
        return {"trainable": d * d + n, "frozen": n * d}
    return {"trainable": n * d + n, "frozen": 0}
