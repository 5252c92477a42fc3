"""
Randomized SVD of a sparse matrix (Gaussian sketch, power iterations, QR).
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._binio import read_array, read_header, read_struct, write_array, write_header, write_struct
from .pmi import PmiMatrix

_log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"LEDE"
EMBEDDING_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RsvdConfig:
    rank: int
    oversampling: int = 10
    power_iterations: int = 2
    seed: int = 0
    gamma: float = 0.0

    def check(self, n: int) -> None:
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.rank + self.oversampling > n:
            raise ConfigError(
                f"rank + oversampling = {self.rank + self.oversampling} exceeds matrix size {n}"
            )
        if self.power_iterations < 0 or self.oversampling < 0:
            raise ConfigError("oversampling and power_iterations must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row ``i`` is item ``i``'s embedding (float32)."""

    vectors: np.ndarray
    singular_values: np.ndarray | None = None
    gamma: float = 0.0

    @property
    def n_items(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        write_header(fh, EMBEDDING_MAGIC, EMBEDDING_VERSION)
        has_s = self.singular_values is not None
        write_struct(fh, "QIdB", self.n_items, self.dim, self.gamma, int(has_s))
        write_array(fh, self.vectors, "f4")
        if has_s:
            write_array(fh, self.singular_values, "f8")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        with open(path, "rb") as fh:
            read_header(fh, EMBEDDING_MAGIC, (EMBEDDING_VERSION,))
            n, d, gamma, has_s = read_struct(fh, "QIdB")
            vectors = read_array(fh, "f4", n * d).reshape(n, d)
            s = read_array(fh, "f8", d) if has_s else None
        return cls(vectors, s, gamma)


def spmm(m, dense: np.ndarray) -> np.ndarray:
    """Sparse (CSR) times dense product."""
    mat = m.matrix if isinstance(m, PmiMatrix) else m
    dense = np.asarray(dense)
    if dense.ndim != 2 or mat.shape[1] != dense.shape[0]:
        raise ValueError(f"shape mismatch: {mat.shape} @ {dense.shape}")
    return np.asarray(mat @ dense)


def randomized_svd(m, cfg: RsvdConfig) -> tuple[EmbeddingMatrix, np.ndarray]:
    """
    Rank-``cfg.rank`` truncated SVD by random range finding.

    Returns the item embeddings ``U * S**gamma`` (plain left singular vectors
    at the default ``gamma=0``) and the singular values ``S``.
    """
    U, S, _ = randomized_svd_factors(m, cfg)
    vectors = (U * S**cfg.gamma).astype(np.float32) if cfg.gamma else U.astype(np.float32)
    return EmbeddingMatrix(vectors, S, cfg.gamma), S


def randomized_svd_factors(m, cfg: RsvdConfig):
    """Full ``(U, S, Vt)`` factors in float64."""
    A = m.matrix if isinstance(m, PmiMatrix) else m
    if sp.issparse(A):
        A = A.tocsr().astype(np.float64)
        if not np.all(np.isfinite(A.data)):
            raise ValueError("input matrix contains non-finite values")
    else:
        A = np.asarray(A, dtype=np.float64)
        if not np.all(np.isfinite(A)):
            raise ValueError("input matrix contains non-finite values")
    n_rows, n_cols = A.shape
    cfg.check(min(n_rows, n_cols))
    width = cfg.rank + cfg.oversampling
    At = A.T.tocsr() if sp.issparse(A) else A.T

    rng = np.random.default_rng(cfg.seed)
    omega = rng.standard_normal((n_cols, width))
    Q, _ = np.linalg.qr(spmm(A, omega))
    for _ in range(cfg.power_iterations):
        # re-orthonormalize after every multiply to keep small directions alive
        Z, _ = np.linalg.qr(spmm(At, Q))
        Q, _ = np.linalg.qr(spmm(A, Z))

    B = spmm(At, Q).T  # Q^T A, width x n_cols
    Ub, S, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub
    k = cfg.rank
    _log.info("randomized SVD: rank %d, top singular value %.4g", k, S[0])
    return U[:, :k], S[:k], Vt[:k]
