import numpy as np
import pytest
import scipy.sparse as sp

from ledrec.rsvd import ConfigError, EmbeddingMatrix, RsvdConfig, randomized_svd, randomized_svd_factors, spmm


def test_identity_spectrum():
    emb, s = randomized_svd(sp.identity(8, format="csr"), RsvdConfig(3, oversampling=2))
    np.testing.assert_allclose(s, [1, 1, 1], atol=1e-10)


def test_diagonal_case():
    m = sp.diags([3.0, 2.0, 1.0] + [0.0] * 9).tocsr()
    emb, s = randomized_svd(m, RsvdConfig(2, oversampling=4))
    np.testing.assert_allclose(s, [3, 2], atol=1e-10)
    u = emb.vectors
    assert np.abs(u[2:]).max() < 1e-5  # spans e1, e2


def optimal_error(a, d):
    s = np.linalg.svd(a, compute_uv=False)
    return np.sqrt((s[d:] ** 2).sum())


def test_low_rank_matches_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((100, 5)) @ rng.standard_normal((5, 100))
    u, s, vt = randomized_svd_factors(sp.csr_matrix(a), RsvdConfig(5))
    err = np.linalg.norm(a - (u * s) @ vt)
    assert err <= 1.05 * optimal_error(a, 5) + 1e-8 * np.linalg.norm(a)


def test_orthonormal_and_monotone():
    rng = np.random.default_rng(1)
    a = sp.random(300, 300, density=0.05, random_state=2, format="csr")
    a = a + a.T
    emb, s = randomized_svd(a, RsvdConfig(20, seed=3))
    u = emb.vectors.astype(np.float64)
    assert np.abs(u.T @ u - np.eye(20)).max() <= 1e-4
    assert np.all(np.diff(s) <= 0)


def test_seeded_determinism():
    a = sp.random(200, 200, density=0.05, random_state=4, format="csr")
    e1, _ = randomized_svd(a, RsvdConfig(10, seed=9))
    e2, _ = randomized_svd(a, RsvdConfig(10, seed=9))
    assert e1.vectors.tobytes() == e2.vectors.tobytes()


def test_gamma_scaling():
    a = sp.diags(np.arange(20, 0, -1, dtype=float)).tocsr()
    e0, s = randomized_svd(a, RsvdConfig(4, gamma=0.0))
    e1, _ = randomized_svd(a, RsvdConfig(4, gamma=1.0))
    np.testing.assert_allclose(np.abs(e1.vectors), np.abs(e0.vectors) * s.astype(np.float32), rtol=1e-5)


def test_config_errors():
    a = sp.identity(10, format="csr")
    with pytest.raises(ConfigError):
        randomized_svd(a, RsvdConfig(5, oversampling=10))
    bad = sp.csr_matrix(np.array([[np.nan, 0], [0, 1.0]]))
    with pytest.raises(ValueError):
        randomized_svd(bad, RsvdConfig(1, oversampling=0))


def test_spmm():
    rng = np.random.default_rng(5)
    dense = rng.standard_normal((20, 4)).astype(np.float32)
    np.testing.assert_array_equal(spmm(sp.identity(20, format="csr"), dense), dense)
    assert not spmm(sp.csr_matrix((20, 20)), dense).any()
    m = sp.random(20, 20, density=0.3, random_state=1, format="csr", dtype=np.float32)
    assert np.abs(spmm(m, dense) - m.toarray() @ dense).max() <= 1e-5
    with pytest.raises(ValueError):
        spmm(m, dense[:5])


def test_embedding_roundtrip(tmp_path):
    emb, _ = randomized_svd(sp.random(50, 50, density=0.2, random_state=0, format="csr"), RsvdConfig(4))
    emb.save(tmp_path / "e.lede")
    back = EmbeddingMatrix.load(tmp_path / "e.lede")
    assert back.vectors.tobytes() == emb.vectors.tobytes() and back.gamma == emb.gamma
    np.testing.assert_array_equal(back.singular_values, emb.singular_values)
