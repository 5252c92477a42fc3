import numpy as np
import pytest

from ledrec.model import (
    LedModel,
    Mode,
    NormMode,
    augment_for_mips,
    encode_user,
    encode_user_base,
    parameter_count,
    score,
    score_all,
    score_all_trick,
)


def random_model(rng, n=50, d=8, mode=Mode.FULL, norm=NormMode.OVER_T):
    base = rng.standard_normal((n, d)).astype(np.float32)
    b = rng.standard_normal(n).astype(np.float32)
    p = rng.standard_normal((d, d)).astype(np.float32) if mode == Mode.PROJECT else None
    return LedModel(base, b, mode, p, norm)


@pytest.mark.parametrize("norm", list(NormMode))
def test_single_item_history(rng, norm):
    m = random_model(rng, norm=norm)
    np.testing.assert_array_equal(encode_user([3], m), m.effective[3])


def test_homogeneous_history(rng):
    m = random_model(rng, mode=Mode.PROJECT)
    for k in (1, 2, 3, 7, 50):
        np.testing.assert_array_equal(encode_user([5] * k, m), m.effective[5])
    ms = random_model(rng, norm=NormMode.OVER_SQRT_T)
    np.testing.assert_allclose(encode_user([5] * 4, ms), 2 * ms.effective[5], rtol=1e-6)


def test_empty_history_and_range(rng):
    m = random_model(rng)
    assert not encode_user([], m).any()
    with pytest.raises(IndexError):
        encode_user([50], m)
    with pytest.raises(IndexError):
        encode_user([-1], m)


def test_score_oracle(rng):
    m = random_model(rng, d=4)
    u = rng.standard_normal(4).astype(np.float32)
    for i in range(10):
        hand = sum(float(u[k]) * float(m.effective[i, k]) for k in range(4)) + float(m.biases[i])
        assert score(u, i, m) == pytest.approx(hand, abs=1e-6)
    assert score(np.zeros(4, np.float32), 2, m) == pytest.approx(float(m.biases[2]))


def test_trick_identity_projection(rng):
    m = random_model(rng, mode=Mode.PROJECT)
    m = LedModel(m.base, m.biases, Mode.PROJECT, np.eye(8, dtype=np.float32))
    u = encode_user_base([1, 2, 3], m)
    np.testing.assert_allclose(score_all_trick(u, m), m.base @ u + m.biases, rtol=1e-6)
    np.testing.assert_array_equal(score_all_trick(np.zeros(8, np.float32), m), m.biases)


def test_trick_matches_direct(rng):
    m = random_model(rng, n=1000, d=32, mode=Mode.PROJECT)
    m = LedModel(m.base.astype(np.float64), m.biases.astype(np.float64), Mode.PROJECT, m.projection.astype(np.float64))
    hist = rng.integers(0, 1000, size=20)
    direct = score_all(encode_user(hist, m), m)
    trick = score_all_trick(encode_user_base(hist, m), m)
    assert np.abs(trick - direct).max() / np.abs(direct).max() <= 1e-5


def test_trick_rejects_full(rng):
    with pytest.raises(ValueError):
        score_all_trick(np.zeros(8), random_model(rng))


def test_augmentation_exact(rng):
    m = random_model(rng)
    m64 = LedModel(m.base.astype(np.float64), m.biases.astype(np.float64))
    items, query = augment_for_mips(m64)
    u = rng.standard_normal(8)
    np.testing.assert_array_equal(items @ query(u), m64.base @ u + m64.biases)
    items32, q32 = augment_for_mips(m)
    u32 = u.astype(np.float32)
    for i in range(50):
        assert float(items32[i] @ q32(u32)) == pytest.approx(score(u32, i, m), abs=1e-5)
    zero = items32 @ q32(np.zeros(8, np.float32))
    np.testing.assert_array_equal(zero, m.biases)
    assert int(np.argmax(zero)) == int(np.argmax(m.biases))


def test_augmentation_zero_bias(rng):
    m = random_model(rng)
    m = LedModel(m.base, np.zeros(50, np.float32))
    items, q = augment_for_mips(m)
    u = rng.standard_normal(8).astype(np.float32)
    np.testing.assert_allclose(items @ q(u), m.base @ u, rtol=1e-6)


def test_parameter_counts():
    def model(n, d, mode):
        p = np.eye(d, dtype=np.float32) if mode == Mode.PROJECT else None
        return LedModel(np.zeros((n, d), np.float32), np.zeros(n, np.float32), mode, p)

    assert parameter_count(model(20_000, 600, Mode.PROJECT)) == {"trainable": 380_000, "frozen": 12_000_000}
    assert parameter_count(model(1, 1, Mode.FULL))["trainable"] == 2
    assert parameter_count(model(5, 3, Mode.PROJECT))["trainable"] == 14


@pytest.mark.parametrize("mode", list(Mode))
def test_model_roundtrip(tmp_path, rng, mode):
    m = random_model(rng, mode=mode, norm=NormMode.OVER_SQRT_T)
    m.save(tmp_path / "m.ledm")
    back = LedModel.load(tmp_path / "m.ledm")
    assert back.mode == mode and back.norm_mode == NormMode.OVER_SQRT_T
    np.testing.assert_array_equal(back.effective, m.effective)
    np.testing.assert_array_equal(back.biases, m.biases)
    assert back.to_bytes() == m.to_bytes()
    assert m.to_bytes()[:4] == b"LEDM"


def test_model_validation(rng):
    with pytest.raises(ValueError):
        LedModel(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        LedModel(np.zeros((3, 2)), np.zeros(3), Mode.PROJECT)
