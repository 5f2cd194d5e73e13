import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from invertext.defense import (ABSMAX, NOISE, NOISE_GRID, NONE, ZEROPOINT, AbsmaxQuantized, DefenseConfig,
                               DegenerateEmbedding, absmax_dequantize, absmax_quantize, apply_defense,
                               from_record, noise_embed, round_half_away, zeropoint_dequantize,
                               zeropoint_quantize)
from invertext.metrics import cosine_sim


def direct_absmax(v):
    """Formula evaluated by hand: scale by 127 / max|v|, round half away from zero."""
    top = max(abs(x) for x in v)
    out = []
    for x in v:
        y = x / top * 127
        r = int(abs(y) + 0.5) * (1 if y >= 0 else -1)
        out.append(min(127, max(-128, r)))
    return out, top


def direct_zeropoint(v):
    lo, hi = min(v), max(v)
    scale = 255 / (hi - lo)
    y = scale * lo
    zero = -(int(abs(y) + 0.5) * (1 if y >= 0 else -1)) - 128
    q = []
    for x in v:
        t = scale * x + zero
        q.append(min(127, max(-128, int(abs(t) + 0.5) * (1 if t >= 0 else -1))))
    return q, scale, zero


def test_oracles_agree_on_worked_examples():
    assert direct_absmax([0.5, -0.25, 1.0]) == ([64, -32, 127], 1.0)
    q, scale, zero = direct_zeropoint([-1.0, 0.0, 0.5])
    assert (q, scale, zero) == ([-128, 42, 127], 170.0, 42)


def test_absmax_worked_example():
    aq = absmax_quantize([0.5, -0.25, 1.0])
    assert aq.q.tolist() == [64, -32, 127] and aq.scale == 1.0
    np.testing.assert_allclose(absmax_dequantize(aq), [64 / 127, -32 / 127, 1.0])
    assert absmax_dequantize(aq)[0] == pytest.approx(0.50394, abs=1e-5)
    assert absmax_dequantize(aq)[1] == pytest.approx(-0.25197, abs=1e-5)


def test_zeropoint_worked_example():
    zq = zeropoint_quantize([-1.0, 0.0, 0.5])
    assert zq.scale == 170.0 and zq.zero_point == 42
    assert zq.q.tolist() == [-128, 42, 127]
    assert zeropoint_dequantize(zq).tolist() == [-1.0, 0.0, 0.5]


def test_round_half_away_from_zero():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -2.5, 0.49]).tolist() == [1, 2, 3, -1, -3, 0]


def test_constant_and_degenerate_vectors():
    assert absmax_quantize(np.full(5, 0.3)).q.tolist() == [127] * 5
    with pytest.raises(DegenerateEmbedding, match="degenerate"):
        absmax_quantize(np.zeros(4))
    with pytest.raises(DegenerateEmbedding, match="zero dynamic range"):
        zeropoint_quantize(np.full(4, 0.2))


def test_absmax_uses_largest_magnitude_even_when_negative():
    aq = absmax_quantize([-2.0, 1.0])
    assert aq.scale == 2.0 and aq.q.tolist() == [-127, 64]


# subnormal magnitudes are outside any real embedding's range
entries = st.one_of(st.just(0.0), st.floats(1e-6, 10), st.floats(-10, -1e-6))
vectors = arrays(np.float64, st.integers(2, 64), elements=entries)


@given(vectors)
def test_quantizers_agree_with_direct_formulas(v):
    if np.max(np.abs(v)) > 0:
        q, top = direct_absmax(v.tolist())
        aq = absmax_quantize(v)
        assert aq.q.tolist() == q and aq.scale == top
    if v.max() > v.min():
        q, scale, zero = direct_zeropoint(v.tolist())
        zq = zeropoint_quantize(v)
        assert zq.q.tolist() == q and zq.zero_point == zero
        assert zq.scale == pytest.approx(scale, rel=1e-15)


@settings(max_examples=200)
@given(vectors)
def test_requantization_is_idempotent(v):
    if np.max(np.abs(v)) > 0:
        aq = absmax_quantize(v)
        assert absmax_quantize(absmax_dequantize(aq)).q.tolist() == aq.q.tolist()
    if v.max() - v.min() > 1e-6:
        zq = zeropoint_quantize(v)
        assert zeropoint_quantize(zeropoint_dequantize(zq)).q.tolist() == zq.q.tolist()


def test_round_trip_error_bounds_on_random_vectors():
    rng = np.random.default_rng(0)
    worst_abs, worst_zp = 0, 0
    for _ in range(1000):
        v = rng.standard_normal(int(rng.integers(2, 128))) * rng.uniform(0.01, 5)
        aq = absmax_quantize(v)
        worst_abs = max(worst_abs, np.max(np.abs(absmax_dequantize(aq) - v)) / (0.5 * aq.scale / 127))
        zq = zeropoint_quantize(v)
        worst_zp = max(worst_zp, np.max(np.abs(zeropoint_dequantize(zq) - v)) / (0.5 / zq.scale))
    assert worst_abs <= 1 + 1e-9
    assert worst_zp <= 1 + 1e-9


def test_extreme_entries_round_trip():
    v = np.array([0.3, -0.9, 0.1])
    assert absmax_dequantize(absmax_quantize(v))[1] == pytest.approx(-0.9, abs=1e-15)


def test_zeropoint_exact_when_grid_aligned():
    # range 255/128 gives scale 128, so every multiple of 1/128 lands on the grid
    v = np.array([-1.0, -0.5, 0.0, 0.25, 127 / 128])
    zq = zeropoint_quantize(v)
    assert (zq.scale, zq.zero_point) == (128.0, 0)
    assert zq.q.tolist() == [-128, -64, 0, 32, 127]
    np.testing.assert_array_equal(zeropoint_dequantize(zq), v)


def test_records_round_trip():
    aq = absmax_quantize([0.5, -0.25, 1.0])
    back = from_record(aq.to_record())
    assert isinstance(back, AbsmaxQuantized) and back.q.tolist() == aq.q.tolist()
    zq = zeropoint_quantize([-1.0, 0.0, 0.5])
    back = from_record(zq.to_record())
    assert (back.scale, back.zero_point) == (170.0, 42)
    with pytest.raises(ValueError):
        from_record({"q": [200], "scheme": "absmax", "scale": 1.0})


def test_noise_zero_scale_is_identity(rng):
    v = rng.standard_normal(16)
    assert np.array_equal(noise_embed(v, 0.0, rng), v)
    with pytest.raises(ValueError):
        noise_embed(v, -1.0, rng)


def test_noise_energy_matches_its_expectation():
    rng = np.random.default_rng(11)
    dim, scale = 256, 0.01
    v = rng.standard_normal(dim)
    sq = np.array([np.sum((noise_embed(v, scale, rng) - v) ** 2) for _ in range(1000)])
    expected = scale ** 2 * dim
    assert abs(sq.mean() - expected) <= 3 * sq.std(ddof=1) / np.sqrt(len(sq))


def test_default_noise_grid():
    assert NOISE_GRID == (0.0, 0.001, 0.01, 0.1, 1.0)


def test_apply_defense_dispatch(rng):
    v = rng.standard_normal(8)
    assert np.array_equal(apply_defense(DefenseConfig(NONE), v), v)
    np.testing.assert_array_equal(apply_defense(DefenseConfig(ABSMAX), v), absmax_dequantize(absmax_quantize(v)))
    np.testing.assert_array_equal(apply_defense(DefenseConfig(ZEROPOINT), v),
                                  zeropoint_dequantize(zeropoint_quantize(v)))
    a = apply_defense(DefenseConfig(NOISE, 0.1, seed=3), v)
    b = apply_defense(DefenseConfig(NOISE, 0.1, seed=3), v)
    assert np.array_equal(a, b) and a.shape == v.shape


def test_defense_config_parsing():
    cfg = DefenseConfig.from_dict({"kind": "noise", "noise_scale": 0.01, "seed": 2})
    assert cfg == DefenseConfig(NOISE, 0.01, 2)
    assert DefenseConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown defense keys"):
        DefenseConfig.from_dict({"kind": "noise", "sigma": 1})
    with pytest.raises(ValueError):
        DefenseConfig("rot13")


def test_quantized_toy_embeddings_stay_close(small_encoder, small_corpus):
    for text in small_corpus.texts[:300]:
        e = small_encoder.encode(text)
        for kind in (ABSMAX, ZEROPOINT):
            assert cosine_sim(apply_defense(DefenseConfig(kind), e), e) >= 0.99
