import json

import numpy as np
import pytest
import scipy.fft
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastbvp.errors import ConfigError, StateError
from fastbvp.spectral import (
    DEFAULT_BANDS,
    FrequencyBand,
    Spectrum,
    band_filter,
    bands_from_dict,
    bin_frequencies,
    dct2,
    dct_matrix,
    decompose,
    idct2,
    load_bands,
)
from fastbvp.stmap import MYUV, SpatialTemporalMap, preprocess

FS = 30.0


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


# --- transforms ------------------------------------------------------------------


def test_dct_matches_scipy_oracle(rng):
    for n in (2, 16, 225, 900):
        x = rng.normal(size=n)
        np.testing.assert_allclose(dct2(x, FS).coeffs, scipy.fft.dct(x, type=2, norm="ortho"), atol=1e-10)


def test_dct_matrix_orthonormal():
    d = dct_matrix(64)
    np.testing.assert_allclose(d @ d.T, np.eye(64), atol=1e-12)


def test_dct_constant():
    n, c = 50, 3.5
    coeffs = dct2(np.full(n, c), FS).coeffs
    assert coeffs[0] == pytest.approx(c * np.sqrt(n), rel=1e-12)
    np.testing.assert_allclose(coeffs[1:], 0.0, atol=1e-12)


def test_dct_single_basis_function():
    n = 16
    x = np.cos(np.pi * (2 * np.arange(n) + 1) * 3 / (2 * n))
    coeffs = dct2(x, FS).coeffs
    expected = np.zeros(n)
    expected[3] = np.sqrt(n / 2)
    np.testing.assert_allclose(coeffs, expected, atol=1e-12)


def test_dct_rejects_short():
    with pytest.raises(ValueError):
        dct2([1.0], FS)


def test_idct_examples():
    n = 20
    np.testing.assert_array_equal(idct2(Spectrum(np.zeros(n), FS)), np.zeros(n))
    dc = np.zeros(n)
    dc[0] = np.sqrt(n)
    np.testing.assert_allclose(idct2(Spectrum(dc, FS)), np.ones(n), atol=1e-12)


def test_roundtrip_and_parseval_1000_signals(rng):
    x = rng.normal(size=(1000, 900))
    for row in x:
        s = dct2(row, FS)
        np.testing.assert_allclose(idct2(s), row, atol=1e-9)
        assert abs(np.sum(row**2) - np.sum(s.coeffs**2)) <= 1e-9 * np.sum(row**2)
        np.testing.assert_allclose(dct2(idct2(s), FS).coeffs, s.coeffs, atol=1e-9)


def test_bin_frequencies():
    f = bin_frequencies(900, 30.0)
    assert f[0] == 0.0 and f[1] == pytest.approx(1 / 60)
    assert f[-1] < 15.0


# --- band filtering ---------------------------------------------------------------


def test_band_all_pass(rng):
    x = rng.normal(size=300)
    np.testing.assert_allclose(band_filter(dct2(x, FS), FrequencyBand(0.0, FS / 2)), x, atol=1e-9)


def _tone(f, n=900, fs=FS, grid=0.5):
    """Cosine sampled at ``(k + grid) / fs``; ``grid=0.5`` is the DCT-II sample grid."""
    return np.cos(2 * np.pi * f * (np.arange(n) + grid) / fs)


def _brute_force_band(x, lo, hi, fs=FS):
    # per-bin oracle: project onto each DCT-II basis vector evaluated from the definition
    n = len(x)
    k = np.arange(n)
    out = np.zeros(n)
    for u in range(n):
        if lo <= u * fs / (2 * n) < hi:
            basis = np.cos(np.pi * (2 * k + 1) * u / (2 * n)) * np.sqrt((1 if u == 0 else 2) / n)
            out += (basis @ x) * basis
    return out


def test_band_isolation_tone():
    x = _tone(1.2)
    kept = band_filter(dct2(x, FS), FrequencyBand(0.7, 2.0))
    assert _rms(x - kept) <= 0.01 * _rms(x)
    rejected = band_filter(dct2(x, FS), FrequencyBand(2.0, 4.0))
    assert _rms(rejected) <= 0.01 * _rms(x)
    np.testing.assert_allclose(kept, _brute_force_band(x, 0.7, 2.0), atol=1e-9)


@pytest.mark.parametrize("f, own, other", [(0.5, (0, 1), (1, 2)), (1.2, (0.7, 2), (2, 4)), (1.5, (1, 2), (0, 1))])
def test_band_leakage_integer_grid(f, own, other):
    # tones sampled at k / fs sit half a sample off the DCT basis; the phase offset
    # spreads a little energy over neighbouring bins (about 1.5 % RMS at worst here)
    x = _tone(f, grid=0.0)
    assert _rms(x - band_filter(dct2(x, FS), FrequencyBand(*own))) <= 0.02 * _rms(x)
    assert _rms(band_filter(dct2(x, FS), FrequencyBand(*other))) <= 0.02 * _rms(x)


def test_band_empty_flag():
    res = band_filter(dct2(_tone(1.0, 60), FS), FrequencyBand(0.01, 0.02), with_flag=True)
    assert res.empty and not np.any(res.signal)
    assert not band_filter(dct2(_tone(1.0, 60), FS), FrequencyBand(0.0, 1.0), with_flag=True).empty


def test_band_validation():
    with pytest.raises(ConfigError):
        FrequencyBand(1.0, 1.0)
    with pytest.raises(ConfigError):
        band_filter(dct2(_tone(1.0), FS), FrequencyBand(1.0, 20.0))


@given(arrays(np.float64, 120, elements=st.floats(-10, 10)), st.floats(0, 10), st.floats(0.1, 5))
def test_band_filter_idempotent(x, lo, width):
    band = FrequencyBand(lo, min(lo + width, FS / 2))
    once = band_filter(dct2(x, FS), band)
    twice = band_filter(dct2(once, FS), band)
    np.testing.assert_allclose(twice, once, atol=1e-9)


# --- decompose --------------------------------------------------------------------


def _prepared(rng, frames=300):
    return preprocess(SpatialTemporalMap(rng.uniform(20, 230, (4, 3, frames)), FS))


def test_decompose_identity_partition(rng):
    m = _prepared(rng)
    multi = decompose(m, [FrequencyBand(0.0, FS / 2)])
    assert multi.k == 1
    np.testing.assert_allclose(multi[0], m.data, atol=1e-9)


def test_decompose_partition_identity(rng):
    m = _prepared(rng)
    bands = list(DEFAULT_BANDS) + [FrequencyBand(4.0, FS / 2)]
    multi = decompose(m, bands)
    assert multi.bands.shape == (5,) + m.data.shape
    np.testing.assert_allclose(multi.total(), m.data, atol=1e-8)


def test_decompose_two_tone_separation():
    low, high = _tone(0.5), _tone(1.5, grid=0.5)
    data = np.broadcast_to(low + 0.5 * high, (2, 3, 900)).copy()
    m = SpatialTemporalMap(data, FS, MYUV)
    multi = decompose(m, [FrequencyBand(0.0, 1.0), FrequencyBand(1.0, 2.0)])
    assert _rms(multi[0] - low) <= 0.01 * _rms(low)
    assert _rms(multi[1] - 0.5 * high) <= 0.01 * _rms(0.5 * high)
    for k, oracle in enumerate((_brute_force_band(low + 0.5 * high, 0, 1), _brute_force_band(low + 0.5 * high, 1, 2))):
        np.testing.assert_allclose(multi[k][1, 2], oracle, atol=1e-9)


def test_decompose_matches_per_trace_filter(rng):
    m = _prepared(rng, 120)
    multi = decompose(m, DEFAULT_BANDS)
    for k, band in enumerate(DEFAULT_BANDS):
        for i in range(m.regions):
            for c in range(3):
                expected = band_filter(dct2(m.data[i, c], FS), band)
                np.testing.assert_allclose(multi[k][i, c], expected, atol=1e-12)


def test_decompose_errors(rng):
    m = _prepared(rng)
    with pytest.raises(ConfigError, match="overlap"):
        decompose(m, [FrequencyBand(0.0, 1.0), FrequencyBand(0.5, 2.0)])
    raw = SpatialTemporalMap(rng.uniform(0, 255, (4, 3, 90)), FS)
    with pytest.raises(StateError):
        decompose(raw, DEFAULT_BANDS)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_decompose_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 1, 3, 60))
    d = lambda v: decompose(SpatialTemporalMap(v, FS, MYUV), DEFAULT_BANDS).bands  # noqa: E731
    np.testing.assert_allclose(d(a * x + b * y), a * d(x) + b * d(y), atol=1e-9)


# --- band config ------------------------------------------------------------------


def test_band_config_roundtrip(tmp_path):
    path = tmp_path / "bands.json"
    path.write_text(json.dumps({"bands": [{"lo": 0.0, "hi": 0.7}, {"lo": 0.7, "hi": 1.5}]}))
    assert load_bands(path) == (FrequencyBand(0.0, 0.7), FrequencyBand(0.7, 1.5))
    with pytest.raises(ConfigError):
        bands_from_dict({"bands": [{"lo": 0.0}]})
    with pytest.raises(ConfigError):
        bands_from_dict({"bands": [{"lo": 0.0, "hi": 1.0}, {"lo": 0.9, "hi": 2.0}]})


def test_shipped_band_config_is_default():
    from importlib.resources import files

    doc = json.loads(files("fastbvp").joinpath("configs/bands_default.json").read_text())
    assert bands_from_dict(doc) == DEFAULT_BANDS
