import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastbvp.errors import DataError, SchemaError, StateError, TooShortError
from fastbvp.stmap import (
    MYUV,
    MYUV_MATRIX,
    RGB,
    ColorTriple,
    SpatialTemporalMap,
    add_white_noise,
    csc_modified_yuv,
    load_stmap,
    normalize_traces,
    preprocess,
    save_stmap,
    temporal_normalize,
)


def _map_from_triple(rgb, frames=4, fs=1.0):
    data = np.broadcast_to(np.asarray(rgb, float)[None, :, None], (1, 3, frames)).copy()
    return SpatialTemporalMap(data, fs)


# --- ingestion ---------------------------------------------------------------


def test_load_900_rows(write_stmap_csv, rng):
    path = write_stmap_csv(rng.uniform(0, 255, (900, 12)))
    m = load_stmap(path, 30.0)
    assert (m.regions, m.channels, m.frames) == (4, 3, 900)
    assert m.color_space == RGB


def test_load_450_rows(write_stmap_csv, rng):
    m = load_stmap(write_stmap_csv(rng.uniform(0, 255, (450, 12))), 30.0)
    assert m.frames == 450 and m.duration == 15.0


def test_load_too_short(write_stmap_csv, rng):
    with pytest.raises(TooShortError):
        load_stmap(write_stmap_csv(rng.uniform(0, 255, (30, 12))), 30.0)


def test_load_values_roundtrip(write_stmap_csv, rng):
    values = rng.uniform(0, 255, (90, 6))
    m = load_stmap(write_stmap_csv(values), 30.0)
    # column r{i}_{c} lands at data[i-1, c]
    assert m.data[1, 2, 7] == values[7, 5]
    assert m.data[0, 1, 0] == values[0, 1]


def test_load_malformed_row(tmp_path):
    path = tmp_path / "bad.csv"
    rows = ["frame,r1_R,r1_G,r1_B"] + [f"{n},1,2,3" for n in range(70)] + ["70,1,2"]
    path.write_text("\n".join(rows), encoding="utf-8")
    with pytest.raises(SchemaError, match="expected 4 fields"):
        load_stmap(path, 30.0)


def test_load_bad_header(write_stmap_csv, rng):
    with pytest.raises(SchemaError):
        load_stmap(write_stmap_csv(rng.uniform(0, 255, (90, 3)), header=["t", "R", "G", "B"]), 30.0)


@pytest.mark.parametrize("bad", ["nan", "inf"])
def test_load_non_finite(tmp_path, bad):
    path = tmp_path / "nf.csv"
    rows = ["frame,r1_R,r1_G,r1_B"] + [f"{n},1,2,3" for n in range(70)]
    rows[10] = f"9,1,{bad},3"
    path.write_text("\n".join(rows), encoding="utf-8")
    with pytest.raises(DataError):
        load_stmap(path, 30.0)


def test_load_out_of_range(write_stmap_csv):
    values = np.full((90, 3), 100.0)
    values[3, 1] = 256.0
    with pytest.raises(DataError, match=r"\[0, 255\]"):
        load_stmap(write_stmap_csv(values), 30.0)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_stmap(tmp_path / "nope.csv", 30.0)


def test_save_load_roundtrip(tmp_path, rng):
    m = SpatialTemporalMap(rng.uniform(0, 255, (2, 3, 70)), 30.0)
    save_stmap(m, tmp_path / "m.csv")
    back = load_stmap(tmp_path / "m.csv", 30.0)
    np.testing.assert_array_equal(back.data, m.data)


def test_map_invariants():
    with pytest.raises(SchemaError):
        SpatialTemporalMap(np.zeros((4, 2, 90)), 30.0)
    with pytest.raises(DataError):
        SpatialTemporalMap(np.zeros((4, 3, 90)), 0.0)
    with pytest.raises(TooShortError):
        SpatialTemporalMap(np.zeros((4, 3, 59)), 30.0)
    m = SpatialTemporalMap(np.zeros((4, 3, 60)), 30.0)
    assert not m.data.flags.writeable


def test_color_triple_range():
    assert ColorTriple(0, 128, 255).as_array().tolist() == [0, 128, 255]
    with pytest.raises(DataError):
        ColorTriple(-1, 0, 0)
    with pytest.raises(DataError):
        ColorTriple(0, float("nan"), 0)


# --- color conversion ----------------------------------------------------------


@pytest.mark.parametrize(
    "rgb, yuv",
    [
        ((1, 1, 1), (1.0, 0.0, 0.0)),
        ((0, 0, 0), (0.0, 0.0, 0.0)),
        # 255 * first column of the matrix, evaluated by hand
        ((255, 0, 0), (76.245, -43.095, 127.5)),
    ],
)
def test_csc_examples(rgb, yuv):
    out = csc_modified_yuv(_map_from_triple(rgb))
    assert out.color_space == MYUV
    np.testing.assert_allclose(out.data[0, :, 0], yuv, atol=1e-9)


def test_csc_rejects_myuv():
    m = csc_modified_yuv(_map_from_triple((10, 20, 30)))
    with pytest.raises(StateError):
        csc_modified_yuv(m)


def test_csc_matrix_literal():
    # rows of the conversion as published, typed independently of the module constant
    expected = [[0.299, 0.587, 0.114], [-0.169, -0.331, 0.5], [0.5, -0.419, -0.081]]
    np.testing.assert_array_equal(MYUV_MATRIX, expected)


triples = arrays(np.float64, (5, 3), elements=st.floats(0, 100))


@given(triples, triples, st.floats(0, 1), st.floats(0, 1))
def test_csc_linear(x, y, a, b):
    def f(v):
        data = np.ascontiguousarray(v.T[None])  # (1, 3, 5)
        return csc_modified_yuv(SpatialTemporalMap(data, 1.0)).data

    np.testing.assert_allclose(f(a * x + b * y), a * f(x) + b * f(y), atol=1e-9)


# --- temporal normalization ------------------------------------------------------


def test_normalize_examples():
    np.testing.assert_allclose(normalize_traces([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(normalize_traces([5.0, 5.0, 5.0, 5.0]), [0.0, 0.0, 0.0, 0.0])
    # a large constant is still constant despite float round-off
    np.testing.assert_array_equal(normalize_traces(np.full(900, 123.456)), np.zeros(900))


@given(arrays(np.float64, (2, 3, 40), elements=st.floats(-1e3, 1e3)))
def test_normalize_moments_and_idempotence(data):
    m = SpatialTemporalMap(data, 10.0, MYUV)
    out = temporal_normalize(m).data
    assert out.shape == data.shape
    flat = data.std(axis=-1) <= 1e-12 * np.maximum(np.abs(data.mean(axis=-1)), 1.0)
    live = ~flat
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-9)
    np.testing.assert_allclose(out.std(axis=-1, ddof=1)[live], 1.0, atol=1e-9)
    assert np.all(out[flat] == 0.0)
    np.testing.assert_allclose(normalize_traces(out), out, atol=1e-9)


# --- white noise -------------------------------------------------------------------


def _normalized(rng, shape=(4, 3, 900)):
    return temporal_normalize(SpatialTemporalMap(rng.normal(size=shape), 30.0, MYUV))


def test_noise_zero_sigma_identity(rng):
    m = _normalized(rng)
    np.testing.assert_array_equal(add_white_noise(m, 0.0, 1).data, m.data)


def test_noise_deterministic(rng):
    m = _normalized(rng)
    a = add_white_noise(m, 0.1, 42).data
    b = add_white_noise(m, 0.1, 42).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, add_white_noise(m, 0.1, 43).data)


def test_noise_negative_sigma(rng):
    with pytest.raises(ValueError):
        add_white_noise(_normalized(rng), -0.1, 0)


def test_noise_empirical_std(rng):
    m = _normalized(rng)
    out = add_white_noise(m, 0.1, 7)
    std = (out.data - m.data).std(axis=-1, ddof=1)
    assert std.shape == (4, 3)
    assert np.all((std >= 0.08) & (std <= 0.12))


def test_preprocess_pipeline(rng):
    m = SpatialTemporalMap(rng.uniform(50, 200, (4, 3, 90)), 30.0)
    out = preprocess(m)
    assert out.color_space == MYUV and out.data.shape == m.data.shape
    expected = normalize_traces(np.einsum("cd,idt->ict", MYUV_MATRIX, m.data))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
