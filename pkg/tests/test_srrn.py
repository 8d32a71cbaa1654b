import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastbvp import nn
from fastbvp.errors import ConfigError, ShapeError
from fastbvp.spectral import DEFAULT_BANDS, decompose
from fastbvp.srrn import (
    SrrnConfig,
    SrrnModel,
    Ssa,
    Tmsc,
    budget,
    count_flops,
    count_params,
    default_config_path,
    init_step_params,
    load_config,
    load_model,
    save_model,
    srrn_forward,
    ssa_forward,
    tmsc_forward,
)
from fastbvp.stmap import preprocess

from conftest import sinusoid_map
from gradcases import full_model_report


# --- TMSC -----------------------------------------------------------------------


def tmsc_params(in_ch, width, seed=0):
    return init_step_params(Tmsc("tmsc", in_ch, width), seed)


def test_tmsc_length_and_channels(rng):
    y = tmsc_forward(rng.standard_normal((8, 225)), tmsc_params(8, 4))
    assert y.shape == (12, 225)


def test_tmsc_zero_weights_give_zero(rng):
    params = {k: np.zeros_like(v) for k, v in tmsc_params(8, 4).items()}
    np.testing.assert_array_equal(tmsc_forward(rng.standard_normal((8, 50)), params), 0.0)


def test_tmsc_parameter_count():
    step = Tmsc("tmsc", 8, 4)
    assert sum(s.n_params() for s in step.layer_specs()) == 8 * 4 * (3 + 5 + 7) + 12 == 492
    assert sum(v.size for v in tmsc_params(8, 4).values()) == 492


def test_tmsc_branches_are_same_padded_convs(rng):
    # each branch equals the corresponding same-padded cross-correlation, then ReLU on the concatenation
    from scipy.signal import correlate

    x = rng.standard_normal((2, 30))
    params = tmsc_params(2, 1, seed=3)
    y = tmsc_forward(x, params)
    for i, k in enumerate((3, 5, 7)):
        w, b = params[f"tmsc.k{k}.weight"][0], params[f"tmsc.k{k}.bias"][0]
        ref = correlate(x[0], w[0], mode="same") + correlate(x[1], w[1], mode="same") + b
        np.testing.assert_allclose(y[i], np.maximum(ref, 0.0), atol=1e-12)


def test_tmsc_shape_error(rng):
    with pytest.raises(ShapeError):
        tmsc_forward(rng.standard_normal((3, 20)), tmsc_params(8, 4))


# --- SSA -------------------------------------------------------------------------


def ssa_params(channels, hidden=4, seed=0, segments=5):
    return init_step_params(Ssa("ssa", channels, segments, hidden), seed)


def test_ssa_periodic_feature_gives_uniform_attention(rng):
    seg = rng.standard_normal((3, 30))
    x = np.tile(seg, (1, 5))
    y, w = ssa_forward(x, ssa_params(3), segments=5, return_weights=True)
    assert y.shape == x.shape
    np.testing.assert_allclose(w, 0.2, atol=1e-6)


def test_ssa_noisy_segment_receives_least_attention():
    wins = 0
    for trial in range(100):
        g = np.random.default_rng(trial)
        t = np.arange(150)
        # 1 Hz-like periodic feature with 5 whole cycles per segment, mild noise
        x = np.sin(2 * np.pi * t / 6.0 + g.uniform(0, 2 * np.pi)) + 0.05 * g.standard_normal(150)
        bad = int(g.integers(0, 5))
        x[bad * 30 : (bad + 1) * 30] = 5.0 * g.standard_normal(30)
        _, w = ssa_forward(x[None], ssa_params(1), segments=5, return_weights=True)
        w = w[0]
        off = w - np.diag(np.diag(w))
        received = off.sum(axis=0) / 4.0  # mean weight received from the other segments
        wins += int(np.argmin(received) == bad)
    assert wins == 100


def test_ssa_rows_sum_to_one(rng):
    _, w = ssa_forward(rng.standard_normal((2, 4, 100)), ssa_params(4), segments=5, return_weights=True)
    assert w.shape == (2, 4, 5, 5)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_ssa_single_segment(rng):
    x = rng.standard_normal((3, 40))
    params = ssa_params(3, segments=1)
    y, w = ssa_forward(x, params, segments=1, return_weights=True)
    np.testing.assert_array_equal(w, 1.0)
    # the gain is fixed by the representator alone: any input sees the same per-channel gain
    x2 = rng.standard_normal((3, 40))
    y2 = ssa_forward(x2, params, segments=1)
    np.testing.assert_allclose(y / x, y2 / x2, rtol=1e-12)


def test_ssa_gain_range(rng):
    x = rng.standard_normal((3, 100))
    y = ssa_forward(x, ssa_params(3, seed=5), segments=5)
    ratio = (y / x).reshape(3, 5, 20)
    assert np.all((ratio > 0) & (ratio < 2))
    np.testing.assert_allclose(ratio, np.broadcast_to(ratio[..., :1], ratio.shape), rtol=1e-12)  # constant within a segment


def test_ssa_non_divisible_is_config_error(rng):
    with pytest.raises(ConfigError):
        ssa_forward(rng.standard_normal((3, 101)), ssa_params(3), segments=5)


# --- full network --------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return SrrnModel(SrrnConfig(), seed=0)


def test_default_config_file_matches_dataclass():
    assert load_config(default_config_path()) == SrrnConfig()


@pytest.mark.parametrize("frames", [450, 900])
def test_output_length_matches_input(model, frames):
    stmap = preprocess(sinusoid_map(frames=frames))
    out = srrn_forward(stmap, decompose(stmap, DEFAULT_BANDS), model)
    assert len(out) == frames
    assert out.sample_rate == stmap.sample_rate
    assert np.all(np.isfinite(out.samples))


@given(st.integers(1, 20))
def test_output_length_property(multiple):
    cfg = SrrnConfig(regions=1, n_bands=0, block_widths=(2, 2, 2, 2), tmsc_widths=(1, 1, 1, 1),
                     deconv_widths=(2, 2, 2), ssa_hidden=1)
    frames = 45 * multiple
    m = SrrnModel(cfg, seed=multiple)
    assert m.forward(np.random.default_rng(0).standard_normal((1, 1, 3, frames))).shape == (1, frames)


def test_invalid_lengths(model):
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 4, 15, 451)))
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 4, 15, 18)))  # divisible by 9, not by the SSA segmentation
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 3, 15, 450)))


def test_padded_length():
    cfg = SrrnConfig()
    assert cfg.padded_length(450) == 450
    assert cfg.padded_length(451) == 495
    for t in (1, 100, 899, 901):
        p = cfg.padded_length(t)
        cfg.validate_length(p)
        assert p >= t and p - t < 45


def test_zero_input_constant_output():
    # with stride-1 reconstruction and no segment attention, the interior of the
    # response to zeros is a constant produced by the biases alone
    cfg = SrrnConfig(pool_factors=(1, 1, 1, 1), deconv_strides=(1, 1, 1), use_ssa=False)
    m = SrrnModel(cfg, seed=0)
    y = m.forward(np.zeros((2, 4, 15, 200)))
    margin = 4 * (1 + 3) + 3  # receptive half-width: 4 x (conv3 + tmsc7) + 3 deconvs
    interior = y[:, margin:-margin]
    np.testing.assert_allclose(interior, interior[0, 0], atol=1e-12)
    assert abs(interior[0, 0]) > 0  # bias propagation, not trivially zero


def test_infer_forward_is_deterministic(model, rng):
    x = rng.standard_normal((2, 4, 15, 450))
    np.testing.assert_array_equal(model.forward(x), model.forward(x.copy()))


def test_band_count_mismatch(model):
    stmap = preprocess(sinusoid_map(frames=450))
    with pytest.raises(ConfigError):
        srrn_forward(stmap, decompose(stmap, DEFAULT_BANDS[:2]), model)
    with pytest.raises(ConfigError):
        srrn_forward(stmap, None, model)


def test_ssa_gains_shapes(model, rng):
    gains = model.ssa_gains(rng.standard_normal((2, 4, 15, 450)))
    assert sorted(gains) == ["rec1.ssa", "rec2.ssa", "rec3.ssa"]
    for g in gains.values():
        assert g.shape == (2, 4, 16, 5)
        assert np.all((g > 0) & (g < 2))


def test_backward_requires_train_forward(model):
    model.forward(np.zeros((1, 4, 15, 450)))
    with pytest.raises(nn.StateError):
        model.backward(np.zeros((1, 450)))


def test_full_model_gradient_check():
    rep = full_model_report(trials=5)
    assert rep.ok, rep.errors
    assert rep.max_error <= 1e-5
    learnable = set(SrrnModel(SrrnConfig()).learnable())
    assert set(rep.errors) == learnable | {"input"}


# --- budget ---------------------------------------------------------------------------


def test_default_budget_in_range():
    cfg = SrrnConfig()
    assert 9_000 <= count_params(cfg) <= 13_000
    assert 0.5e8 <= count_flops(cfg, 900) <= 2.6e8


def test_count_params_matches_store():
    m = SrrnModel(SrrnConfig(), seed=1)
    assert count_params(m.config) == sum(m.params[k].size for k in m.learnable())


def test_single_conv_closed_form():
    spec = nn.LayerSpec(nn.CONV1D, "c", 5, 7, kernel=3, padding=1)
    assert spec.n_params() == 3 * 5 * 7 + 7
    assert 2 * spec.macs(100) == 2 * 3 * 5 * 7 * 100


def test_doubling_widths_quadruples_conv_params():
    base = SrrnConfig(n_bands=0, regions=1)
    wide = SrrnConfig(n_bands=0, regions=1, block_widths=(32, 32, 16, 16), tmsc_widths=(16, 16, 8, 8),
                      deconv_widths=(32, 32, 32), ssa_hidden=8)
    ratios = []
    for a, b in zip(SrrnModel(base).layer_specs(), SrrnModel(wide).layer_specs()):
        if a.kind == nn.CONV1D and a.name.startswith("ref") and a.name != "ref1.conv":
            ratios.append(b.param_shapes()["weight"][0] * b.param_shapes()["weight"][1]
                          / (a.param_shapes()["weight"][0] * a.param_shapes()["weight"][1]))
    assert ratios and all(r == 4 for r in ratios)
    assert 3.5 < count_params(wide) / count_params(base) <= 4.0


def test_halving_length_halves_flops():
    cfg = SrrnConfig()
    full, half = budget(cfg, 900), budget(cfg, 450)
    for a, b in zip(full.layers, half.layers):
        assert a.name == b.name
        if a.name.endswith("conv") or ".tmsc" in a.name or a.name.endswith("deconv"):
            assert a.flops == pytest.approx(2 * b.flops)
    # the per-segment DCT in SSA costs L * m with m = L / S, so the total is slightly superlinear
    assert 2 * half.total_flops < full.total_flops < 2.6 * half.total_flops


def test_budget_accounting_identity():
    b = budget(SrrnConfig(), 900)
    assert b.total_flops == sum(l.flops for l in b.layers)
    assert b.total_params == count_params(SrrnConfig())


# --- checkpoints --------------------------------------------------------------------


def test_save_load_model_roundtrip(tmp_path, rng):
    m = SrrnModel(SrrnConfig(), seed=3)
    save_model(tmp_path / "ck", m, DEFAULT_BANDS, extra={"sample_rate": 30.0})
    loaded, bands, manifest = load_model(tmp_path / "ck")
    assert loaded.config == m.config
    assert bands == DEFAULT_BANDS
    assert manifest["sample_rate"] == 30.0
    x = rng.standard_normal((1, 4, 15, 450))
    np.testing.assert_allclose(loaded.forward(x), m.astype(np.float32).forward(x), rtol=1e-4, atol=1e-5)


def test_load_model_missing_config(tmp_path):
    m = SrrnModel(SrrnConfig(), seed=3)
    save_model(tmp_path / "ck", m, DEFAULT_BANDS)
    path = tmp_path / "ck" / "manifest.json"
    doc = json.loads(path.read_text())
    del doc["model_config"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_model(tmp_path / "ck")


def test_params_must_match_config():
    m = SrrnModel(SrrnConfig(), seed=0)
    params = dict(m.params)
    params.pop("head.bias")
    with pytest.raises(ConfigError):
        SrrnModel(SrrnConfig(), params)


def test_config_validation():
    with pytest.raises(ConfigError):
        SrrnConfig(tmsc_kernels=(3, 5, 9))
    with pytest.raises(ConfigError):
        SrrnConfig(pool_factors=(2, 2, 2, 2))  # deconv strides would not undo it
    with pytest.raises(ConfigError):
        SrrnConfig.from_dict({"width": 3})
