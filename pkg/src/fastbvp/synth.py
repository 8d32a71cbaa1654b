"""Synthetic ground-truthed rPPG corpora.

A pulse waveform with a known rate (and optional rhythm modulation) is
embedded into every region/channel trace of an RGB spatial-temporal map on
top of a skin-tone baseline, a slow illumination drift and white sensor noise.

Seeds: sample ``i`` of a corpus with master seed ``s`` draws everything from
``np.random.SeedSequence(s, spawn_key=(i,))``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .srrn import BvpSignal
from .stmap import RGB, SpatialTemporalMap, load_stmap, save_stmap
from .train import TrainSample

CORPUS_FORMAT = "fastbvp-corpus/1"
SKIN_RGB = (170.0, 120.0, 95.0)
#: Relative pulse strength per channel (R, G, B); strongest on green.
CHANNEL_GAINS = (0.3, 1.0, 0.6)
HARMONIC_PHASES = (0.0, 0.8, 1.6)


@dataclass(frozen=True)
class SynthSpec:
    hr_range: tuple = (50.0, 150.0)
    hrv_modulation: tuple = (0.1, 0.0)  # (frequency Hz, depth s)
    pulse_harmonics: tuple = (1.0, 0.4, 0.15)
    illumination_drift: tuple = (2.0, 8.0)  # (amplitude in intensity units, shortest period s)
    noise_sigma: float = 0.1
    clip_seconds: float = 30.0
    sample_rate: float = 30.0
    count: int = 1
    seed: int = 0
    regions: int = 4
    pulse_amplitude: float = 0.25  # G-channel pulse std, intensity units

    def __post_init__(self):
        for name in ("hr_range", "hrv_modulation", "pulse_harmonics", "illumination_drift"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        lo, hi = self.hr_range
        if not (40.0 <= lo <= hi <= 240.0):
            raise ConfigError(f"hr_range {self.hr_range} must lie within [40, 240] bpm")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.hrv_modulation[1] < 0 or self.hrv_modulation[1] >= 60.0 / hi:
            raise ConfigError("HRV modulation depth must be non-negative and below the shortest mean IBI")
        if self.noise_sigma < 0 or self.pulse_amplitude < 0:
            raise ConfigError("noise_sigma and pulse_amplitude must be non-negative")
        if self.illumination_drift[1] <= 1.0 / 0.7:
            raise ConfigError("illumination drift timescale must keep the drift below 0.7 Hz")
        if not self.pulse_harmonics or self.pulse_harmonics[0] == 0:
            raise ConfigError("the fundamental harmonic amplitude must be non-zero")
        if self.clip_seconds <= 0 or self.sample_rate <= 0 or self.regions < 1:
            raise ConfigError("clip_seconds, sample_rate and regions must be positive")

    @property
    def frames(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**doc)


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(index,))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synth_bvp(spec: SynthSpec, hr: float, seed=None) -> BvpSignal:
    """Quasi-periodic pulse at ``hr`` bpm with harmonics and period modulation."""
    lo, hi = spec.hr_range
    if not (lo - 1e-9 <= hr <= hi + 1e-9):
        raise ValueError(f"hr {hr} outside spec range [{lo}, {hi}]")
    rng = _rng(spec.seed if seed is None else seed)
    fs, n = spec.sample_rate, spec.frames
    t = np.arange(n) / fs
    f_mod, depth = spec.hrv_modulation
    theta0 = rng.uniform(0, 2 * np.pi)
    mod_phase = rng.uniform(0, 2 * np.pi)
    period = 60.0 / hr + depth * np.sin(2 * np.pi * f_mod * t + mod_phase)
    # integrate the instantaneous frequency; trapezoid keeps the no-modulation case exact
    inst = 1.0 / period
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(0.5 * (inst[1:] + inst[:-1]) / fs)]) + theta0
    x = np.zeros(n)
    for h, (amp, psi) in enumerate(zip(spec.pulse_harmonics, HARMONIC_PHASES + (0.0,) * 16), start=1):
        if amp:
            x += amp * np.cos(h * phase - psi)
    return BvpSignal(x, fs)


def _drift(spec: SynthSpec, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    amplitude, timescale = spec.illumination_drift
    out = np.zeros_like(t)
    if amplitude == 0:
        return out
    for scale in (1.0, 2.5):
        f = rng.uniform(0.25, 1.0) / (timescale * scale)
        out += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / scale
    return amplitude * out


def synth_stmap(bvp: BvpSignal, spec: SynthSpec, seed=None, hr: float | None = None) -> TrainSample:
    """Embed ``bvp`` in an RGB map: baseline + gain*pulse + drift + noise per trace."""
    rng = _rng(spec.seed if seed is None else seed)
    fs = bvp.sample_rate
    n = len(bvp)
    t = np.arange(n) / fs
    pulse = bvp.samples - bvp.samples.mean()
    sd = pulse.std()
    pulse = pulse / sd if sd > 0 else pulse
    base = np.array(SKIN_RGB)
    gains = np.array(CHANNEL_GAINS)
    drift = _drift(spec, t, rng)  # shared illumination change, scaled per channel by reflectance
    data = np.empty((spec.regions, 3, n))
    for i in range(spec.regions):
        region_base = base + rng.normal(0.0, 8.0, 3)
        strength = rng.uniform(0.7, 1.3)
        for c in range(3):
            data[i, c] = (
                region_base[c]
                + spec.pulse_amplitude * strength * gains[c] * pulse
                + drift * region_base[c] / base.mean()
            )
    if spec.noise_sigma > 0:
        data += rng.normal(0.0, spec.noise_sigma, data.shape)
    np.clip(data, 0.0, 255.0, out=data)
    if hr is None:
        hr = float(np.mean(spec.hr_range))
    return TrainSample(SpatialTemporalMap(data, fs, RGB), BvpSignal(pulse, fs), float(hr))


def make_sample(spec: SynthSpec, index: int) -> TrainSample:
    rng = np.random.default_rng(sample_seed(spec.seed, index))
    lo, hi = spec.hr_range
    hr = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    bvp = synth_bvp(spec, hr, rng)
    return synth_stmap(bvp, spec, rng, hr=hr)


def generate(spec: SynthSpec) -> list[TrainSample]:
    """In-memory corpus, identical to what :func:`build_corpus` writes."""
    return [make_sample(spec, i) for i in range(spec.count)]


def sample_id(index: int) -> str:
    return f"s{index:05d}"


def build_corpus(spec: SynthSpec, out_dir) -> Path:
    """Write ``<id>.csv``, ``<id>.truth.json`` per sample and ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(spec.count):
            sample = make_sample(spec, i)
            sid = sample_id(i)
            save_stmap(sample.map, out / f"{sid}.csv")
            truth = {
                "id": sid,
                "hr_bpm": sample.reference_hr,
                "sample_rate": sample.map.sample_rate,
                "bvp": [float(v) for v in sample.target_bvp.samples],
            }
            (out / f"{sid}.truth.json").write_text(json.dumps(truth, sort_keys=True), encoding="utf-8")
            entries.append({"id": sid, "seed_spawn_key": [i], "hr_bpm": sample.reference_hr})
        manifest = {
            "format": CORPUS_FORMAT,
            "spec": spec.to_dict(),
            "seed_rule": "numpy SeedSequence(spec.seed, spawn_key=(index,))",
            "channel_gains": list(CHANNEL_GAINS),
            "skin_rgb": list(SKIN_RGB),
            "samples": entries,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    return out


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != CORPUS_FORMAT:
        raise ConfigError(f"{path}: unsupported corpus format {manifest.get('format')!r}")
    return manifest


def load_corpus(corpus_dir) -> list[TrainSample]:
    corpus_dir = Path(corpus_dir)
    manifest = read_manifest(corpus_dir)
    fs = float(manifest["spec"]["sample_rate"])
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        stmap = load_stmap(corpus_dir / f"{sid}.csv", fs)
        truth = json.loads((corpus_dir / f"{sid}.truth.json").read_text(encoding="utf-8"))
        samples.append(TrainSample(stmap, BvpSignal(np.array(truth["bvp"]), fs), float(truth["hr_bpm"])))
    return samples
