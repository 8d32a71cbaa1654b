"""Orthonormal DCT-II/DCT-III transforms and multi-band decomposition.

Each region/channel trace is transformed with the DCT, the coefficients
outside a frequency band are zeroed, and the result is brought back to the
time domain. Doing that for ``K`` disjoint bands splits every trace into
``K`` band-limited components whose sum is the band-covered part of the trace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateError
from .stmap import MYUV, SpatialTemporalMap


@lru_cache(maxsize=32)
def _dct_matrix(n: int) -> np.ndarray:
    # D[u, k] = s_u * cos(pi * (2k + 1) * u / (2n)), s_0 = sqrt(1/n), s_u = sqrt(2/n)
    k = np.arange(n)
    u = k[:, None]
    mat = np.cos(np.pi * (2 * k[None, :] + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    mat.setflags(write=False)
    return mat


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; ``D @ x`` transforms, ``D.T @ c`` inverts."""
    if n < 1:
        raise ValueError("n must be positive")
    return _dct_matrix(int(n))


def dct_along_last(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ dct_matrix(x.shape[-1]).T


def idct_along_last(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return c @ dct_matrix(c.shape[-1])


@dataclass(frozen=True)
class Spectrum:
    coeffs: np.ndarray
    sample_rate: float

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 1:
            raise ValueError("spectrum coefficients must be one-dimensional")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("spectrum contains non-finite coefficients")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def bin_frequencies(self) -> np.ndarray:
        return bin_frequencies(len(self.coeffs), self.sample_rate)


def bin_frequencies(n: int, sample_rate: float) -> np.ndarray:
    """Frequency in Hz associated with DCT bin ``u``: ``u * fs / (2 n)``."""
    return np.arange(n) * sample_rate / (2.0 * n)


@dataclass(frozen=True)
class FrequencyBand:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi):
            raise ConfigError(f"invalid band [{self.lo}, {self.hi})")

    def validate(self, sample_rate: float) -> None:
        if self.hi > sample_rate / 2.0 + 1e-12:
            raise ConfigError(f"band [{self.lo}, {self.hi}) exceeds Nyquist {sample_rate / 2.0}")

    def mask(self, n: int, sample_rate: float) -> np.ndarray:
        f = bin_frequencies(n, sample_rate)
        return (f >= self.lo) & (f < self.hi)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}


DEFAULT_BANDS = (
    FrequencyBand(0.0, 0.7),
    FrequencyBand(0.7, 1.5),
    FrequencyBand(1.5, 2.5),
    FrequencyBand(2.5, 4.0),
)

PULSE_BAND = FrequencyBand(0.7, 4.0)


def load_bands(path) -> tuple[FrequencyBand, ...]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return bands_from_dict(doc)


def bands_from_dict(doc: dict) -> tuple[FrequencyBand, ...]:
    try:
        bands = tuple(FrequencyBand(float(b["lo"]), float(b["hi"])) for b in doc["bands"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"band config needs a 'bands' list of {{lo, hi}} objects: {exc}") from None
    check_disjoint(bands)
    return bands


def bands_to_dict(bands) -> dict:
    return {"bands": [b.to_dict() for b in bands]}


def check_disjoint(bands) -> None:
    ordered = sorted(bands, key=lambda b: b.lo)
    for a, b in zip(ordered, ordered[1:]):
        if b.lo < a.hi:
            raise ConfigError(f"bands [{a.lo}, {a.hi}) and [{b.lo}, {b.hi}) overlap")


def dct2(signal, sample_rate: float) -> Spectrum:
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("dct2 needs a 1-D signal of length >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    return Spectrum(dct_along_last(x), sample_rate)


def idct2(spectrum: Spectrum) -> np.ndarray:
    return idct_along_last(spectrum.coeffs)


@dataclass(frozen=True)
class BandFilterResult:
    signal: np.ndarray
    empty: bool


def band_filter(spectrum: Spectrum, band: FrequencyBand, *, with_flag: bool = False):
    """Keep coefficients whose bin frequency lies in ``[lo, hi)``, return the time signal.

    A band that captures no bins yields zeros; pass ``with_flag=True`` to get a
    :class:`BandFilterResult` carrying that diagnostic.
    """
    band.validate(spectrum.sample_rate)
    mask = band.mask(len(spectrum.coeffs), spectrum.sample_rate)
    out = idct_along_last(np.where(mask, spectrum.coeffs, 0.0))
    if with_flag:
        return BandFilterResult(out, not mask.any())
    return out


def bandpass(x: np.ndarray, sample_rate: float, band: FrequencyBand = PULSE_BAND) -> np.ndarray:
    """Band-limit ``x`` along its last axis by DCT coefficient masking."""
    x = np.asarray(x, dtype=float)
    band.validate(sample_rate)
    mask = band.mask(x.shape[-1], sample_rate)
    return idct_along_last(dct_along_last(x) * mask)


@dataclass(frozen=True)
class MultiBandSignal:
    """``bands`` has shape (K, regions, 3, frames)."""

    bands: np.ndarray
    band_defs: tuple[FrequencyBand, ...]
    sample_rate: float

    def __post_init__(self):
        if self.bands.ndim != 4:
            raise ValueError(f"bands must be (K, regions, 3, frames), got {self.bands.shape}")
        if self.bands.shape[0] != len(self.band_defs):
            raise ValueError("band count does not match band definitions")

    @property
    def k(self) -> int:
        return len(self.band_defs)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.bands[k]

    def total(self) -> np.ndarray:
        return self.bands.sum(axis=0)


def decompose_array(data: np.ndarray, sample_rate: float, bands) -> np.ndarray:
    """Array-level decomposition: ``(..., T)`` -> ``(K, ..., T)``."""
    data = np.asarray(data, dtype=float)
    n = data.shape[-1]
    if len(bands) == 0:
        return np.zeros((0,) + data.shape)
    coeffs = dct_along_last(data)
    out = np.empty((len(bands),) + data.shape)
    for k, band in enumerate(bands):
        band.validate(sample_rate)
        out[k] = idct_along_last(coeffs * band.mask(n, sample_rate))
    return out


def decompose(stmap: SpatialTemporalMap, bands, *, require_preprocessed: bool = True) -> MultiBandSignal:
    """Split every region/channel trace of ``stmap`` into band-limited components.

    For region ``i`` the trace is transformed once, then for each band ``B_k``
    the out-of-band coefficients are zeroed and inverted, giving ``f'_{i,k}``.
    Per band the region results are stacked into the ``k``-th entry.
    """
    bands = tuple(bands)
    check_disjoint(bands)
    if require_preprocessed and stmap.color_space != MYUV:
        raise StateError("decompose expects a preprocessed (mYUV, normalized) map")
    n = stmap.frames
    masks = [b.mask(n, stmap.sample_rate) for b in bands]
    for b in bands:
        b.validate(stmap.sample_rate)
    per_region = []
    for i in range(stmap.regions):
        coeffs = dct_along_last(stmap.data[i])
        per_region.append([idct_along_last(coeffs * m) for m in masks])
    # concatenate each band's region components: (K, I, 3, T)
    out = np.stack([np.stack([per_region[i][k] for i in range(stmap.regions)]) for k in range(len(bands))]) \
        if bands else np.zeros((0,) + stmap.data.shape)
    return MultiBandSignal(out, bands, stmap.sample_rate)
