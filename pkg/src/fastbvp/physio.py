"""Heart rate, inter-beat intervals, HRV and evaluation metrics from BVP waveforms.

Also hosts the unsupervised GREEN / CHROM / POS pulse extractors used as
comparison baselines.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import percentile_filter

from .errors import (
    CorrelationUndefinedError,
    DegenerateSignalError,
    InsufficientSignalError,
    ShapeError,
    StateError,
)
from .spectral import PULSE_BAND, bandpass
from .srrn import BvpSignal
from .stmap import RGB, SpatialTemporalMap

MIN_PEAK_GAP_S = 0.25
THRESHOLD_WINDOW_S = 2.0
THRESHOLD_PERCENTILE = 60.0
HRV_RESAMPLE_HZ = 4.0
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
HRV_MIN_SECONDS = 30.0
#: IBI coefficient of variation above which a peak train is flagged unstable.
MAX_STABLE_IBI_CV = 0.15


@dataclass(frozen=True)
class PeakList:
    """Systolic peak sample indices; ``times`` optionally refines them (seconds)."""

    indices: np.ndarray
    sample_rate: float
    times: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        object.__setattr__(self, "indices", idx)
        if np.any(np.diff(idx) <= 0):
            raise ValueError("peak indices must be strictly increasing")
        if self.times is not None:
            object.__setattr__(self, "times", np.asarray(self.times, dtype=float))

    def __len__(self):
        return len(self.indices)

    def beat_times(self) -> np.ndarray:
        if self.times is not None:
            return self.times
        return self.indices / self.sample_rate

    def ibi(self) -> np.ndarray:
        return np.diff(self.beat_times())

    @classmethod
    def from_ibi(cls, ibi_seconds, sample_rate: float, start: float = 0.0) -> "PeakList":
        """Peak train realising a given IBI series (sample-rounded indices, exact times)."""
        times = start + np.concatenate([[0.0], np.cumsum(ibi_seconds)])
        idx = np.round(times * sample_rate).astype(int)
        return cls(idx, sample_rate, times)


@dataclass(frozen=True)
class HrvReport:
    lf_nu: float
    hf_nu: float
    lf_hf_ratio: float
    lf_power: float
    hf_power: float
    short_warning: bool = False


@dataclass(frozen=True)
class MetricReport:
    std: float
    mae: float
    rmse: float
    r: float

    def as_dict(self) -> dict:
        return asdict(self)


def _local_maxima(x: np.ndarray) -> np.ndarray:
    # plateau-tolerant: rising strictly into i, not rising out of it
    left = x[1:-1] > x[:-2]
    right = x[1:-1] >= x[2:]
    return np.flatnonzero(left & right) + 1


def _enforce_separation(idx: np.ndarray, heights: np.ndarray, min_gap: int) -> np.ndarray:
    keep = np.zeros(len(idx), dtype=bool)
    taken = np.zeros(len(idx), dtype=bool)
    for j in np.argsort(-heights, kind="stable"):
        if taken[j]:
            continue
        keep[j] = True
        lo = np.searchsorted(idx, idx[j] - min_gap + 1)
        hi = np.searchsorted(idx, idx[j] + min_gap)  # a neighbour exactly min_gap away is allowed
        taken[lo:hi] = True
    return idx[keep]


def _refine(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Parabolic sub-sample offset of each interior maximum, in samples."""
    out = idx.astype(float)
    inner = (idx > 0) & (idx < len(x) - 1)
    i = idx[inner]
    a, b, c = x[i - 1], x[i], x[i + 1]
    denom = a - 2 * b + c
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom < 0, 0.5 * (a - c) / denom, 0.0)
    out[inner] = i + np.clip(delta, -0.5, 0.5)
    return out


def detect_peaks(bvp: BvpSignal) -> PeakList:
    """Local maxima above the running 60th percentile (2 s window), >= 0.25 s apart."""
    x = np.asarray(bvp.samples, dtype=float)
    fs = bvp.sample_rate
    if len(x) < 2 * fs:
        raise InsufficientSignalError(f"need at least 2 s of signal, got {len(x) / fs:.2f} s")
    window = max(3, int(round(THRESHOLD_WINDOW_S * fs)) | 1)
    threshold = percentile_filter(x, THRESHOLD_PERCENTILE, size=window, mode="reflect")
    cand = _local_maxima(x)
    cand = cand[x[cand] > threshold[cand]]
    min_gap = int(np.ceil(MIN_PEAK_GAP_S * fs))
    idx = _enforce_separation(cand, x[cand], min_gap)
    if len(idx) < 2:
        raise InsufficientSignalError(f"found {len(idx)} peak(s); need at least 2")
    return PeakList(idx, fs, _refine(x, idx) / fs)


def estimate_hr(peaks: PeakList) -> float:
    """Average heart rate in bpm: ``60 / mean(IBI)``."""
    if len(peaks) < 2:
        raise InsufficientSignalError("need at least 2 peaks to estimate HR")
    return 60.0 / float(np.mean(peaks.ibi()))


def ibi_cv(peaks: PeakList) -> float:
    ibi = peaks.ibi()
    return float(np.std(ibi) / np.mean(ibi))


def is_unstable(peaks: PeakList, max_cv: float = MAX_STABLE_IBI_CV) -> bool:
    """True when the IBI series is too irregular to trust the HR estimate."""
    return len(peaks) < 3 or ibi_cv(peaks) > max_cv


def _band_power(freqs, psd, lo, hi):
    sel = (freqs >= lo) & (freqs < hi)
    if not sel.any():
        return 0.0
    df = freqs[1] - freqs[0]
    return float(psd[sel].sum() * df)


def hrv_spectral(peaks: PeakList) -> HrvReport:
    """LF/HF powers of the IBI series resampled at 4 Hz (Hann-windowed periodogram)."""
    if len(peaks) < 4:
        raise InsufficientSignalError("need at least 4 peaks for HRV")
    t = peaks.beat_times()
    ibi = np.diff(t)
    beat_t = t[1:]
    grid = np.arange(beat_t[0], beat_t[-1], 1.0 / HRV_RESAMPLE_HZ)
    if len(grid) < 8:
        raise InsufficientSignalError("IBI series too short for a spectrum")
    series = np.interp(grid, beat_t, ibi)
    series = series - series.mean()
    window = np.hanning(len(series))
    spec = np.fft.rfft(series * window)
    psd = (np.abs(spec) ** 2) / (HRV_RESAMPLE_HZ * np.sum(window**2))
    psd[1:] *= 2.0
    freqs = np.fft.rfftfreq(len(series), 1.0 / HRV_RESAMPLE_HZ)
    lf = _band_power(freqs, psd, *LF_BAND)
    hf = _band_power(freqs, psd, *HF_BAND)
    total = lf + hf
    if total <= 1e-20:
        raise DegenerateSignalError("IBI series has no LF/HF power (constant rhythm)")
    lf_nu, hf_nu = lf / total, hf / total
    ratio = lf_nu / hf_nu if hf_nu > 0 else float("inf")
    # first/last beats may sit up to one IBI inside the clip edges
    short = (t[-1] - t[0]) + 2.0 * float(np.mean(ibi)) < HRV_MIN_SECONDS
    return HrvReport(lf_nu, hf_nu, ratio, lf, hf, short)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if den == 0:
        raise CorrelationUndefinedError("correlation undefined for constant input")
    return float((da * db).sum() / den)


def metrics(pred_hr, true_hr, *, allow_undefined_r: bool = False) -> MetricReport:
    """Std (population), MAE, RMSE of ``pred - true`` and Pearson r."""
    pred = np.asarray(pred_hr, dtype=float)
    true = np.asarray(true_hr, dtype=float)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"prediction/truth shapes differ: {pred.shape} vs {true.shape}")
    if len(pred) == 0:
        raise ShapeError("metrics need at least one entry")
    err = pred - true
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    std = float(np.std(err))
    try:
        if len(pred) < 2:
            raise CorrelationUndefinedError("correlation needs at least 2 entries")
        r = pearson(pred, true)
    except CorrelationUndefinedError:
        if not allow_undefined_r:
            raise
        r = float("nan")
    return MetricReport(std, mae, rmse, r)


# --- baselines -------------------------------------------------------------

GREEN = "GREEN"
CHROM = "CHROM"
POS = "POS"
BASELINES = (GREEN, CHROM, POS)
WINDOW_S = 1.6


def _mean_rgb(stmap: SpatialTemporalMap) -> np.ndarray:
    """Region-averaged (3, T) RGB trace."""
    return stmap.data.mean(axis=0)


def _chrom(rgb: np.ndarray, fs: float) -> np.ndarray:
    n = rgb.shape[1]
    mean = rgb.mean(axis=1, keepdims=True)
    norm = rgb / np.where(mean == 0, 1.0, mean) - 1.0
    xf = bandpass(3.0 * norm[0] - 2.0 * norm[1], fs)
    yf = bandpass(1.5 * norm[0] + norm[1] - 1.5 * norm[2], fs)
    win = min(n, max(32, int(WINDOW_S * fs)))
    win += win % 2
    hop = win // 2
    hann = np.hanning(win)
    out = np.zeros(n)
    starts = list(range(0, n - win + 1, hop))
    if starts[-1] != n - win:
        starts.append(n - win)
    for start in starts:
        xw, yw = xf[start : start + win], yf[start : start + win]
        sy = np.std(yw)
        alpha = np.std(xw) / sy if sy > 0 else 0.0
        s = xw - alpha * yw
        out[start : start + win] += hann * (s - s.mean())
    return out


def _pos(rgb: np.ndarray, fs: float) -> np.ndarray:
    n = rgb.shape[1]
    win = min(n, int(np.ceil(WINDOW_S * fs)))
    proj = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])
    out = np.zeros(n)
    for start in range(0, n - win + 1):
        seg = rgb[:, start : start + win]
        mean = seg.mean(axis=1, keepdims=True)
        cn = seg / np.where(mean == 0, 1.0, mean)
        s = proj @ cn
        s2 = np.std(s[1])
        h = s[0] + (np.std(s[0]) / s2 if s2 > 0 else 0.0) * s[1]
        out[start : start + win] += h - h.mean()
    return out


def baseline_extract(stmap: SpatialTemporalMap, method: str) -> BvpSignal:
    """Unsupervised pulse extraction from an RGB map, band-limited to 0.7-4 Hz."""
    if stmap.color_space != RGB:
        raise StateError(f"baselines need an RGB map, got {stmap.color_space}")
    fs = stmap.sample_rate
    rgb = _mean_rgb(stmap)
    method = method.upper()
    if method == GREEN:
        g = rgb[1]
        t = np.arange(len(g))
        raw = g - np.polyval(np.polyfit(t, g, 1), t)
    elif method == CHROM:
        raw = _chrom(rgb, fs)
    elif method == POS:
        raw = _pos(rgb, fs)
    else:
        raise ValueError(f"unknown baseline {method!r}; choose from {BASELINES}")
    return BvpSignal(bandpass(raw, fs, PULSE_BAND), fs)


# --- reports ---------------------------------------------------------------


def physio_report(bvp: BvpSignal, *, band_limit: bool = True) -> dict:
    """HR/IBI/HRV summary of a waveform, as a JSON-ready dict.

    HRV fields are ``None`` when the spectrum cannot be formed; clips shorter
    than 30 s carry ``hrv_warning: true``.
    """
    x = bandpass(bvp.samples, bvp.sample_rate) if band_limit else bvp.samples
    sig = BvpSignal(x, bvp.sample_rate)
    report = {
        "sample_rate": bvp.sample_rate,
        "duration_s": bvp.duration,
        "hr_bpm": None,
        "hr_unstable": True,
        "n_peaks": 0,
        "ibi_s": [],
        "lf_nu": None,
        "hf_nu": None,
        "lf_hf_ratio": None,
        "hrv_warning": bool(bvp.duration < HRV_MIN_SECONDS),
    }
    try:
        peaks = detect_peaks(sig)
    except InsufficientSignalError:
        return report
    report.update(
        hr_bpm=estimate_hr(peaks),
        hr_unstable=bool(is_unstable(peaks)),
        n_peaks=len(peaks),
        ibi_s=[float(v) for v in peaks.ibi()],
    )
    try:
        hrv = hrv_spectral(peaks)
    except (InsufficientSignalError, DegenerateSignalError):
        report["hrv_warning"] = True
        return report
    ratio = hrv.lf_hf_ratio if np.isfinite(hrv.lf_hf_ratio) else None
    report.update(lf_nu=hrv.lf_nu, hf_nu=hrv.hf_nu, lf_hf_ratio=ratio)
    report["hrv_warning"] = bool(report["hrv_warning"] or hrv.short_warning)
    return report


def hr_from_bvp(bvp: BvpSignal, *, band_limit: bool = True) -> float:
    """Band-limit, detect peaks, average HR. Raises if fewer than 2 peaks."""
    x = bandpass(bvp.samples, bvp.sample_rate) if band_limit else bvp.samples
    return estimate_hr(detect_peaks(BvpSignal(x, bvp.sample_rate)))
