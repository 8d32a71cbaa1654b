"""Spatial-temporal maps: ingestion and preprocessing of per-region color traces.

A map holds ``I`` facial regions x 3 color channels x ``T`` frames of mean
pixel intensities. Preprocessing runs in three steps: conversion to the
modified YUV space, per-trace temporal normalization, and (during training
only) additive white noise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError, StateError, TooShortError

RGB = "RGB"
MYUV = "mYUV"

#: Rows map (R, G, B) to (Y_m, U_m, V_m).
MYUV_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.169, -0.331, 0.5],
        [0.5, -0.419, -0.081],
    ]
)

MIN_SECONDS = 2.0
DEFAULT_NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class ColorTriple:
    r: float
    g: float
    b: float

    def __post_init__(self):
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise DataError(f"{name} component is not finite: {v}")
            if not 0.0 <= v <= 255.0:
                raise DataError(f"{name} component {v} outside [0, 255]")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b], dtype=float)


@dataclass(frozen=True)
class SpatialTemporalMap:
    """``data`` has shape (regions, 3, frames)."""

    data: np.ndarray
    sample_rate: float
    color_space: str = RGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[1] != 3:
            raise SchemaError(f"map data must be (regions, 3, frames), got {data.shape}")
        if data.shape[0] < 1:
            raise SchemaError("map needs at least one region")
        if not self.sample_rate > 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise DataError("map contains non-finite values")
        if data.shape[2] < MIN_SECONDS * self.sample_rate:
            raise TooShortError(
                f"clip has {data.shape[2]} frames; need at least "
                f"{MIN_SECONDS * self.sample_rate:g} ({MIN_SECONDS:g} s at {self.sample_rate:g} Hz)"
            )
        if self.color_space not in (RGB, MYUV):
            raise StateError(f"unknown color space {self.color_space!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def regions(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def frames(self) -> int:
        return self.data.shape[2]

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate

    def with_data(self, data: np.ndarray, **changes) -> "SpatialTemporalMap":
        return replace(self, data=data, **changes)

    def crop(self, start: int, stop: int) -> "SpatialTemporalMap":
        return self.with_data(self.data[:, :, start:stop].copy())


def _header(regions: int) -> list[str]:
    cols = ["frame"]
    for i in range(1, regions + 1):
        cols += [f"r{i}_R", f"r{i}_G", f"r{i}_B"]
    return cols


def load_stmap(path, sample_rate: float) -> SpatialTemporalMap:
    """Read a map from CSV (``frame,r1_R,r1_G,r1_B,...``), tagged RGB."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such stmap file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        n_values = len(header) - 1
        if n_values < 3 or n_values % 3 != 0 or header[0].strip() != "frame":
            raise SchemaError(f"{path}: header must be 'frame' followed by 3 columns per region")
        regions = n_values // 3
        if [h.strip() for h in header] != _header(regions):
            raise SchemaError(f"{path}: unexpected column names {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=float).reshape(len(rows), n_values)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite value")
    if values.size and (values.min() < 0.0 or values.max() > 255.0):
        raise DataError(f"{path}: values outside [0, 255]")
    data = values.T.reshape(regions, 3, len(rows))
    return SpatialTemporalMap(data, sample_rate, RGB)


def save_stmap(stmap: SpatialTemporalMap, path) -> None:
    path = Path(path)
    flat = stmap.data.reshape(stmap.regions * 3, stmap.frames).T
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(stmap.regions))
        for n, row in enumerate(flat):
            writer.writerow([n] + [repr(float(v)) for v in row])


def csc_modified_yuv(stmap: SpatialTemporalMap) -> SpatialTemporalMap:
    """Convert every frame's (R, G, B) triple with the modified YUV matrix."""
    if stmap.color_space != RGB:
        raise StateError(f"expected an RGB map, got {stmap.color_space}")
    yuv = np.einsum("cd,idt->ict", MYUV_MATRIX, stmap.data)
    return stmap.with_data(yuv, color_space=MYUV)


def normalize_traces(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit sample-std along the last axis; constant traces become 0."""
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    std = x.std(axis=-1, ddof=1, keepdims=True)
    # relative tolerance so float round-off on a constant trace still counts as constant
    scale = np.maximum(np.abs(mean), 1.0)
    flat = std <= 1e-12 * scale
    out = centered / np.where(flat, 1.0, std)
    return np.where(flat, 0.0, out)


def temporal_normalize(stmap: SpatialTemporalMap) -> SpatialTemporalMap:
    return stmap.with_data(normalize_traces(stmap.data))


def add_white_noise(stmap: SpatialTemporalMap, sigma: float, seed) -> SpatialTemporalMap:
    """Add i.i.d. N(0, sigma^2) noise to every element (equal variance per channel)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return stmap.with_data(stmap.data.copy())
    rng = np.random.default_rng(seed)
    return stmap.with_data(stmap.data + rng.normal(0.0, sigma, size=stmap.data.shape))


def preprocess(stmap: SpatialTemporalMap) -> SpatialTemporalMap:
    """Color conversion followed by temporal normalization (the inference path)."""
    if stmap.color_space == RGB:
        stmap = csc_modified_yuv(stmap)
    return temporal_normalize(stmap)
