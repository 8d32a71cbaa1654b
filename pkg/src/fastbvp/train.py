"""Negative-Pearson loss, HR-group oversampling and the two-phase training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, FastBvpError, ShapeError
from .spectral import DEFAULT_BANDS, decompose_array
from .srrn import BvpSignal, SrrnModel
from .stmap import MYUV_MATRIX, RGB, SpatialTemporalMap, normalize_traces

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSample:
    map: SpatialTemporalMap
    target_bvp: BvpSignal
    reference_hr: float

    def __post_init__(self):
        if len(self.target_bvp) != self.map.frames:
            raise ShapeError("map and target BVP lengths differ")
        if self.target_bvp.sample_rate != self.map.sample_rate:
            raise ShapeError("map and target BVP sample rates differ")
        if not 40.0 <= self.reference_hr <= 240.0:
            raise DataError(f"reference HR {self.reference_hr} outside [40, 240] bpm")

    def crop(self, start: int, stop: int) -> "TrainSample":
        bvp = BvpSignal(self.target_bvp.samples[start:stop], self.target_bvp.sample_rate)
        return TrainSample(self.map.crop(start, stop), bvp, self.reference_hr)


# --- loss ------------------------------------------------------------------


def _as_array(x):
    return np.asarray(x.samples if isinstance(x, BvpSignal) else x, dtype=float)


def neg_pearson_loss(pred, target):
    """``1 - r(pred, target)`` and its gradient w.r.t. ``pred``.

    A constant prediction has r defined as 0 (loss 1) with zero gradient.
    """
    p = _as_array(pred)
    t = _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.ndim != 1 or len(p) < 3:
        raise ShapeError("neg_pearson_loss needs 1-D signals of length >= 3")
    tc = t - t.mean()
    tn = np.sqrt(tc @ tc)
    if tn == 0:
        raise DataError("target is constant")
    pc = p - p.mean()
    pn = np.sqrt(pc @ pc)
    if pn == 0:
        return 1.0, np.zeros_like(p)
    r = float(pc @ tc) / (pn * tn)
    grad = -(tc / (pn * tn) - r * pc / (pn * pn))
    return 1.0 - r, grad


def neg_pearson_batch(pred: np.ndarray, target: np.ndarray):
    """Mean loss over rows of ``(N, T)`` arrays and gradient w.r.t. ``pred``."""
    pc = pred - pred.mean(axis=1, keepdims=True)
    tc = target - target.mean(axis=1, keepdims=True)
    pn = np.sqrt((pc * pc).sum(axis=1, keepdims=True))
    tn = np.sqrt((tc * tc).sum(axis=1, keepdims=True))
    if np.any(tn == 0):
        raise DataError("target is constant")
    safe = np.where(pn == 0, 1.0, pn)
    r = (pc * tc).sum(axis=1, keepdims=True) / (safe * tn)
    r = np.where(pn == 0, 0.0, r)
    grad = -(tc / (safe * tn) - r * pc / (safe * safe))
    grad = np.where(pn == 0, 0.0, grad) / pred.shape[0]
    return float(np.mean(1.0 - r)), grad


# --- oversampling ----------------------------------------------------------


@dataclass(frozen=True)
class HrGroupScheme:
    """Groups ``[edges[g], edges[g+1])`` in bpm, each contributing ``quota[g]`` per batch."""

    group_edges: tuple
    per_group_quota: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.group_edges)
        quota = tuple(int(q) for q in self.per_group_quota)
        object.__setattr__(self, "group_edges", edges)
        object.__setattr__(self, "per_group_quota", quota)
        if len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ConfigError(f"group edges must be strictly increasing, got {edges}")
        if len(quota) != len(edges) - 1:
            raise ConfigError(f"{len(edges) - 1} groups need {len(edges) - 1} quotas, got {len(quota)}")
        if min(quota) < 1:
            raise ConfigError("every group quota must be >= 1")

    @property
    def batch_size(self) -> int:
        return sum(self.per_group_quota)

    @property
    def n_groups(self) -> int:
        return len(self.per_group_quota)

    def intervals(self):
        return list(zip(self.group_edges[:-1], self.group_edges[1:]))

    def assign(self, hrs) -> np.ndarray:
        """Group index per HR, -1 when outside every group."""
        hrs = np.asarray(hrs, dtype=float)
        g = np.searchsorted(self.group_edges, hrs, side="right") - 1
        g[(hrs < self.group_edges[0]) | (hrs >= self.group_edges[-1])] = -1
        return g

    @classmethod
    def uniform(cls, lo: float, hi: float, width: float, quota: int = 1) -> "HrGroupScheme":
        edges = np.arange(lo, hi + 1e-9, width)
        if edges[-1] < hi:
            edges = np.append(edges, hi)
        return cls(tuple(edges), (quota,) * (len(edges) - 1))

    @classmethod
    def covering(cls, hrs, batch_size: int, width: float = 20.0, lo: float = 40.0, hi: float = 180.0):
        """Default 20-bpm bins over [40, 180], trimmed to bins that hold samples.

        When the batch cannot hold one sample per bin the bin width is doubled
        until it can. Quotas are spread as evenly as possible so they sum to
        ``batch_size``.
        """
        hrs = np.asarray(hrs, dtype=float)
        if hrs.size == 0 or batch_size < 1:
            raise ConfigError("covering scheme needs HR values and a positive batch size")
        while True:
            start = min(lo, np.floor(hrs.min() / width) * width)
            stop = max(hi, np.ceil((hrs.max() + 1e-9) / width) * width)
            edges = np.arange(start, stop + 1e-9, width)
            counts = np.histogram(hrs, bins=edges)[0]
            occupied = np.flatnonzero(counts)
            edges = edges[occupied[0] : occupied[-1] + 2]
            counts = counts[occupied[0] : occupied[-1] + 1]
            if len(counts) <= batch_size and np.all(counts > 0):
                break
            width *= 2
        groups = len(edges) - 1
        quota = [batch_size // groups + (1 if g < batch_size % groups else 0) for g in range(groups)]
        return cls(tuple(edges), tuple(quota))


def make_oversampled_batches(samples, scheme: HrGroupScheme, seed, n_batches: int | None = None):
    """Batches of sample indices honouring the per-group quota exactly.

    Each group is walked through a fresh permutation; when a group runs out
    it is reshuffled and reused (sampling with replacement across passes).
    ``samples`` may be TrainSamples or plain HR values.
    """
    hrs = np.array([s.reference_hr if isinstance(s, TrainSample) else float(s) for s in samples])
    groups = scheme.assign(hrs)
    members = [np.flatnonzero(groups == g) for g in range(scheme.n_groups)]
    empty = [iv for iv, m in zip(scheme.intervals(), members) if len(m) == 0]
    if empty:
        desc = ", ".join(f"[{lo:g}, {hi:g})" for lo, hi in empty)
        raise ConfigError(f"HR group(s) without samples: {desc}")
    if n_batches is None:
        n_batches = int(np.ceil(len(hrs) / scheme.batch_size))
    rng = np.random.default_rng(seed)
    queues = [rng.permutation(m) for m in members]
    pos = [0] * scheme.n_groups
    batches = []
    for _ in range(n_batches):
        batch = []
        for g, quota in enumerate(scheme.per_group_quota):
            for _ in range(quota):
                if pos[g] == len(queues[g]):
                    queues[g] = rng.permutation(members[g])
                    pos[g] = 0
                batch.append(int(queues[g][pos[g]]))
                pos[g] += 1
        batches.append(np.array(batch, dtype=np.int64))
    return batches


# --- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 20
    phase2_epochs: int = 10
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    noise_sigma: float = 0.05
    val_fraction: float = 0.1
    group_width: float = 20.0
    crop_seconds: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.phase1_epochs + self.phase2_epochs < 1:
            raise ConfigError("epoch counts must be non-negative and not both zero")
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_phase1 > 0 and not self.lr_phase2 < self.lr_phase1:
            raise ConfigError("phase-2 learning rate must be lower than phase-1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


class Adam:
    def __init__(self, params: dict, keys, beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = list(keys)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k]) for k in self.keys}
        self.v = {k: np.zeros_like(params[k]) for k in self.keys}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.keys:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if lr:
                params[k] -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(params[k].dtype)


# --- data pipeline ---------------------------------------------------------


def normalized_yuv(stmap: SpatialTemporalMap) -> np.ndarray:
    """Color conversion + temporal normalization as a plain ``(I, 3, T)`` array."""
    data = stmap.data
    if stmap.color_space == RGB:
        data = np.einsum("cd,idt->ict", MYUV_MATRIX, data)
    return normalize_traces(data)


def assemble_input(prepared: np.ndarray, sample_rate: float, bands) -> np.ndarray:
    """``(..., I, 3, T)`` normalized maps -> ``(..., I, 3(1+K), T)`` network input."""
    if not len(bands):
        return prepared
    parts = decompose_array(prepared, sample_rate, bands)  # (K, ..., I, 3, T)
    return np.concatenate([prepared] + list(parts), axis=-2)


def pad_to_valid(x: np.ndarray, config) -> np.ndarray:
    """Reflect-pad the time axis up to the next length the topology accepts."""
    t = x.shape[-1]
    target = config.padded_length(t)
    if target == t:
        return x
    if target - t >= t:
        raise ShapeError(f"clip of {t} frames is too short to pad to {target}")
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target - t)]
    return np.pad(x, pad, mode="reflect")


def predict(model: SrrnModel, maps, bands=DEFAULT_BANDS, batch_size: int = 16) -> list[BvpSignal]:
    """Inference-mode BVP for each map (no noise, running BN statistics).

    Clips whose length the topology cannot take are reflect-padded at the end
    and the output is cropped back, so every frame is covered in one pass.
    """
    maps = list(maps)
    out = []
    for start in range(0, len(maps), batch_size):
        chunk = maps[start : start + batch_size]
        lengths = {m.frames for m in chunk}
        if len(lengths) > 1:
            for m in chunk:
                out += predict(model, [m], bands, 1)
            continue
        t = chunk[0].frames
        prepared = pad_to_valid(np.stack([normalized_yuv(m) for m in chunk]), model.config)
        y = model.forward(assemble_input(prepared, chunk[0].sample_rate, bands), train=False)[:, :t]
        out += [BvpSignal(row.astype(float), m.sample_rate) for row, m in zip(y, chunk)]
    return out


def hr_predictions(model, samples, bands=DEFAULT_BANDS, fallback: float = float("nan")) -> np.ndarray:
    from .physio import hr_from_bvp  # physio imports srrn only; local import keeps the graph flat

    hrs = []
    for bvp in predict(model, [s.map for s in samples], bands):
        try:
            hrs.append(hr_from_bvp(bvp))
        except FastBvpError:
            hrs.append(fallback)
    return np.array(hrs)


@dataclass
class History:
    rows: list

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "phase", "train_loss", "val_mae"])
            for row in self.rows:
                writer.writerow([row["epoch"], row["phase"], repr(row["train_loss"]), repr(row["val_mae"])])

    @property
    def best(self) -> dict | None:
        finite = [r for r in self.rows if np.isfinite(r["val_mae"])]
        return min(finite, key=lambda r: r["val_mae"]) if finite else None


def split_corpus(corpus, val_fraction: float, seed):
    n = len(corpus)
    n_val = int(round(n * val_fraction))
    if n_val == 0:
        return list(corpus), []
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    return [s for i, s in enumerate(corpus) if i not in val_idx], [corpus[i] for i in sorted(val_idx)]


def fit(corpus, model: SrrnModel, config: TrainConfig, *, val=None, bands=DEFAULT_BANDS, scheme=None,
        progress=None):
    """Two-phase training: uniform batches at ``lr_phase1``, then HR-balanced at ``lr_phase2``.

    Returns ``(best_model, history)``; ``best_model`` holds the parameters of
    the epoch with the lowest validation HR MAE (the last epoch if there is no
    validation split). Optimizer state carries over into phase 2.
    """
    bands = tuple(bands)
    if len(bands) != model.config.n_bands:
        raise ConfigError(f"model expects {model.config.n_bands} bands, got {len(bands)}")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if val is None:
        train_set, val = split_corpus(list(corpus), config.val_fraction, seeds[0])
    else:
        train_set = list(corpus)
    if len(train_set) < 1:
        raise ConfigError("training split is empty")
    if len(train_set) < config.batch_size and config.phase1_epochs:
        raise ConfigError(f"corpus of {len(train_set)} is smaller than batch size {config.batch_size}")
    rng = np.random.default_rng(seeds[1])
    dtype = np.dtype(config.dtype)
    work = model.astype(dtype)
    fs = train_set[0].map.sample_rate
    if len({(s.map.frames, s.map.sample_rate) for s in train_set}) > 1:
        raise DataError("training clips must share one length and sample rate")
    prepared = np.stack([normalized_yuv(s.map) for s in train_set]).astype(dtype)
    targets = np.stack([s.target_bvp.samples for s in train_set]).astype(dtype)
    hrs = np.array([s.reference_hr for s in train_set])
    if config.phase2_epochs and scheme is None:
        scheme = HrGroupScheme.covering(hrs, config.batch_size, config.group_width)
    opt = Adam(work.params, work.learnable(), config.beta1, config.beta2, config.adam_eps)
    fallback = float(np.mean(hrs))
    history = History([])
    best_mae, best_params = np.inf, None
    last_finite = None
    crop = None if config.crop_seconds is None else int(round(config.crop_seconds * fs))
    model.config.validate_length(crop if crop is not None and crop < prepared.shape[-1] else prepared.shape[-1])
    n_per_epoch = int(np.ceil(len(train_set) / config.batch_size))

    def run_batch(idx, lr):
        nonlocal last_finite
        x = prepared[idx]
        y_true = targets[idx]
        if crop is not None and crop < x.shape[-1]:
            start = int(rng.integers(0, x.shape[-1] - crop + 1))
            x = normalize_traces(x[..., start : start + crop])
            y_true = y_true[..., start : start + crop]
        if config.noise_sigma > 0:
            x = x + rng.normal(0.0, config.noise_sigma, x.shape)
        inp = assemble_input(x, fs, bands).astype(dtype)
        pred = work.forward(inp, train=True)
        loss, dpred = neg_pearson_batch(pred.astype(np.float64), y_true.astype(np.float64))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss (last finite: {last_finite})", last_finite)
        last_finite = loss
        _, grads = work.backward(dpred.astype(dtype))
        opt.step(work.params, grads, lr)
        return loss

    epoch = 0
    for phase, n_epochs, lr in ((1, config.phase1_epochs, config.lr_phase1), (2, config.phase2_epochs, config.lr_phase2)):
        for _ in range(n_epochs):
            epoch += 1
            if phase == 1:
                order = rng.permutation(len(train_set))
                batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            else:
                batches = make_oversampled_batches(hrs, scheme, rng.integers(2**32), n_per_epoch)
            losses = [run_batch(b, lr) for b in batches]
            train_loss = float(np.mean(losses))
            if val:
                pred_hr = hr_predictions(work, val, bands, fallback)
                val_mae = float(np.mean(np.abs(pred_hr - np.array([s.reference_hr for s in val]))))
            else:
                val_mae = float("nan")
            history.rows.append({"epoch": epoch, "phase": phase, "train_loss": train_loss, "val_mae": val_mae})
            log.info("epoch %d phase %d loss %.4f val_mae %.3f", epoch, phase, train_loss, val_mae)
            if progress is not None:
                progress(history.rows[-1])
            if val and val_mae < best_mae:
                best_mae = val_mae
                best_params = {k: v.copy() for k, v in work.params.items()}
    final = best_params if best_params is not None else work.params
    trained = SrrnModel(model.config, {k: v.astype(np.float64) for k, v in final.items()})
    return trained, history
