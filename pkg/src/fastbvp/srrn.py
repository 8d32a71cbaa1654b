"""Signal refinement and reconstruction network (SRRN).

Layout of the default model, per facial region (weights are shared across
regions, i.e. every kernel is ``k x 1`` over the region x time map)::

    input (3 map channels + 3K band channels)
    4 x refinement block : conv3 -> BN -> ReLU -> TMSC(3,5,7) -> avg-pool
    3 x reconstruction   : deconv -> BN -> ELU -> SSA
    head                 : region-flattening 1x1 conv -> BVP

The regions are folded into the batch axis, so activations are
``(N * regions, C, L)`` everywhere except the head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .nn import LayerSpec
from .spectral import MultiBandSignal, bands_from_dict, bands_to_dict, dct_matrix
from .stmap import SpatialTemporalMap

TMSC_KERNELS = (3, 5, 7)
SSA_NORM_EPS = 1e-6


@dataclass(frozen=True)
class SrrnConfig:
    regions: int = 4
    n_bands: int = 4
    conv_kernel: int = 3
    block_widths: tuple = (16, 16, 8, 8)
    tmsc_widths: tuple = (8, 8, 4, 4)
    tmsc_kernels: tuple = TMSC_KERNELS
    pool_factors: tuple = (1, 1, 3, 3)
    deconv_widths: tuple = (16, 16, 16)
    deconv_strides: tuple = (3, 3, 1)
    ssa_segments: int = 5
    ssa_hidden: int = 4
    use_ssa: bool = True

    def __post_init__(self):
        for name in ("block_widths", "tmsc_widths", "pool_factors", "deconv_widths", "deconv_strides", "tmsc_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if tuple(self.tmsc_kernels) != TMSC_KERNELS:
            raise ConfigError(f"tmsc_kernels are fixed to {TMSC_KERNELS}")
        if len(self.block_widths) != 4 or len(self.tmsc_widths) != 4 or len(self.pool_factors) != 4:
            raise ConfigError("the refinement sub-network has exactly four blocks")
        if len(self.deconv_widths) != 3 or len(self.deconv_strides) != 3:
            raise ConfigError("the reconstruction sub-network has exactly three blocks")
        if self.regions < 1 or self.n_bands < 0:
            raise ConfigError("regions must be >= 1 and n_bands >= 0")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if min(self.block_widths + self.tmsc_widths + self.deconv_widths) < 1:
            raise ConfigError("channel widths must be positive")
        if min(self.pool_factors + self.deconv_strides) < 1 or self.ssa_segments < 1 or self.ssa_hidden < 1:
            raise ConfigError("pool factors, strides, segments and hidden width must be >= 1")
        if self.total_pool != int(np.prod(self.deconv_strides)):
            raise ConfigError(
                f"deconv strides {self.deconv_strides} must undo the pooling factor {self.total_pool}"
            )

    @property
    def channels_per_region(self) -> int:
        return 3 * (1 + self.n_bands)

    @property
    def input_channels(self) -> int:
        """Flattened count: I x 3 map channels + K x I x 3 band channels."""
        return self.regions * self.channels_per_region

    @property
    def total_pool(self) -> int:
        return int(np.prod(self.pool_factors))

    def feature_lengths(self, frames: int) -> list[int]:
        """Lengths entering each reconstruction block's SSA stage."""
        length = frames // self.total_pool
        out = []
        for s in self.deconv_strides:
            length *= s
            out.append(length)
        return out

    def validate_length(self, frames: int) -> None:
        if frames % self.total_pool:
            raise ConfigError(f"T={frames} is not divisible by the total pooling factor {self.total_pool}")
        if self.use_ssa:
            for length in self.feature_lengths(frames):
                if length % self.ssa_segments:
                    raise ConfigError(
                        f"feature length {length} cannot be split into {self.ssa_segments} equal SSA segments"
                    )

    def padded_length(self, frames: int) -> int:
        """Smallest valid input length >= ``frames``."""
        length = int(-(-frames // self.total_pool) * self.total_pool)
        while True:
            try:
                self.validate_length(length)
                return length
            except ConfigError:
                length += self.total_pool

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SrrnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


def load_config(path) -> SrrnConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return SrrnConfig.from_dict(doc)


def default_config_path() -> Path:
    return Path(__file__).with_name("configs") / "model_default.json"


# --- building blocks -------------------------------------------------------


class Primitive:
    """A single nn layer as a network step."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.name = spec.name

    def layer_specs(self):
        return [self.spec]

    def out_shape(self, channels, length):
        return self.spec.output_channels(channels), self.spec.output_length(length)

    def macs(self, channels, length):
        return self.spec.macs(length)

    def forward(self, params, x, train):
        return nn.forward_layer(self.spec, params, x, "train" if train else "infer")

    def backward(self, params, cache, dy):
        return nn.backward_layer(self.spec, params, cache, dy)


class Tmsc:
    """Parallel 3/5/7 convolutions, concatenated along channels, then ReLU."""

    def __init__(self, name, in_channels, width):
        self.name = name
        self.in_channels = in_channels
        self.width = width
        self.branches = [
            LayerSpec(nn.CONV1D, f"{name}.k{k}", in_channels, width, kernel=k, padding=k // 2)
            for k in TMSC_KERNELS
        ]

    def layer_specs(self):
        return list(self.branches)

    def out_shape(self, channels, length):
        return 3 * self.width, length

    def macs(self, channels, length):
        return sum(b.macs(length) for b in self.branches)

    def forward(self, params, x, train):
        if x.shape[-2] != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[-2]}")
        outs, caches = [], []
        for spec in self.branches:
            y, c = nn.forward_layer(spec, params, x, "train")
            outs.append(y)
            caches.append(c)
        y, mask = nn.relu_forward(np.concatenate(outs, axis=-2))
        return y, (caches, mask)

    def backward(self, params, cache, dy):
        caches, mask = cache
        dcat = nn.relu_backward(mask, dy)
        dx = 0.0
        grads = {}
        for i, spec in enumerate(self.branches):
            part = dcat[..., i * self.width : (i + 1) * self.width, :]
            dxi, g = nn.backward_layer(spec, params, caches[i], part)
            dx = dx + dxi
            grads.update(g)
        return dx, grads


class Ssa:
    """Spectrum self-attention with a convolutional global representator.

    Per channel, the feature is cut into ``segments`` equal pieces, each piece
    is DCT-transformed and rescaled to norm ``sqrt(m)``, and scaled dot-product
    self-attention is computed across segments. The attention each segment
    receives (column sums of the weight matrix; 1 everywhere when all segments
    agree) is passed through two convolutions over the segment axis that mix
    all channels. A sigmoid of that yields a per channel-segment gain in (0, 2)
    that reweights the input.
    """

    def __init__(self, name, channels, segments, hidden):
        self.name = name
        self.channels = channels
        self.segments = segments
        self.hidden = hidden
        k = 3 if segments > 1 else 1
        self.rep1 = LayerSpec(nn.CONV1D, f"{name}.rep1", channels, hidden, kernel=k, padding=k // 2)
        self.rep2 = LayerSpec(nn.CONV1D, f"{name}.rep2", hidden, channels, kernel=1)

    def layer_specs(self):
        return [self.rep1, self.rep2]

    def out_shape(self, channels, length):
        return channels, length

    def macs(self, channels, length):
        s = self.segments
        m = length // s
        dct = channels * length * m
        norm = 2 * channels * length
        attention = 2 * channels * s * s * m
        rep = self.rep1.macs(s) + self.rep2.macs(s)
        return dct + norm + attention + rep + channels * length

    def attention(self, x):
        """Attention weights ``(B, C, S, S)`` and the intermediates needed for backward."""
        b, c, length = x.shape
        s = self.segments
        if length % s:
            raise ConfigError(f"{self.name}: length {length} not divisible into {s} segments")
        m = length // s
        z = x.reshape(b, c, s, m) @ dct_matrix(m).T.astype(x.dtype, copy=False)
        nrm = np.sqrt((z * z).sum(axis=-1, keepdims=True) + SSA_NORM_EPS)
        zn = np.sqrt(m) * z / nrm
        _, weights, att_cache = nn.sdp_attention(zn, zn, zn)
        return weights, (z, nrm, att_cache, m)

    def forward(self, params, x, train):
        if x.shape[-2] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[-2]}")
        weights, acache = self.attention(x)
        m = acache[3]
        received = weights.sum(axis=-2)  # (B, C, S)
        h, c1 = nn.forward_layer(self.rep1, params, received, "train")
        a, mask = nn.relu_forward(h)
        g, c2 = nn.forward_layer(self.rep2, params, a, "train")
        sig = nn.sigmoid(g)
        gain = np.repeat(2.0 * sig, m, axis=-1)
        return x * gain, (x, gain, sig, acache, c1, mask, c2)

    def backward(self, params, cache, dy):
        x, gain, sig, (z, nrm, att_cache, m), c1, mask, c2 = cache
        b, c, length = x.shape
        s = self.segments
        dx = dy * gain
        dgain = (dy * x).reshape(b, c, s, m).sum(axis=-1)
        dg = dgain * 2.0 * sig * (1.0 - sig)
        da, g2 = nn.backward_layer(self.rep2, params, c2, dg)
        dh = nn.relu_backward(mask, da)
        drecv, g1 = nn.backward_layer(self.rep1, params, c1, dh)
        dweights = np.broadcast_to(drecv[..., None, :], drecv.shape[:-1] + (s, s))
        dq, dk, _ = nn.sdp_attention_backward(att_cache, dweights=dweights)
        dzn = dq + dk
        dz = np.sqrt(m) * (dzn / nrm - z * (dzn * z).sum(axis=-1, keepdims=True) / nrm**3)
        dx = dx + (dz @ dct_matrix(m).astype(x.dtype, copy=False)).reshape(b, c, length)
        return dx, {**g1, **g2}


class Head:
    """Flatten (region, channel) and map to one output channel with a 1x1 conv."""

    def __init__(self, regions, channels):
        self.name = "head"
        self.regions = regions
        self.channels = channels
        self.spec = LayerSpec(nn.CONV1D, "head", regions * channels, 1, kernel=1)

    def layer_specs(self):
        return [self.spec]

    def out_shape(self, channels, length):
        return 1, length

    def macs(self, channels, length):
        # macs() is reported per region; the head runs once per clip
        return self.spec.macs(length) / self.regions

    def forward(self, params, x, train):
        nr, c, length = x.shape
        n = nr // self.regions
        y, cache = nn.forward_layer(self.spec, params, x.reshape(n, self.regions * c, length), "train")
        return y[:, 0, :], cache

    def backward(self, params, cache, dy):
        dx, grads = nn.backward_layer(self.spec, params, cache, dy[:, None, :])
        n, rc, length = dx.shape
        return dx.reshape(n * self.regions, rc // self.regions, length), grads


def build_steps(config: SrrnConfig) -> list:
    steps = []
    ch = config.channels_per_region
    k = config.conv_kernel
    for i, (w, t, p) in enumerate(zip(config.block_widths, config.tmsc_widths, config.pool_factors), start=1):
        steps.append(Primitive(LayerSpec(nn.CONV1D, f"ref{i}.conv", ch, w, kernel=k, padding=k // 2, bias=False)))
        steps.append(Primitive(LayerSpec(nn.BATCHNORM, f"ref{i}.bn", w, w)))
        steps.append(Primitive(LayerSpec(nn.RELU, f"ref{i}.relu")))
        steps.append(Tmsc(f"ref{i}.tmsc", w, t))
        ch = 3 * t
        if p > 1:
            steps.append(Primitive(LayerSpec(nn.AVGPOOL, f"ref{i}.pool", ch, ch, kernel=p, stride=p)))
    for i, (d, s) in enumerate(zip(config.deconv_widths, config.deconv_strides), start=1):
        steps.append(Primitive(LayerSpec(nn.DECONV1D, f"rec{i}.deconv", ch, d, kernel=s + 2, stride=s, padding=1, bias=False)))
        steps.append(Primitive(LayerSpec(nn.BATCHNORM, f"rec{i}.bn", d, d)))
        steps.append(Primitive(LayerSpec(nn.ELU, f"rec{i}.elu")))
        if config.use_ssa:
            steps.append(Ssa(f"rec{i}.ssa", d, config.ssa_segments, config.ssa_hidden))
        ch = d
    steps.append(Head(config.regions, ch))
    return steps


# --- model -----------------------------------------------------------------


@dataclass(frozen=True)
class BvpSignal:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("BVP samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("BVP contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class SrrnModel:
    """Parameters plus the fixed topology described by ``config``."""

    def __init__(self, config: SrrnConfig | None = None, params: dict | None = None, seed: int = 0, dtype=np.float64):
        self.config = config or SrrnConfig()
        self.steps = build_steps(self.config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for spec in self.layer_specs():
                params.update(nn.init_params(spec, rng))
        self.params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
        self._check_params()
        self._caches = None
        self._last = None

    def _check_params(self):
        expected = {}
        for spec in self.layer_specs():
            for f, shape in {**spec.param_shapes(), **spec.buffer_shapes()}.items():
                expected[f"{spec.name}.{f}"] = shape
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter store does not match config (missing={missing}, extra={extra})")
        for k, shape in expected.items():
            if self.params[k].shape != tuple(shape):
                raise ConfigError(f"{k}: shape {self.params[k].shape} != {tuple(shape)}")

    def layer_specs(self) -> list[LayerSpec]:
        return [spec for step in self.steps for spec in step.layer_specs()]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "SrrnModel":
        return SrrnModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype=dtype)

    def copy(self) -> "SrrnModel":
        return SrrnModel(self.config, {k: v.copy() for k, v in self.params.items()}, dtype=self.dtype)

    def learnable(self) -> list[str]:
        return [k for k in self.params if not nn.is_buffer(k)]

    def forward(self, x, train=False):
        """``x``: ``(N, regions, 3(1+K), T)`` -> BVP batch ``(N, T)``."""
        x = np.asarray(x, dtype=self.dtype)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.regions or x.shape[2] != cfg.channels_per_region:
            raise ConfigError(
                f"input must be (N, {cfg.regions}, {cfg.channels_per_region}, T), got {x.shape}"
            )
        n, r, c, t = x.shape
        cfg.validate_length(t)
        h = x.reshape(n * r, c, t)
        caches = []
        for step in self.steps:
            h, cache = step.forward(self.params, h, train)
            caches.append(cache)
        self._caches = caches if train else None
        self._last = caches
        if h.shape != (n, t):
            raise ShapeError(f"network produced {h.shape}, expected {(n, t)}")
        return h

    def ssa_gains(self, x) -> dict:
        """Per-segment SSA gains ``(N, regions, C, S)`` for each reconstruction stage (inference mode)."""
        self.forward(x, train=False)
        n = np.shape(x)[0]
        out = {}
        for step, cache in zip(self.steps, self._last):
            if isinstance(step, Ssa):
                sig = cache[2]
                out[step.name] = 2.0 * sig.reshape(n, self.config.regions, *sig.shape[1:])
        self._last = None
        return out

    def backward(self, dy):
        """Gradients of all learnable parameters and of the input for the last train-mode forward."""
        if self._caches is None:
            raise nn.StateError("backward requires a preceding train-mode forward")
        grads = {}
        for step, cache in zip(reversed(self.steps), reversed(self._caches)):
            dy, g = step.backward(self.params, cache, dy)
            grads.update(g)
        cfg = self.config
        nr, c, t = dy.shape
        return dy.reshape(nr // cfg.regions, cfg.regions, c, t), grads


def relu_pattern(steps, caches) -> bytes:
    """Packed ReLU masks of a forward pass, used to detect kink crossings."""
    masks = []
    for step, cache in zip(steps, caches):
        if isinstance(step, Primitive) and step.spec.kind == nn.RELU:
            masks.append(cache.data)
        elif isinstance(step, Tmsc):
            masks.append(cache[1])
        elif isinstance(step, Ssa):
            masks.append(cache[5])
    return b"".join(np.packbits(m).tobytes() for m in masks)


class ModelFragment(nn.Fragment):
    """Adapter exposing an :class:`SrrnModel` (train mode) to ``check_gradients``."""

    def __init__(self, model: SrrnModel):
        self.model = model
        self.params = model.params

    def forward(self, x):
        return self.model.forward(x, train=True)

    def backward(self, dy):
        return self.model.backward(dy)

    def kink_state(self):
        return relu_pattern(self.model.steps, self.model._caches)


class StepFragment(nn.Fragment):
    """Adapter for a single composite step (TMSC, SSA, ...) with its own params."""

    def __init__(self, step, params, train=True):
        self.step = step
        self.params = params
        self.train = train
        self._cache = None

    def forward(self, x):
        y, self._cache = self.step.forward(self.params, x, self.train)
        return y

    def backward(self, dy):
        return self.step.backward(self.params, self._cache, dy)

    def kink_state(self):
        return relu_pattern([self.step], [self._cache])


def init_step_params(step, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    for spec in step.layer_specs():
        params.update(nn.init_params(spec, rng))
    return params


def tmsc_forward(x, params, name="tmsc"):
    """Run a stand-alone TMSC module whose params are keyed ``<name>.k3/k5/k7``."""
    x = np.asarray(x, dtype=float)
    in_ch = x.shape[-2]
    width = params[f"{name}.k3.weight"].shape[0]
    squeeze = x.ndim == 2
    y, _ = Tmsc(name, in_ch, width).forward(params, x[None] if squeeze else x, False)
    return y[0] if squeeze else y


def ssa_forward(x, params, segments, name="ssa", return_weights=False):
    """Run a stand-alone SSA module whose params are keyed ``<name>.rep1/rep2``."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    hidden = params[f"{name}.rep1.weight"].shape[0]
    step = Ssa(name, xb.shape[1], segments, hidden)
    y, cache = step.forward(params, xb, False)
    if squeeze:
        y = y[0]
    if return_weights:
        w = cache[3][2][3]
        return y, (w[0] if squeeze else w)
    return y


def model_input(prepared: SpatialTemporalMap, bands: MultiBandSignal | None) -> np.ndarray:
    """Stack map and band channels per region: ``(regions, 3(1+K), T)``."""
    parts = [prepared.data]
    if bands is not None and bands.k:
        parts += [bands[k] for k in range(bands.k)]
    return np.concatenate(parts, axis=1)


def srrn_forward(stmap: SpatialTemporalMap, bands: MultiBandSignal | None, model: SrrnModel, mode="infer") -> BvpSignal:
    cfg = model.config
    k = 0 if bands is None else bands.k
    if k != cfg.n_bands:
        raise ConfigError(f"model expects {cfg.n_bands} bands, got {k}")
    if stmap.regions != cfg.regions:
        raise ConfigError(f"model expects {cfg.regions} regions, got {stmap.regions}")
    if bands is not None and bands.bands.shape[1:] != stmap.data.shape:
        raise ConfigError("band signals do not match the map shape")
    x = model_input(stmap, bands)[None]
    y = model.forward(x, train=(mode == "train"))
    return BvpSignal(y[0].astype(float), stmap.sample_rate)


# --- checkpoints -----------------------------------------------------------


def save_model(directory, model: SrrnModel, bands, extra: dict | None = None) -> Path:
    """Checkpoint carrying the weights, the topology config and the band edges."""
    bands = tuple(bands)
    if len(bands) != model.config.n_bands:
        raise ConfigError(f"model expects {model.config.n_bands} bands, got {len(bands)}")
    meta = {"model_config": model.config.to_dict(), "bands": bands_to_dict(bands)["bands"]}
    meta.update(extra or {})
    return nn.save_checkpoint(directory, model.params, model.layer_specs(), meta)


def load_model(directory) -> tuple[SrrnModel, tuple, dict]:
    """Inverse of :func:`save_model`: ``(model, bands, manifest)``."""
    manifest, params = nn.load_checkpoint(directory)
    try:
        config = SrrnConfig.from_dict(manifest["model_config"])
        bands = bands_from_dict({"bands": manifest["bands"]})
    except KeyError as exc:
        raise ConfigError(f"{directory}: checkpoint lacks {exc.args[0]!r}") from None
    return SrrnModel(config, params), bands, manifest


# --- budget ----------------------------------------------------------------


@dataclass
class LayerBudget:
    name: str
    params: int
    flops: float


@dataclass
class Budget:
    layers: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_flops(self) -> float:
        return sum(l.flops for l in self.layers)


def count_params(config: SrrnConfig) -> int:
    """Learnable parameters (BN running statistics excluded)."""
    return sum(spec.n_params() for step in build_steps(config) for spec in step.layer_specs())


def budget(config: SrrnConfig, frames: int) -> Budget:
    """Per-step parameter and FLOP accounting (2 FLOPs per multiply-accumulate).

    Convolutions share weights across regions, so every per-region count is
    multiplied by ``config.regions``.
    """
    config.validate_length(frames)
    ch, length = config.channels_per_region, frames
    out = Budget()
    for step in build_steps(config):
        macs = step.macs(ch, length) * config.regions
        n_params = sum(spec.n_params() for spec in step.layer_specs())
        out.layers.append(LayerBudget(step.name, n_params, 2.0 * macs))
        ch, length = step.out_shape(ch, length)
    return out


def count_flops(config: SrrnConfig, frames: int) -> float:
    return budget(config, frames).total_flops
