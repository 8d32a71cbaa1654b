"""Differentiable 1-D layer primitives with hand-written reverse-mode gradients.

Activations are ``(N, C, L)`` arrays (a single :data:`Tensor1d` ``(C, L)`` is
accepted and returned as such). Parameters live in a flat ``ParamStore``
(``dict[str, ndarray]``) keyed ``"<layer>.<field>"``. Every forward call
returns ``(y, cache)``; the matching backward consumes the cache.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import SchemaError, ShapeError, StateError

CONV1D = "conv1d"
DECONV1D = "deconv1d"
BATCHNORM = "batchnorm"
RELU = "relu"
ELU = "elu"
AVGPOOL = "avgpool"
SOFTMAX_ATTENTION = "softmax_attention"
KINDS = (CONV1D, DECONV1D, BATCHNORM, RELU, ELU, AVGPOOL, SOFTMAX_ATTENTION)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ELU_ALPHA = 1.0

ParamStore = dict  # str -> np.ndarray
Tensor1d = np.ndarray  # (C, L)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True  # conv/deconv only; drop it when a batch norm follows

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kind == CONV1D and self.kernel % 2 == 0:
            raise ValueError("conv1d kernels must be odd")
        if self.kind in (CONV1D, DECONV1D) and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"{self.name}: channel counts must be positive")

    def param_shapes(self) -> dict[str, tuple]:
        k, ci, co = self.kernel, self.in_channels, self.out_channels
        if self.kind in (CONV1D, DECONV1D):
            shape = (co, ci, k) if self.kind == CONV1D else (ci, co, k)
            return {"weight": shape, "bias": (co,)} if self.bias else {"weight": shape}
        if self.kind == BATCHNORM:
            return {"gamma": (ci,), "beta": (ci,)}
        return {}

    def buffer_shapes(self) -> dict[str, tuple]:
        if self.kind == BATCHNORM:
            return {"running_mean": (self.in_channels,), "running_var": (self.in_channels,)}
        return {}

    def output_length(self, length: int) -> int:
        if self.kind == CONV1D:
            return (length + 2 * self.padding - self.kernel) // self.stride + 1
        if self.kind == DECONV1D:
            return (length - 1) * self.stride + self.kernel - 2 * self.padding
        if self.kind == AVGPOOL:
            return length // self.kernel
        return length

    def output_channels(self, channels: int) -> int:
        return self.out_channels if self.kind in (CONV1D, DECONV1D) else channels

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def macs(self, length: int) -> int:
        """Multiply-accumulates for one ``(C, length)`` input."""
        k, ci, co = self.kernel, self.in_channels, self.out_channels
        if self.kind == CONV1D:
            return k * ci * co * self.output_length(length)
        if self.kind == DECONV1D:
            return k * ci * co * length
        if self.kind == BATCHNORM:
            return ci * length
        return 0


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
    """Fan-in scaled uniform weights; BN scale 1, shift 0, running stats (0, 1)."""
    out = {}
    if spec.kind in (CONV1D, DECONV1D):
        fan_in = spec.kernel * (spec.in_channels if spec.kind == CONV1D else spec.out_channels)
        bound = 1.0 / np.sqrt(fan_in)
        shapes = spec.param_shapes()
        out[f"{spec.name}.weight"] = rng.uniform(-bound, bound, shapes["weight"]).astype(dtype)
        if spec.bias:
            out[f"{spec.name}.bias"] = rng.uniform(-bound, bound, shapes["bias"]).astype(dtype)
    elif spec.kind == BATCHNORM:
        c = spec.in_channels
        out[f"{spec.name}.gamma"] = np.ones(c, dtype)
        out[f"{spec.name}.beta"] = np.zeros(c, dtype)
        out[f"{spec.name}.running_mean"] = np.zeros(c, dtype)
        out[f"{spec.name}.running_var"] = np.ones(c, dtype)
    return out


def is_buffer(key: str) -> bool:
    return key.endswith(".running_mean") or key.endswith(".running_var")


# --- primitive kernels -----------------------------------------------------


def _strided(xp: np.ndarray, j: int, stride: int, count: int) -> np.ndarray:
    return xp[:, :, j : j + stride * (count - 1) + 1 : stride]


def conv1d_forward(x, w, b, stride=1, padding=0):
    n, ci, length = x.shape
    co, ci_w, k = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv1d expects {ci_w} input channels, got {ci}")
    l_out = (length + 2 * padding - k) // stride + 1
    if l_out < 1:
        raise ShapeError(f"conv1d input length {length} too short for kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    # im2col with the batch folded into the columns: one GEMM per layer
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :l_out]
    cols = win.transpose(1, 3, 0, 2).reshape(ci * k, n * l_out)
    y = (w.reshape(co, ci * k) @ cols).reshape(co, n, l_out).transpose(1, 0, 2)
    if b is not None:
        y = y + b[None, :, None]
    return y, (cols, w, stride, padding, length, n)


def conv1d_backward(cache, dy):
    cols, w, stride, padding, length, n = cache
    co, ci, k = w.shape
    l_out = dy.shape[2]
    dy2 = dy.transpose(1, 0, 2).reshape(co, n * l_out)
    dw = (dy2 @ cols.T).reshape(co, ci, k)
    dcols = (w.reshape(co, ci * k).T @ dy2).reshape(ci, k, n, l_out)
    dxp = np.zeros((n, ci, length + 2 * padding), dtype=dy2.dtype)
    for j in range(k):
        dxp[:, :, j : j + stride * (l_out - 1) + 1 : stride] += dcols[:, j].transpose(1, 0, 2)
    db = dy.sum(axis=(0, 2))
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return dx, dw, db


def deconv1d_forward(x, w, b, stride=1, padding=0):
    n, ci, length = x.shape
    ci_w, co, k = w.shape
    if ci != ci_w:
        raise ShapeError(f"deconv1d expects {ci_w} input channels, got {ci}")
    full = (length - 1) * stride + k
    l_out = full - 2 * padding
    if l_out < 1:
        raise ShapeError("deconv1d output would be empty")
    yf = np.zeros((n, co, full), dtype=np.result_type(x, w))
    for j in range(k):
        yf[:, :, j : j + stride * (length - 1) + 1 : stride] += np.matmul(w[:, :, j].T, x)
    y = yf[:, :, padding : padding + l_out]
    if b is not None:
        y = y + b[None, :, None]
    return y, (x, w, stride, padding, full)


def deconv1d_backward(cache, dy):
    x, w, stride, padding, full = cache
    length = x.shape[2]
    k = w.shape[2]
    dyf = np.zeros(dy.shape[:2] + (full,), dtype=dy.dtype)
    dyf[:, :, padding : padding + dy.shape[2]] = dy
    dx = np.zeros_like(x)
    dw = np.empty_like(w)
    for j in range(k):
        ds = _strided(dyf, j, stride, length)
        dx += np.matmul(w[:, :, j], ds)
        dw[:, :, j] = np.tensordot(x, ds, axes=([0, 2], [0, 2]))
    db = dy.sum(axis=(0, 2))
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel normalization over the batch and length axes.

    In train mode the running statistics are updated in place.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape[1]}")
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = x.shape[0] * x.shape[2]
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, gamma, inv_std, train)


def batchnorm_backward(cache, dy):
    xhat, gamma, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    if not train:
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2]
    dx = (inv_std[None, :, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dy):
    return dy * mask


def elu_forward(x, alpha=ELU_ALPHA):
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, x, neg)
    return y, (x > 0, neg, alpha)


def elu_backward(cache, dy):
    pos, neg, alpha = cache
    return dy * np.where(pos, 1.0, neg + alpha)


def avgpool_forward(x, factor):
    n, c, length = x.shape
    l_out = length // factor
    if l_out < 1:
        raise ShapeError(f"avgpool factor {factor} exceeds length {length}")
    y = x[:, :, : l_out * factor].reshape(n, c, l_out, factor).mean(axis=3)
    return y, (length, factor)


def avgpool_backward(cache, dy):
    length, factor = cache
    n, c, l_out = dy.shape
    dx = np.zeros((n, c, length), dtype=dy.dtype)
    dx[:, :, : l_out * factor] = np.repeat(dy / factor, factor, axis=2)
    return dx


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def sdp_attention(q, k, v, dim=None):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    ``q`` is ``(..., Sq, d)``, ``k`` is ``(..., Sk, d)``, ``v`` is ``(..., Sk, dv)``.
    Returns ``(out, weights, cache)``; each row of ``weights`` sums to one.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    d = q.shape[-1] if dim is None else dim
    if q.shape[-1] != d or k.shape[-1] != d:
        raise ShapeError(f"query/key feature dims {q.shape[-1]}, {k.shape[-1]} do not match d={d}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) need the same row count")
    scale = 1.0 / np.sqrt(d)
    weights = softmax(np.matmul(q, np.swapaxes(k, -1, -2)) * scale)
    out = np.matmul(weights, v)
    return out, weights, (q, k, v, weights, scale)


def sdp_attention_backward(cache, dout=None, dweights=None):
    """Gradients of the attention output and/or weights w.r.t. ``q, k, v``."""
    q, k, v, weights, scale = cache
    dw = np.zeros_like(weights) if dweights is None else np.array(dweights, dtype=weights.dtype)
    dv = np.zeros_like(v)
    if dout is not None:
        dv = np.matmul(np.swapaxes(weights, -1, -2), dout)
        dw = dw + np.matmul(dout, np.swapaxes(v, -1, -2))
    dlogits = softmax_backward(weights, dw) * scale
    dq = np.matmul(dlogits, k)
    dk = np.matmul(np.swapaxes(dlogits, -1, -2), q)
    return dq, dk, dv


# --- layer dispatch --------------------------------------------------------


@dataclass
class LayerCache:
    spec: LayerSpec
    train: bool
    data: object
    squeeze: bool = False


def _mode_is_train(mode) -> bool:
    if mode in ("train", True):
        return True
    if mode in ("infer", False):
        return False
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def forward_layer(spec: LayerSpec, params: ParamStore, x, mode="infer"):
    """Apply one layer. Returns ``(y, cache)``."""
    train = _mode_is_train(mode)
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"{spec.name}: expected (C, L) or (N, C, L), got {x.shape}")
    p = lambda field: params[f"{spec.name}.{field}"]  # noqa: E731
    kind = spec.kind
    if kind in (CONV1D, DECONV1D, BATCHNORM) and x.shape[1] != spec.in_channels:
        raise ShapeError(f"{spec.name}: expected {spec.in_channels} channels, got {x.shape[1]}")
    if kind == CONV1D:
        y, data = conv1d_forward(x, p("weight"), p("bias") if spec.bias else None, spec.stride, spec.padding)
    elif kind == DECONV1D:
        y, data = deconv1d_forward(x, p("weight"), p("bias") if spec.bias else None, spec.stride, spec.padding)
    elif kind == BATCHNORM:
        y, data = batchnorm_forward(x, p("gamma"), p("beta"), p("running_mean"), p("running_var"), train)
    elif kind == RELU:
        y, data = relu_forward(x)
    elif kind == ELU:
        y, data = elu_forward(x)
    elif kind == AVGPOOL:
        y, data = avgpool_forward(x, spec.kernel)
    else:  # self-attention with each channel row acting as query, key and value
        y, _, data = sdp_attention(x, x, x)
    cache = LayerCache(spec, train, data, squeeze)
    return (y[0] if squeeze else y), cache


def backward_layer(spec: LayerSpec, params: ParamStore, cache, dy):
    """Return ``(dx, dparams)`` for a layer given its forward cache."""
    if cache is None or not isinstance(cache, LayerCache):
        raise StateError(f"{spec.name}: missing forward cache")
    if cache.spec != spec:
        raise StateError(f"{spec.name}: cache belongs to layer {cache.spec.name!r}")
    dy = np.asarray(dy)
    if cache.squeeze:
        dy = dy[None]
    kind = spec.kind
    grads = {}
    if kind == CONV1D:
        dx, dw, db = conv1d_backward(cache.data, dy)
        grads = {f"{spec.name}.weight": dw}
        if spec.bias:
            grads[f"{spec.name}.bias"] = db
    elif kind == DECONV1D:
        dx, dw, db = deconv1d_backward(cache.data, dy)
        grads = {f"{spec.name}.weight": dw}
        if spec.bias:
            grads[f"{spec.name}.bias"] = db
    elif kind == BATCHNORM:
        dx, dg, dbeta = batchnorm_backward(cache.data, dy)
        grads = {f"{spec.name}.gamma": dg, f"{spec.name}.beta": dbeta}
    elif kind == RELU:
        dx = relu_backward(cache.data, dy)
    elif kind == ELU:
        dx = elu_backward(cache.data, dy)
    elif kind == AVGPOOL:
        dx = avgpool_backward(cache.data, dy)
    else:
        dq, dk, dv = sdp_attention_backward(cache.data, dout=dy)
        dx = dq + dk + dv
    return (dx[0] if cache.squeeze else dx), grads


# --- finite-difference gradient checking ----------------------------------


@dataclass
class GradCheckReport:
    """Max relative error per parameter group (plus ``"input"``).

    ``skipped`` counts probes per group discarded because the perturbation
    changed the fragment's ReLU pattern.
    """

    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-5
    skipped: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failed(self) -> list[str]:
        return sorted(k for k, v in self.errors.items() if not v <= self.tolerance)

    @property
    def ok(self) -> bool:
        return not self.failed

    def update(self, group: str, err: float) -> None:
        self.errors[group] = max(self.errors.get(group, 0.0), float(err))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max abs difference normalised by the larger gradient magnitude of the group.

    ``floor`` bounds the denominator from below so groups whose true gradient is
    zero are not judged on round-off noise.
    """
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(scale, floor)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


class Fragment:
    """Anything with ``params``, ``forward(x) -> y`` and ``backward(dy) -> (dx, grads)``.

    ``forward`` must be a pure function of ``params`` and ``x`` so finite
    differences can re-evaluate it. Fragments containing ReLUs may override
    ``kink_state`` to return the activation pattern of the last forward; probes
    that change it straddle a non-differentiable point and are skipped.
    """

    params: ParamStore

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dy):  # pragma: no cover - interface
        raise NotImplementedError

    def kink_state(self):
        return None


class LayerFragment(Fragment):
    """Wrap a single :class:`LayerSpec` as a checkable fragment (train mode)."""

    def __init__(self, spec: LayerSpec, params: ParamStore, mode="train"):
        self.spec = spec
        self.params = params
        self.mode = mode
        self._cache = None

    def forward(self, x):
        y, self._cache = forward_layer(self.spec, self.params, x, self.mode)
        return y

    def backward(self, dy):
        return backward_layer(self.spec, self.params, self._cache, dy)

    def kink_state(self):
        if self.spec.kind == RELU and self._cache is not None:
            return np.packbits(self._cache.data).tobytes()
        return None


def check_gradients(
    fragment: Fragment,
    make_input: Callable[[np.random.Generator], np.ndarray],
    trials: int = 5,
    epsilon: float = 1e-4,
    seed: int = 0,
    max_entries: int | None = None,
    tolerance: float = 1e-5,
    floor: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar probed is ``sum(forward(x) * R)`` for a random projection ``R``.
    With ``max_entries`` set, at most that many randomly chosen coordinates
    per group are perturbed in each trial. Probes across a ReLU kink (see
    :meth:`Fragment.kink_state`) are skipped and counted. Mismatches are
    reported, never raised.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    keys = [k for k in fragment.params if not is_buffer(k)]
    for _ in range(trials):
        x = np.array(make_input(rng), dtype=np.float64)
        snapshot = {k: v.copy() for k, v in fragment.params.items()}
        y = fragment.forward(x)
        base_state = fragment.kink_state()
        proj = rng.standard_normal(y.shape)
        dx, grads = fragment.backward(proj)

        def objective(inp):
            # restore buffers so train-mode BN updates do not leak across probes
            for k in fragment.params:
                if is_buffer(k):
                    fragment.params[k][...] = snapshot[k]
            return float(np.sum(fragment.forward(inp) * proj)), fragment.kink_state()

        groups = [("input", x, dx)] + [(k, fragment.params[k], grads.get(k)) for k in keys]
        for name, target, analytic in groups:
            if analytic is None:
                analytic = np.zeros_like(target)
            flat_idx = np.arange(target.size)
            if max_entries is not None and target.size > max_entries:
                flat_idx = rng.choice(target.size, size=max_entries, replace=False)
            numeric = np.empty(len(flat_idx))
            smooth = np.ones(len(flat_idx), dtype=bool)
            view = target.reshape(-1)
            for j, idx in enumerate(flat_idx):
                orig = view[idx]
                view[idx] = orig + epsilon
                f_plus, s_plus = objective(x)
                view[idx] = orig - epsilon
                f_minus, s_minus = objective(x)
                view[idx] = orig
                numeric[j] = (f_plus - f_minus) / (2 * epsilon)
                smooth[j] = s_plus == base_state and s_minus == base_state
            if not smooth.all():
                report.skipped[name] = report.skipped.get(name, 0) + int((~smooth).sum())
            if smooth.any():
                report.update(name, relative_error(np.ravel(analytic)[flat_idx][smooth], numeric[smooth], floor))
        for k in fragment.params:
            fragment.params[k][...] = snapshot[k]
    return report


# --- checkpoint format -----------------------------------------------------

CHECKPOINT_FORMAT = "fastbvp-checkpoint/1"


def save_checkpoint(directory, params: ParamStore, layers, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32, C order).

    Each manifest tensor entry lists ``name``, ``shape``, ``offset`` (bytes from
    the start of the blob) and ``nbytes``; tensors are stored back to back in
    the order they appear in the manifest.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float32-le",
        "layers": [asdict(spec) for spec in layers],
        "tensors": entries,
        "blob": "weights.bin",
        "blob_nbytes": offset,
    }
    if extra:
        manifest.update(extra)
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[dict, ParamStore]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    blob = (directory / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_nbytes"]:
        raise SchemaError(f"{directory}: weight blob has {len(blob)} bytes, manifest says {manifest['blob_nbytes']}")
    params = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.astype(np.float64)
    return manifest, params
