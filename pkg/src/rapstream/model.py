"""Shallow convolutional decoder whose final pooling stage is RAP-planned.

Layer stack (``B`` batch, ``C`` channels, ``M = F1 * D`` spatio-temporal maps)::

    x (B, C, L)
    spatial     depthwise spatial filters, M x C            -> (B, M, L)
    temporal    F1 temporal kernels shared by D maps each   -> (B, M, L1)
    bn1, ELU, mean pooling by prod(downsampling kernels), dropout
    conv2       F2 x M x K2 temporal convolution            -> (B, F2, L3)
    bn2, ELU
    rap pool    mean pooling, kernel k_P (minus valid-padding shrink), stride s_P
    dropout
    readout     per-position linear map F2 -> classes       -> (B, N, classes)
    softmax

The spatial and temporal filters are both linear and adjacent, so applying the
spatial mix first is equivalent to the usual temporal-then-depthwise order and
avoids running ``F1`` temporal filters over every raw channel.

With ``padding_mode="valid"`` no layer looks past the samples it is given, so
each output row of a whole-trial forward equals the forward of the
corresponding single window; the final pooling kernel is reduced by the
receptive-field loss so that one window still yields exactly one row.

Gradients are derived by hand; :func:`backward` consumes the cache of a
train-mode :func:`forward`.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    ConfigurationError,
    IncompatiblePlanError,
    IndexOutOfRangeError,
    InvalidStateError,
    ParseError,
    ShapeError,
)
from .rap import RapPlan

BN_LAYERS = ("bn1", "bn2")
PARAM_NAMES = (
    "spatial.weight",
    "temporal.weight",
    "bn1.weight",
    "bn1.bias",
    "conv2.weight",
    "bn2.weight",
    "bn2.bias",
    "readout.weight",
    "readout.bias",
)

# (layer name, pre-BN activations (B, maps, T)) -> (mean, var) used for normalization
StatsFn = Callable[[str, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class ModelConfig:
    channel_count: int
    rap_plan: RapPlan
    temporal_filters: int = 16
    temporal_kernel: int = 64
    depth_multiplier: int = 2
    second_block_filters: int = 32
    second_kernel: int = 16
    activation: str = "elu"
    dropout_rate: float = 0.25
    pooling: str = "mean"
    class_count: int = 2
    padding_mode: str = "valid"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        counts = (self.channel_count, self.temporal_filters, self.temporal_kernel, self.depth_multiplier,
                  self.second_block_filters, self.second_kernel)
        if any(int(c) != c or c < 1 for c in counts):
            raise ConfigurationError("layer sizes must be positive integers")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.class_count < 2:
            raise ConfigurationError("at least two classes are needed")
        if self.activation != "elu" or self.pooling != "mean":
            raise ConfigurationError("only ELU activations and mean pooling are supported")
        if self.padding_mode not in ("valid", "same"):
            raise ConfigurationError(f"unknown padding mode {self.padding_mode!r}")
        if self.effective_window_kernel < 1:
            raise ConfigurationError(
                f"valid padding loses {self.receptive_shrink} intermediate samples but the window kernel is only "
                f"{self.rap_plan.window_kernel}; shorten the convolution kernels or use padding_mode='same'"
            )

    @property
    def maps(self) -> int:
        return self.temporal_filters * self.depth_multiplier

    @property
    def downsampling_factor(self) -> int:
        return self.rap_plan.downsampling_factor

    @property
    def receptive_shrink(self) -> int:
        """Intermediate-rate samples lost to valid convolutions."""
        if self.padding_mode == "same":
            return 0
        return math.ceil((self.temporal_kernel - 1) / self.downsampling_factor) + self.second_kernel - 1

    @property
    def effective_window_kernel(self) -> int:
        return self.rap_plan.window_kernel - self.receptive_shrink

    @property
    def window_samples(self) -> int:
        return self.rap_plan.window_kernel * self.downsampling_factor

    def output_positions(self, n_samples: int) -> int:
        self.check_input_length(n_samples)
        return self.rap_plan.output_positions(n_samples)

    def check_input_length(self, n_samples: int) -> None:
        plan = self.rap_plan
        pi = self.downsampling_factor
        m = n_samples // pi if n_samples % pi == 0 else None
        if m is None or m < plan.window_kernel or (m - plan.window_kernel) % plan.window_stride:
            raise ShapeError(
                f"input of {n_samples} samples does not fit the pooling plan: need a multiple of {pi} "
                f"(downsampling), at least {self.window_samples} samples (one window), and "
                f"(samples/{pi} - {plan.window_kernel}) divisible by the window stride {plan.window_stride}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rap_plan"] = {
            "kernel_sizes": list(self.rap_plan.kernel_sizes),
            "strides": list(self.rap_plan.strides),
            "intermediate_frequency": self.rap_plan.intermediate_frequency,
            "sampling_frequency": self.rap_plan.sampling_frequency,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        p = d.pop("rap_plan")
        plan = RapPlan(tuple(p["kernel_sizes"]), tuple(p["strides"]), p["intermediate_frequency"],
                       p["sampling_frequency"])
        return cls(rap_plan=plan, **d)


@dataclass
class ModelState:
    """Learnable parameters, batch-norm running statistics and bookkeeping.

    ``version`` increments whenever parameters change, which invalidates
    forward caches taken earlier.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    rng_seed: int = 0
    meta: dict = field(default_factory=dict)
    version: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.params["readout.weight"].dtype

    def astype(self, dtype) -> "ModelState":
        return replace(
            self,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
            meta=copy.deepcopy(self.meta),
        )

    def copy(self) -> "ModelState":
        return self.astype(self.dtype)

    def bn_stats(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        return self.buffers[f"{layer}.running_mean"], self.buffers[f"{layer}.running_var"]

    def set_bn_stats(self, layer: str, mean: np.ndarray, var: np.ndarray) -> None:
        if np.any(np.asarray(var) <= 0):
            raise ConfigurationError(f"{layer}: running variance must stay positive")
        self.buffers[f"{layer}.running_mean"] = np.asarray(mean, dtype=self.dtype).copy()
        self.buffers[f"{layer}.running_var"] = np.asarray(var, dtype=self.dtype).copy()


def init_state(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Fan-in scaled uniform initialization, seeded; biases and readout bias zero."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    c, m, f1, k1 = config.channel_count, config.maps, config.temporal_filters, config.temporal_kernel
    f2, k2, n_cls = config.second_block_filters, config.second_kernel, config.class_count
    params = {
        "spatial.weight": uniform((m, c), c),
        "temporal.weight": uniform((f1, k1), k1),
        "bn1.weight": np.ones(m, dtype),
        "bn1.bias": np.zeros(m, dtype),
        "conv2.weight": uniform((f2, m, k2), m * k2),
        "bn2.weight": np.ones(f2, dtype),
        "bn2.bias": np.zeros(f2, dtype),
        "readout.weight": uniform((n_cls, f2), f2),
        "readout.bias": np.zeros(n_cls, dtype),
    }
    buffers = {}
    for layer, n in (("bn1", m), ("bn2", f2)):
        buffers[f"{layer}.running_mean"] = np.zeros(n, dtype)
        buffers[f"{layer}.running_var"] = np.ones(n, dtype)
    return ModelState(config, params, buffers, rng_seed=seed)


# --------------------------------------------------------------------------- primitives


def _pad(x: np.ndarray, kernel: int, mode: str) -> np.ndarray:
    if mode == "valid" or kernel == 1:
        return x
    left = (kernel - 1) // 2
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, kernel - 1 - left)])


def _unpad(x: np.ndarray, kernel: int, mode: str) -> np.ndarray:
    if mode == "valid" or kernel == 1:
        return x
    left = (kernel - 1) // 2
    return x[..., left : x.shape[-1] - (kernel - 1 - left)]


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _elu_grad(y: np.ndarray, out: np.ndarray) -> np.ndarray:
    return np.where(y > 0, 1.0, out + 1.0).astype(y.dtype)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_pool_down(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    n = x.shape[-1] // k
    return x[..., : n * k].reshape(*x.shape[:-1], n, k).mean(axis=-1)


def _window_pool(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    n = (x.shape[-1] - kernel) // stride + 1
    out = np.zeros(x.shape[:-1] + (n,), dtype=x.dtype)
    span = stride * (n - 1) + 1
    for k in range(kernel):
        out += x[..., k : k + span : stride]
    return out / kernel


def _dropout_mask(rng: np.random.Generator | None, shape, rate: float, dtype) -> np.ndarray | None:
    if rate == 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


@dataclass
class ForwardCache:
    version: int
    mode: str
    tensors: dict[str, np.ndarray]


@dataclass
class ForwardResult:
    """Probabilities ``(B, N, classes)``, logits of the same shape, and the train-mode cache."""

    probs: np.ndarray
    logits: np.ndarray
    cache: ForwardCache | None = None


def _batch_stats(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return z.mean(axis=(0, 2)), z.var(axis=(0, 2))


def forward(
    state: ModelState,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    stats_fn: StatsFn | None = None,
) -> ForwardResult:
    """Decode ``x`` of shape ``(B, C, L)`` or ``(C, L)``.

    Parameters
    ----------
    mode : {"infer", "train"}
        ``infer`` normalizes with running statistics and disables dropout.
        ``train`` normalizes with batch statistics, updates the running
        statistics with the configured momentum, applies dropout when ``rng``
        is given, and returns a cache for :func:`backward`.
    stats_fn : callable, optional
        Infer mode only: supplies the (mean, var) each BN layer normalizes
        with. Used for batch-norm adaptation.
    """
    cfg = state.config
    if mode not in ("infer", "train"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=state.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.channel_count:
        raise ShapeError(f"expected input (batch, {cfg.channel_count}, samples), got {x.shape}")
    cfg.check_input_length(x.shape[2])
    p = state.params
    train = mode == "train"
    pad = cfg.padding_mode
    eps = cfg.bn_eps
    dt = state.dtype
    t: dict[str, np.ndarray] = {}

    def bn(layer: str, z: np.ndarray) -> np.ndarray:
        if train:
            mean, var = _batch_stats(z)
            n = z.shape[0] * z.shape[2]
            mom = cfg.bn_momentum
            rm, rv = state.bn_stats(layer)
            unbiased = var * (n / max(n - 1, 1))
            state.buffers[f"{layer}.running_mean"] = ((1 - mom) * rm + mom * mean).astype(dt)
            state.buffers[f"{layer}.running_var"] = ((1 - mom) * rv + mom * unbiased).astype(dt)
        elif stats_fn is not None:
            mean, var = stats_fn(layer, z)
        else:
            mean, var = state.bn_stats(layer)
        inv_std = (1.0 / np.sqrt(np.asarray(var, dtype=dt) + eps)).astype(dt)
        xhat = (z - np.asarray(mean, dtype=dt)[None, :, None]) * inv_std[None, :, None]
        if train:
            t[f"{layer}.xhat"] = xhat
            t[f"{layer}.inv_std"] = inv_std
        return xhat * p[f"{layer}.weight"][None, :, None] + p[f"{layer}.bias"][None, :, None]

    # spatial mixing, then depthwise temporal filtering
    u = p["spatial.weight"] @ x
    u_p = _pad(u, cfg.temporal_kernel, pad)
    k1 = cfg.temporal_kernel
    wt = np.repeat(p["temporal.weight"], cfg.depth_multiplier, axis=0)  # (M, K1)
    l1 = u_p.shape[2] - k1 + 1
    z1 = np.zeros(u.shape[:2] + (l1,), dtype=dt)
    for k in range(k1):
        z1 += wt[None, :, k, None] * u_p[:, :, k : k + l1]
    y1 = bn("bn1", z1)
    a1 = _elu(y1)
    h1 = _mean_pool_down(a1, cfg.downsampling_factor)
    mask1 = _dropout_mask(rng, h1.shape, cfg.dropout_rate, dt) if train else None
    d1 = h1 * mask1 if mask1 is not None else h1

    k2 = cfg.second_kernel
    d1_p = _pad(d1, k2, pad)
    l3 = d1_p.shape[2] - k2 + 1
    # im2col per batch item: (B, L3, M*K2)
    cols = np.lib.stride_tricks.sliding_window_view(d1_p, k2, axis=2)[:, :, :l3]  # (B, M, L3, K2)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(x.shape[0], l3, -1)
    w2 = p["conv2.weight"].reshape(cfg.second_block_filters, -1)
    z2 = (cols @ w2.T).transpose(0, 2, 1)  # (B, F2, L3)
    y2 = bn("bn2", np.ascontiguousarray(z2))
    a2 = _elu(y2)
    h2 = _window_pool(a2, cfg.effective_window_kernel, cfg.rap_plan.window_stride)
    mask2 = _dropout_mask(rng, h2.shape, cfg.dropout_rate, dt) if train else None
    d2 = h2 * mask2 if mask2 is not None else h2
    logits = (p["readout.weight"] @ d2).transpose(0, 2, 1) + p["readout.bias"]  # (B, N, K)
    probs = _softmax(logits)

    cache = None
    if train:
        t.update(x=x, u_p=u_p, wt=wt, y1=y1, a1=a1, mask1=mask1, cols=cols, y2=y2, a2=a2, mask2=mask2, d2=d2,
                 l1=np.array(l1), l3=np.array(l3), len_a2=np.array(a2.shape[2]), len_a1=np.array(a1.shape[2]))
        t = {k: v for k, v in t.items() if v is not None}
        cache = ForwardCache(state.version, mode, t)
    if single:
        return ForwardResult(probs[0], logits[0], cache)
    return ForwardResult(probs, logits, cache)


def predict(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Infer-mode class probabilities."""
    return forward(state, x, "infer").probs


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss summed over trials of the position-averaged cross-entropy, and its logit gradient.

    Every position of a trial inherits the trial label.
    """
    logits = np.asarray(logits)
    b, n, _ = logits.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    labels = np.asarray(labels)
    picked = np.take_along_axis(logp, labels[:, None, None].repeat(n, axis=1), axis=-1)[..., 0]
    loss = float(-picked.sum() / n)
    grad = np.exp(logp)
    grad[np.arange(b)[:, None], np.arange(n)[None, :], labels[:, None]] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def _bn_backward(dy: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, gamma: np.ndarray):
    n = dy.shape[0] * dy.shape[2]
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    dz = (inv_std[None, :, None] / n) * (
        n * dxhat - dxhat.sum(axis=(0, 2))[None, :, None] - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dz, dgamma, dbeta


def backward(state: ModelState, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss with respect to every parameter.

    Parameters
    ----------
    dlogits : ndarray, shape (B, N, classes)
        Gradient of the loss with respect to the logits (for instance from
        :func:`cross_entropy`).

    Raises
    ------
    InvalidStateError
        If the cache was produced before the last parameter update or not in
        train mode.
    """
    if cache is None or cache.mode != "train":
        raise InvalidStateError("backward needs the cache of a train-mode forward")
    if cache.version != state.version:
        raise InvalidStateError(
            f"stale cache: taken at parameter version {cache.version}, state is at {state.version}"
        )
    cfg = state.config
    p = state.params
    t = cache.tensors
    dt = state.dtype
    dlogits = np.asarray(dlogits, dtype=dt)
    single = dlogits.ndim == 2
    if single:
        dlogits = dlogits[None]
    b = t["x"].shape[0]
    if dlogits.shape != (b, t["d2"].shape[2], cfg.class_count):
        raise ShapeError(f"upstream gradient shape {dlogits.shape} does not match the forward output")
    grads: dict[str, np.ndarray] = {}

    d2 = t["d2"]
    grads["readout.weight"] = (dlogits.transpose(0, 2, 1) @ d2.transpose(0, 2, 1)).sum(axis=0)
    grads["readout.bias"] = dlogits.sum(axis=(0, 1))
    dd2 = p["readout.weight"].T @ dlogits.transpose(0, 2, 1)  # (B, F2, N)
    dh2 = dd2 * t["mask2"] if "mask2" in t else dd2

    ke, s = cfg.effective_window_kernel, cfg.rap_plan.window_stride
    n = dh2.shape[2]
    da2 = np.zeros(dh2.shape[:2] + (int(t["len_a2"]),), dtype=dt)
    span = s * (n - 1) + 1
    g = dh2 / ke
    for k in range(ke):
        da2[..., k : k + span : s] += g
    dy2 = da2 * _elu_grad(t["y2"], t["a2"])
    dz2, grads["bn2.weight"], grads["bn2.bias"] = _bn_backward(dy2, t["bn2.xhat"], t["bn2.inv_std"], p["bn2.weight"])

    cols = t["cols"]  # (B, L3, M*K2)
    w2 = p["conv2.weight"].reshape(cfg.second_block_filters, -1)
    dz2_t = dz2.transpose(0, 2, 1)  # (B, L3, F2)
    grads["conv2.weight"] = (dz2 @ cols).sum(axis=0).reshape(p["conv2.weight"].shape)
    dcols = (dz2_t @ w2).reshape(b, int(t["l3"]), cfg.maps, cfg.second_kernel)  # (B, L3, M, K2)
    l3 = int(t["l3"])
    k2 = cfg.second_kernel
    dd1_p = np.zeros((b, cfg.maps, l3 + k2 - 1), dtype=dt)
    for k in range(k2):
        dd1_p[:, :, k : k + l3] += dcols[:, :, :, k].transpose(0, 2, 1)
    dd1 = _unpad(dd1_p, k2, cfg.padding_mode)
    dh1 = dd1 * t["mask1"] if "mask1" in t else dd1

    f = cfg.downsampling_factor
    da1 = np.zeros((b, cfg.maps, int(t["len_a1"])), dtype=dt)
    nh = dh1.shape[2]
    da1[:, :, : nh * f] = np.repeat(dh1 / f, f, axis=2)
    dy1 = da1 * _elu_grad(t["y1"], t["a1"])
    dz1, grads["bn1.weight"], grads["bn1.bias"] = _bn_backward(dy1, t["bn1.xhat"], t["bn1.inv_std"], p["bn1.weight"])

    u_p, wt = t["u_p"], t["wt"]
    l1 = int(t["l1"])
    k1 = cfg.temporal_kernel
    # dwt[m, k] = sum_{b,l} dz1[b, m, l] * u_p[b, m, l + k]
    segs = np.lib.stride_tricks.sliding_window_view(u_p, l1, axis=2)  # (B, M, K1, L1)
    dwt = (segs @ dz1[:, :, :, None])[..., 0].sum(axis=0)
    du_p = np.zeros_like(u_p)
    for k in range(k1):
        du_p[:, :, k : k + l1] += wt[None, :, k, None] * dz1
    grads["temporal.weight"] = dwt.reshape(cfg.temporal_filters, cfg.depth_multiplier, k1).sum(axis=1)
    du = _unpad(du_p, k1, cfg.padding_mode)
    grads["spatial.weight"] = (du @ t["x"].transpose(0, 2, 1)).sum(axis=0)
    return {k: grads[k].astype(dt) for k in PARAM_NAMES}


# --------------------------------------------------------------------------- RAP surgery and helpers


def apply_rap(state: ModelState, new_plan: RapPlan) -> ModelState:
    """Swap the pooling plan; learned parameters and statistics are copied bit for bit.

    The downsampling stages are part of the learned representation, so the new
    plan must keep the same sampling rate and downsampling kernels.
    """
    old = state.config.rap_plan
    if new_plan == old:
        return state.copy()
    if new_plan.downsampling_kernels != old.downsampling_kernels or new_plan.sampling_frequency != old.sampling_frequency:
        raise IncompatiblePlanError(
            f"plan downsamples {new_plan.sampling_frequency} Hz by {list(new_plan.downsampling_kernels)}, model was "
            f"built for {old.sampling_frequency} Hz by {list(old.downsampling_kernels)}"
        )
    for k, s in zip(new_plan.kernel_sizes, new_plan.strides):
        if int(k) != k or int(s) != s or k < 1 or s < 1:
            raise IncompatiblePlanError(f"plan entries must be positive integers: k={new_plan.kernel_sizes}, s={new_plan.strides}")
    try:
        config = replace(state.config, rap_plan=new_plan)
    except ConfigurationError as exc:
        raise IncompatiblePlanError(str(exc)) from exc
    out = state.copy()
    out.config = config
    return out


def zero_electrode(state: ModelState | None, x: np.ndarray, channel_index: int) -> np.ndarray:
    """Copy of ``x`` (``(..., C, L)``) with one channel set to zero."""
    x = np.array(x, copy=True)
    n_ch = x.shape[-2]
    if state is not None and n_ch != state.config.channel_count:
        raise ShapeError(f"input has {n_ch} channels, model expects {state.config.channel_count}")
    if not 0 <= channel_index < n_ch:
        raise IndexOutOfRangeError(f"channel {channel_index} outside [0, {n_ch})")
    x[..., channel_index, :] = 0
    return x


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"RAPC"
CKPT_VERSION = 1


def write_tensors(path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    """Container: magic, version byte, uint32 JSON length, JSON, float32 LE tensors in manifest order."""
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    blob = json.dumps({**manifest, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<BI", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = str(path)
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ParseError("bad magic, expected b'RAPC'", path, 0)
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path, 4)
    try:
        manifest = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed manifest: {exc}", path, 9) from exc
    offset = 9 + hlen
    tensors = {}
    for entry in manifest.get("tensors", []):
        count = math.prod(entry["shape"])
        end = offset + 4 * count
        if end > len(raw):
            raise ParseError(f"tensor {entry['name']} truncated", path, offset)
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise ParseError(f"{len(raw) - offset} trailing bytes after the last tensor", path, offset)
    return manifest, tensors


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    tensors = {**{k: state.params[k] for k in PARAM_NAMES}, **state.buffers}
    manifest = {"kind": "basenet-rap", "config": state.config.to_dict(), "rng_seed": state.rng_seed, "meta": state.meta}
    write_tensors(path, manifest, tensors)


def load_checkpoint(path: str | Path) -> ModelState:
    manifest, tensors = read_tensors(path)
    if manifest.get("kind") != "basenet-rap":
        raise ParseError(f"not a model checkpoint (kind={manifest.get('kind')!r})", str(path), 9)
    config = ModelConfig.from_dict(manifest["config"])
    expected = init_state(config, 0)
    for name, ref in {**expected.params, **expected.buffers}.items():
        if name not in tensors:
            raise ParseError(f"checkpoint misses tensor {name}", str(path))
        if tensors[name].shape != ref.shape:
            raise ParseError(f"tensor {name} has shape {tensors[name].shape}, config implies {ref.shape}", str(path))
    params = {k: tensors[k] for k in PARAM_NAMES}
    buffers = {k: tensors[k] for k in expected.buffers}
    return ModelState(config, params, buffers, rng_seed=int(manifest.get("rng_seed", 0)), meta=manifest.get("meta", {}))
