"""Source-free adaptation of a trained decoder to a new subject.

Three regimes share these building blocks:

* supervised: fine-tune on labeled calibration trials (:func:`supervised_finetune`);
* unsupervised: align inputs with a reference covariance fitted on unlabeled
  target windows and/or replace batch-norm statistics (:func:`adabn_replace`);
* online: update the reference (:func:`update_reference_online`) and the
  batch-norm statistics (:func:`adabn_update`) one window at a time.

Nothing here accepts source trials; only the model state and target data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from . import model as nn
from .data import TrialSet
from .errors import ConfigurationError, DegenerateMatrixError, DomainError, ShapeError

METHODS = ("euclidean", "riemannian")
VARIANCE_FLOOR = 1e-8


def sliding_windows(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """All windows of ``(..., n, C, L)`` trials flattened to ``(n*N_w, C, window)``."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    n_w = (x.shape[-1] - window) // hop + 1
    if n_w < 1:
        raise ShapeError(f"trials of {x.shape[-1]} samples are shorter than one window ({window})")
    starts = np.arange(n_w) * hop
    idx = starts[:, None] + np.arange(window)[None, :]
    out = x[:, :, idx]  # (n, C, N_w, W)
    return np.ascontiguousarray(out.transpose(0, 2, 1, 3)).reshape(-1, x.shape[1], window)


# --------------------------------------------------------------------------- alignment


@dataclass(frozen=True)
class AlignmentReference:
    """A domain's reference covariance and its cached inverse square root.

    ``sample_count`` is the weight of the data folded in so far; a reference
    with ``sample_count == 0`` and no matrix is the empty cold-start sentinel.
    """

    method: str
    mean: np.ndarray | None = None
    inv_sqrt: np.ndarray | None = None
    sample_count: float = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"alignment method must be one of {METHODS}, got {self.method!r}")

    @property
    def is_empty(self) -> bool:
        return self.mean is None

    @classmethod
    def empty(cls, method: str) -> "AlignmentReference":
        return cls(method)

    @classmethod
    def from_matrix(cls, method: str, mean: np.ndarray, sample_count: float = 1) -> "AlignmentReference":
        mean = linalg.symmetrize(np.asarray(mean, dtype=np.float64))
        try:
            isq = linalg.spd_invsqrt(mean)
        except (DegenerateMatrixError, DomainError) as exc:
            raise DegenerateMatrixError(f"degenerate reference covariance: {exc}") from exc
        return cls(method, mean, isq, sample_count)

    def with_weight(self, sample_count: float) -> "AlignmentReference":
        return replace(self, sample_count=sample_count)


def fit_reference(windows: np.ndarray, method: str = "euclidean") -> AlignmentReference:
    """Reference from a set of windows ``(n, C, S)``: arithmetic or Karcher mean of their covariances."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ShapeError("fit_reference needs a non-empty stack of (channels, samples) windows")
    covs = linalg.covariance(windows)
    if method == "euclidean":
        mean = covs.mean(axis=0)
    elif method == "riemannian":
        mean = linalg.geometric_mean(covs)
    else:
        raise ConfigurationError(f"alignment method must be one of {METHODS}, got {method!r}")
    return AlignmentReference.from_matrix(method, mean, len(covs))


def align(x: np.ndarray, ref: AlignmentReference) -> np.ndarray:
    """``R^{-1/2} X`` for one window ``(C, S)`` or a stack ``(..., C, S)``."""
    if ref.is_empty:
        raise ConfigurationError("cannot align with an empty reference")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != ref.inv_sqrt.shape[0]:
        raise ShapeError(f"window has {x.shape[-2]} channels, reference is {ref.inv_sqrt.shape[0]}x{ref.inv_sqrt.shape[0]}")
    return ref.inv_sqrt @ x


def update_reference_online(ref: AlignmentReference, window: np.ndarray) -> AlignmentReference:
    """Fold one window into the reference with equal weighting.

    Euclidean: running arithmetic mean. Riemannian: step ``1/n`` along the
    geodesic towards the new covariance. An empty reference starts at the
    first window's covariance.
    """
    cov = linalg.covariance(window)
    if cov.ndim != 2:
        raise ShapeError("update_reference_online takes one (channels, samples) window")
    if ref.is_empty or ref.sample_count == 0:
        return AlignmentReference.from_matrix(ref.method, cov, 1)
    if cov.shape != ref.mean.shape:
        raise ShapeError(f"window covariance {cov.shape} does not match reference {ref.mean.shape}")
    n = ref.sample_count + 1
    if ref.method == "euclidean":
        mean = ((n - 1) * ref.mean + cov) / n
    else:
        mean = linalg.geodesic_step(ref.mean, cov, 1.0 / n)
    return AlignmentReference.from_matrix(ref.method, mean, n)


def align_trials(ts: TrialSet, ref: AlignmentReference) -> TrialSet:
    return replace(ts, data=align(ts.data, ref).astype(np.float32))


# --------------------------------------------------------------------------- batch-norm statistics


@dataclass
class AdaBnState:
    """Target statistics per BN layer, exponentially updated from the source ones."""

    mean: dict[str, np.ndarray]
    var: dict[str, np.ndarray]
    momentum: float = 0.001
    update_count: int = 0
    clamp_count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"AdaBN momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def from_model(cls, state: nn.ModelState, momentum: float = 0.001) -> "AdaBnState":
        mean, var = {}, {}
        for layer in nn.BN_LAYERS:
            m, v = state.bn_stats(layer)
            mean[layer] = m.astype(np.float64)
            var[layer] = v.astype(np.float64)
        return cls(mean, var, momentum)

    def copy(self) -> "AdaBnState":
        return AdaBnState({k: v.copy() for k, v in self.mean.items()}, {k: v.copy() for k, v in self.var.items()},
                          self.momentum, self.update_count, self.clamp_count)


def fold_layer_stats(state: AdaBnState, layer: str, mean: np.ndarray, var: np.ndarray) -> None:
    """In-place exponential update of one layer; variances that end up non-positive are clamped."""
    if layer not in state.mean:
        raise ShapeError(f"unknown BN layer {layer!r}")
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != state.mean[layer].shape or var.shape != state.var[layer].shape:
        raise ShapeError(f"{layer}: statistics of shape {mean.shape} do not match {state.mean[layer].shape}")
    a = state.momentum
    state.mean[layer] = (1 - a) * state.mean[layer] + a * mean
    new_var = (1 - a) * state.var[layer] + a * var
    bad = ~(new_var > 0)
    if np.any(bad):
        state.clamp_count += int(bad.sum())
        warnings.warn(f"{layer}: {int(bad.sum())} non-positive variance estimates clamped to {VARIANCE_FLOOR}",
                      RuntimeWarning, stacklevel=3)
        new_var = np.where(bad, VARIANCE_FLOOR, new_var)
    state.var[layer] = new_var


def adabn_update(state: AdaBnState, batch_stats: dict[str, tuple[np.ndarray, np.ndarray]]) -> AdaBnState:
    """One exponential step ``mu <- (1-a) mu + a E[X]`` (same for the variance) on every given layer."""
    out = state.copy()
    for layer, (mean, var) in batch_stats.items():
        fold_layer_stats(out, layer, mean, var)
    out.update_count += 1
    return out


def adabn_forward(model_state: nn.ModelState, ada: AdaBnState, window: np.ndarray) -> tuple[np.ndarray, AdaBnState]:
    """Decode one window while folding its statistics into the target estimate.

    Each BN layer first updates its running target statistics with the
    window's own mean and variance, then normalizes with the updated values,
    so layer two sees layer-one features that were already adapted.
    """
    out = ada.copy()

    def stats(layer, z):
        fold_layer_stats(out, layer, z.mean(axis=(0, 2)), z.var(axis=(0, 2)))
        return out.mean[layer], out.var[layer]

    probs = nn.forward(model_state, window, "infer", stats_fn=stats).probs
    out.update_count += 1
    return probs, out


def adabn_replace(state: nn.ModelState, calibration_windows: np.ndarray, batch_size: int = 256) -> nn.ModelState:
    """Replace every BN layer's running statistics by exact statistics on the calibration set.

    Layers are processed in order, so the statistics of a later layer are
    measured on features normalized with the already-replaced earlier ones.
    """
    x = np.asarray(calibration_windows)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or len(x) == 0:
        raise ConfigurationError("AdaBN replacement needs at least one calibration window")
    out = state.copy()
    for target in nn.BN_LAYERS:
        total = None
        total_sq = None
        count = 0

        def stats(layer, z, target=target):
            nonlocal total, total_sq, count
            if layer == target:
                z64 = z.astype(np.float64)
                s, sq = z64.sum(axis=(0, 2)), np.square(z64).sum(axis=(0, 2))
                total = s if total is None else total + s
                total_sq = sq if total_sq is None else total_sq + sq
                count += z.shape[0] * z.shape[2]
            return out.bn_stats(layer)

        for start in range(0, len(x), batch_size):
            nn.forward(out, x[start : start + batch_size], "infer", stats_fn=stats)
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, VARIANCE_FLOOR)
        out.set_bn_stats(target, mean, var)
    return out


# --------------------------------------------------------------------------- supervised


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0


def supervised_finetune(state: nn.ModelState, calibration: TrialSet, cfg: FinetuneConfig = FinetuneConfig(),
                        log: list | None = None) -> nn.ModelState:
    """Continue joint-decoding training on labeled target trials (no warmup, cosine to zero).

    Batch-norm running statistics follow the target data through the training
    forwards, so no separate AdaBN step is applied.
    """
    from .train import TrainConfig, fit

    if len(calibration) == 0:
        raise ConfigurationError("fine-tuning needs at least one labeled trial")
    out = state.copy()
    if cfg.epochs == 0:
        return out
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs, warmup_epochs=0,
                       batch_size=cfg.batch_size, seeds=(cfg.seed,))
    return fit(out, calibration.data, calibration.labels, tcfg, cfg.seed, log)


# --------------------------------------------------------------------------- mode strings

MODES = ("none", "ft", "ea", "ra", "adabn", "ea+adabn", "ra+adabn", "ft+ea", "ft+ra")


@dataclass(frozen=True)
class AdaptationMode:
    finetune: bool = False
    alignment: str | None = None
    adabn: bool = False
    text: str = field(default="none", compare=False)

    def __str__(self) -> str:
        return self.text


def parse_mode(text: str) -> AdaptationMode:
    """Parse ``none | ft | ea | ra | adabn | ea+adabn | ra+adabn | ft+ea | ft+ra``."""
    key = text.strip().lower()
    if key not in MODES:
        raise ConfigurationError(f"unknown adaptation mode {text!r}; expected one of {' | '.join(MODES)}")
    parts = set(key.split("+"))
    alignment = "euclidean" if "ea" in parts else "riemannian" if "ra" in parts else None
    return AdaptationMode(finetune="ft" in parts, alignment=alignment, adabn="adabn" in parts, text=key)
