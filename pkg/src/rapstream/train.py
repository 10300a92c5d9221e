"""Source training with joint decoding.

Every trial is forwarded whole; the RAP pooling stage emits one prediction per
window position and each position inherits the trial label. Optimization is
Adam with a linear warmup followed by cosine decay.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as nn
from .data import Cohort, TrialSet
from .errors import ConfigurationError, DomainError, ShapeError, TrainingDivergedError

SPLITS = ("within_subject", "cross_subject_loso")
ALIGNMENTS = ("none", "euclidean", "riemannian")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    warmup_epochs: int = 20
    batch_size: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    split: str = "cross_subject_loso"
    source_alignment: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.source_alignment not in ALIGNMENTS:
            raise ConfigurationError(f"source_alignment must be one of {ALIGNMENTS}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp ``lr*(epoch+1)/warmup`` then half-cosine decay towards zero."""
    if not 0 <= epoch < cfg.epochs:
        raise DomainError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr, w = cfg.learning_rate, cfg.warmup_epochs
    if epoch < w:
        return lr * (epoch + 1) / w
    return lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place and returns both."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        if params[name].shape != np.shape(g):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------- the loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    wall_ms: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, "loss": self.loss, "wall_ms": self.wall_ms}


def fit(
    state: nn.ModelState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    log: list[EpochRecord] | None = None,
) -> nn.ModelState:
    """Train ``state`` in place on trials ``x`` ``(n, C, L)`` with labels ``y``.

    The loss is the per-trial mean over window positions, averaged over the
    batch. Shuffling and dropout draw from ``seed``.
    """
    if len(x) == 0:
        raise ConfigurationError("no training trials")
    rng = np.random.default_rng(seed)
    adam = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    x = np.asarray(x, dtype=state.dtype)
    y = np.asarray(y)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            res = nn.forward(state, x[idx], "train", rng=rng)
            loss, dlogits = nn.cross_entropy(res.logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            total += loss
            grads = nn.backward(state, res.cache, dlogits / len(idx))
            adam_step(state.params, grads, adam, lr)
            state.version += 1
        if log is not None:
            log.append(EpochRecord(epoch, lr, total / len(x), (time.perf_counter() - t0) * 1e3))
    return state


def training_partition(cohort: Cohort, target_subject: str | None, split: str) -> list[str]:
    """Subjects whose offline trials form the training set."""
    if split == "within_subject":
        if target_subject is None or not cohort.has(target_subject, "offline"):
            raise ConfigurationError(f"subject {target_subject!r} has no offline trials for within-subject training")
        return [target_subject]
    sources = [s for s in cohort.subjects if s != target_subject and cohort.has(s, "offline")]
    if not sources:
        raise ConfigurationError("cross-subject training needs at least one other subject with offline trials")
    return sources


def window_hop(config: nn.ModelConfig) -> int:
    return config.rap_plan.window_stride * config.downsampling_factor


def prepare_source(ts: TrialSet, config: nn.ModelConfig, alignment: str) -> np.ndarray:
    """Trial data, optionally aligned with a reference fitted on this subject's own windows."""
    if alignment == "none":
        return ts.data
    from .adapt import align, fit_reference, sliding_windows

    ref = fit_reference(sliding_windows(ts.data, config.window_samples, window_hop(config)), alignment)
    return align(ts.data, ref).astype(np.float32)


@dataclass
class TrainingResult:
    states: dict[int, nn.ModelState]
    logs: dict[int, list[EpochRecord]]
    sources: list[str]

    def write_log(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for seed, records in self.logs.items():
                for r in records:
                    fh.write(json.dumps({"seed": seed, **r.to_dict()}) + "\n")


def run_training(
    cohort: Cohort,
    target_subject: str | None,
    cfg: TrainConfig,
    model_config: nn.ModelConfig,
    log_path: str | Path | None = None,
) -> TrainingResult:
    """Train one model per seed.

    Cross-subject training uses the offline trials of every subject except
    ``target_subject``; the target's online trials are never requested.
    """
    sources = training_partition(cohort, target_subject, cfg.split)
    parts = [cohort.trials(s, "offline") for s in sources]
    x = np.concatenate([prepare_source(ts, model_config, cfg.source_alignment) for ts in parts])
    y = np.concatenate([ts.labels for ts in parts])
    states, logs = {}, {}
    for seed in cfg.seeds:
        state = nn.init_state(model_config, seed=seed)
        state.meta.update(sources=sources, source_alignment=cfg.source_alignment, target=target_subject)
        logs[seed] = []
        fit(state, x, y, cfg, seed, logs[seed])
        states[seed] = state
    result = TrainingResult(states, logs, sources)
    if log_path is not None:
        result.write_log(log_path)
    return result


def multi_seed_aggregate(results: Sequence[Mapping[str, float]] | Mapping[str, Sequence[float]]) -> dict:
    """Mean and sample standard deviation per metric across seeds.

    Accepts either one mapping per seed or one list of per-seed values per
    metric. A single seed reports ``std = 0`` with ``single_seed = True``.
    """
    if isinstance(results, Mapping):
        table = {k: list(v) for k, v in results.items()}
    else:
        if not results:
            raise ShapeError("no seed results")
        keys = set(results[0])
        if any(set(r) != keys for r in results):
            raise ShapeError("per-seed results report different metrics")
        table = {k: [r[k] for r in results] for k in results[0]}
    lengths = {len(v) for v in table.values()}
    if len(lengths) != 1:
        raise ShapeError(f"ragged per-seed metric lists (lengths {sorted(lengths)})")
    n = lengths.pop()
    if n == 0:
        raise ShapeError("no seed results")
    out = {}
    for k, v in table.items():
        vals = [float(a) for a in v]
        out[k] = {"mean": statistics.fmean(vals), "std": statistics.stdev(vals) if n > 1 else 0.0,
                  "n": n, "single_seed": n == 1}
    return out


# --------------------------------------------------------------------------- cost of joint decoding


def split_windows(x: np.ndarray, config: nn.ModelConfig) -> np.ndarray:
    """Every window of every trial as its own example, ``(n*N_w, C, W)``."""
    from .adapt import sliding_windows

    return sliding_windows(x, config.window_samples, window_hop(config))


def benchmark_training_step(
    state: nn.ModelState, x: np.ndarray, y: np.ndarray, repetitions: int = 3
) -> dict[str, float]:
    """Best-of wall-clock seconds of one forward+backward pass, joint vs per-window.

    Both variants see the same trials and produce the same number of
    predictions; the per-window variant decodes each window separately.
    """
    if repetitions < 1:
        raise DomainError("repetitions must be at least 1")
    cfg = state.config
    windows = split_windows(x, cfg)
    n_pos = windows.shape[0] // x.shape[0]
    y_win = np.repeat(np.asarray(y), n_pos)
    probe = state.copy()

    def step(data, labels):
        res = nn.forward(probe, data, "train", rng=np.random.default_rng(0))
        _, dlogits = nn.cross_entropy(res.logits, labels)
        nn.backward(probe, res.cache, dlogits)

    def best(data, labels):
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            step(data, labels)
            times.append(time.perf_counter() - t0)
        return min(times)

    step(x[:1], y[:1])  # warm caches
    joint = best(x, y)
    individual = best(windows, y_win)
    return {"joint_s": joint, "individual_s": individual, "ratio": individual / joint, "windows_per_trial": n_pos}

