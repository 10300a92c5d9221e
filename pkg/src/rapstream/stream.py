"""Pseudo-online replay: trials become a sample stream, one prediction per hop.

Trials are replayed back to back. Within a trial a ring buffer one window long
is filled with the first ``T_w`` seconds, decoded, and then advanced by one
hop (``f_s / f_u`` samples) per tick. Before decoding, the window passes
through the session's adaptation hooks in their declared order; hooks only
ever see the current window and keep their own state, so the prediction at
tick ``j`` never depends on later samples.

Decoding latency is measured per window from the buffer read to the
probabilities and compared with the ``1/f_u`` deadline. Misses are recorded,
never dropped.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adapt
from . import model as nn
from .data import TrialSet
from .errors import ConfigurationError, DomainError
from .mdm import MdmModel, mdm_predict
from .rap import OnlineTaskSpec, _frac


class RingBuffer:
    """Fixed-length multichannel buffer holding the most recent ``length`` samples."""

    def __init__(self, channels: int, length: int, dtype=np.float32):
        self._buf = np.zeros((channels, length), dtype=dtype)
        self._pos = 0
        self.filled = 0

    @property
    def length(self) -> int:
        return self._buf.shape[1]

    def reset(self) -> None:
        self._buf[:] = 0
        self._pos = 0
        self.filled = 0

    def push(self, chunk: np.ndarray) -> None:
        n = chunk.shape[1]
        if n > self.length:
            chunk, n = chunk[:, -self.length :], self.length
        end = self._pos + n
        if end <= self.length:
            self._buf[:, self._pos : end] = chunk
        else:
            first = self.length - self._pos
            self._buf[:, self._pos :] = chunk[:, :first]
            self._buf[:, : n - first] = chunk[:, first:]
        self._pos = end % self.length
        self.filled = min(self.length, self.filled + n)

    def window(self) -> np.ndarray:
        """Copy of the buffer in time order (oldest sample first)."""
        return np.concatenate([self._buf[:, self._pos :], self._buf[:, : self._pos]], axis=1)


# --------------------------------------------------------------------------- decoders and hooks


@dataclass
class DecodeContext:
    decoder: "Decoder"
    stats_fn: object = None


class Decoder:
    channel_count: int

    def check(self, window_samples: int, hop: int) -> None:
        pass

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        raise NotImplementedError


class ModelDecoder(Decoder):
    def __init__(self, state: nn.ModelState):
        self.state = state
        self.channel_count = state.config.channel_count

    def check(self, window_samples: int, hop: int) -> None:
        cfg = self.state.config
        model_hop = cfg.rap_plan.window_stride * cfg.downsampling_factor
        if cfg.window_samples != window_samples or model_hop != hop:
            raise ConfigurationError(
                f"model pooling plan decodes {cfg.window_samples}-sample windows every {model_hop} samples; "
                f"the session needs {window_samples} every {hop}; apply a matching RAP plan first"
            )

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        return nn.forward(self.state, window[None], "infer", stats_fn=ctx.stats_fn).probs[0, 0]


class MdmDecoder(Decoder):
    def __init__(self, model: MdmModel):
        self.model = model
        self.channel_count = model.class_means.shape[-1]

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        if ctx.stats_fn is not None:
            raise ConfigurationError("batch-norm adaptation does not apply to the MDM decoder")
        return mdm_predict(window, self.model)


class Hook:
    """Adaptation step applied to each window before decoding."""

    def reset(self) -> None:
        pass

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        return window


class AlignmentHook(Hook):
    """Online EA/RA: fold the window into the reference, then whiten it.

    ``initial`` seeds the reference (for generic recentering, a source
    reference carrying a prior weight); by default the first window starts it.
    """

    def __init__(self, method: str, initial: adapt.AlignmentReference | None = None):
        self.method = method
        self.initial = initial if initial is not None else adapt.AlignmentReference.empty(method)
        self.ref = self.initial

    def reset(self) -> None:
        self.ref = self.initial

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        self.ref = adapt.update_reference_online(self.ref, window)
        return adapt.align(window, self.ref)


class StaticAlignmentHook(Hook):
    """Whitens every window with a fixed reference fitted beforehand."""

    def __init__(self, ref: adapt.AlignmentReference):
        self.ref = ref

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        return adapt.align(window, self.ref)


class AdaBnHook(Hook):
    """Online AdaBN: every BN layer folds in the window's statistics before normalizing."""

    def __init__(self, momentum: float = 0.001):
        self.momentum = momentum
        self.state: adapt.AdaBnState | None = None

    def reset(self) -> None:
        self.state = None

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        if not isinstance(ctx.decoder, ModelDecoder):
            raise ConfigurationError("AdaBN needs a network decoder")
        if self.state is None:
            self.state = adapt.AdaBnState.from_model(ctx.decoder.state, self.momentum)
        ada = self.state

        def stats(layer, z):
            adapt.fold_layer_stats(ada, layer, z.mean(axis=(0, 2)), z.var(axis=(0, 2)))
            return ada.mean[layer], ada.var[layer]

        ada.update_count += 1
        ctx.stats_fn = stats
        return window


class StallHook(Hook):
    """Sleeps ``stall_ms`` at the given global ticks; used to inject deadline overruns."""

    def __init__(self, ticks: Sequence[int], stall_ms: float):
        self.ticks = set(ticks)
        self.stall_ms = stall_ms
        self.tick = 0

    def __call__(self, window: np.ndarray, ctx: DecodeContext) -> np.ndarray:
        if self.tick in self.ticks:
            time.sleep(self.stall_ms / 1000.0)
        self.tick += 1
        return window


def hooks_for_mode(mode: adapt.AdaptationMode, adabn_momentum: float = 0.001) -> list[Hook]:
    """Online hooks for a mode string: alignment first, then batch-norm adaptation."""
    hooks: list[Hook] = []
    if mode.alignment:
        hooks.append(AlignmentHook(mode.alignment))
    if mode.adabn:
        hooks.append(AdaBnHook(adabn_momentum))
    return hooks


# --------------------------------------------------------------------------- sessions


@dataclass
class SessionConfig:
    task: OnlineTaskSpec
    hooks: list[Hook] = field(default_factory=list)
    reset_per_trial: bool = False
    real_time: bool = False
    max_events: int | None = None  # stop the stream after this many windows


@dataclass
class StreamEvent:
    tick: int
    trial: int
    window: int
    probs: np.ndarray
    latency_ms: float
    deadline_met: bool
    jitter_ms: float | None = None

    def to_dict(self) -> dict:
        return {"tick": self.tick, "trial": self.trial, "window": self.window, "probs": self.probs.tolist(),
                "latency_ms": self.latency_ms, "deadline_met": self.deadline_met, "jitter_ms": self.jitter_ms}


@dataclass
class SessionResult:
    events: list[StreamEvent]
    deadline_ms: float
    wall_s: float

    @property
    def probs(self) -> np.ndarray:
        return np.stack([e.probs for e in self.events])

    def trial_probs(self) -> list[np.ndarray]:
        """Per-trial ``(N_w, classes)`` probability blocks in trial order."""
        out: dict[int, list[np.ndarray]] = {}
        for e in self.events:
            out.setdefault(e.trial, []).append(e.probs)
        return [np.stack(out[k]) for k in sorted(out)]

    def summary(self) -> dict:
        lat = np.array([e.latency_ms for e in self.events]) if self.events else np.zeros(0)
        misses = [e.tick for e in self.events if not e.deadline_met]
        jitter = [e.jitter_ms for e in self.events if e.jitter_ms is not None]
        return {
            "events": len(self.events),
            "deadline_ms": self.deadline_ms,
            "latency_ms": latency_stats(lat) if lat.size else None,
            "deadline_misses": len(misses),
            "missed_ticks": misses,
            "max_jitter_ms": max(jitter) if jitter else None,
            "wall_s": self.wall_s,
        }


def session_geometry(task: OnlineTaskSpec, fs: float) -> tuple[int, int]:
    """Window length and hop in samples."""
    hop = _frac(fs) / _frac(task.update_frequency)
    if hop.denominator != 1:
        raise ConfigurationError(f"f_s={fs:g} Hz is not a whole multiple of f_u={task.update_frequency:g} Hz")
    window = _frac(task.window_length) * _frac(fs)
    if window.denominator != 1:
        raise ConfigurationError("the window is not a whole number of samples")
    return int(window), int(hop)


def run_session(trials: TrialSet, decoder: Decoder, config: SessionConfig) -> SessionResult:
    """Replay ``trials`` through ``decoder`` and return one event per window.

    Hooks are copied at session start, so a config can be replayed any number
    of times with identical results.
    """
    fs = trials.sampling_frequency
    window, hop = session_geometry(config.task, fs)
    decoder.check(window, hop)
    if trials.data.shape[1] != decoder.channel_count:
        raise ConfigurationError(f"trials have {trials.data.shape[1]} channels, decoder expects {decoder.channel_count}")
    length = trials.data.shape[2]
    if config.task.trial_length is not None and _frac(config.task.trial_length) * _frac(fs) != length:
        raise ConfigurationError(f"trials have {length} samples, the task expects {config.task.trial_length:g} s at {fs:g} Hz")
    if length < window:
        raise ConfigurationError(f"trials of {length} samples are shorter than one window ({window})")
    n_w = (length - window) // hop + 1
    hooks = [copy.deepcopy(h) for h in config.hooks]
    deadline_ms = 1000.0 / config.task.update_frequency
    buf = RingBuffer(trials.data.shape[1], window, trials.data.dtype)
    events: list[StreamEvent] = []
    tick = 0
    t_start = time.monotonic()
    for i, trial in enumerate(trials.data):
        if config.reset_per_trial:
            for h in hooks:
                h.reset()
        buf.reset()
        trial_offset = i * length / fs
        for j in range(n_w):
            if config.max_events is not None and tick >= config.max_events:
                break
            start = 0 if j == 0 else window + (j - 1) * hop
            end = window + j * hop
            jitter = None
            if config.real_time:
                due = t_start + trial_offset + end / fs
                now = time.monotonic()
                if due > now:
                    time.sleep(due - now)
                jitter = (time.monotonic() - due) * 1000.0
            buf.push(trial[:, start:end])
            t0 = time.perf_counter()
            w = buf.window()
            ctx = DecodeContext(decoder)
            for h in hooks:
                w = h(w, ctx)
            probs = np.asarray(decoder(w, ctx))
            latency = (time.perf_counter() - t0) * 1000.0
            events.append(StreamEvent(tick, i, j, probs, latency, latency <= deadline_ms, jitter))
            tick += 1
    return SessionResult(events, deadline_ms, time.monotonic() - t_start)


def latency_stats(lat_ms: np.ndarray) -> dict:
    lat_ms = np.asarray(lat_ms, dtype=float)
    if lat_ms.size == 0:
        raise DomainError("no latency samples")
    return {"mean": float(lat_ms.mean()), "p95": float(np.percentile(lat_ms, 95)), "max": float(lat_ms.max()),
            "n": int(lat_ms.size)}


def measure_latency(decoder: Decoder, windows: np.ndarray, hooks: Sequence[Hook] = (), repetitions: int = 200,
                    warmup: int = 10) -> dict:
    """Wall-clock statistics (ms) of single-window decoding, hooks included.

    ``warmup`` initial decodes are excluded. Windows are cycled if there are
    fewer than ``warmup + repetitions``.
    """
    if repetitions < 1:
        raise DomainError("latency needs at least one repetition")
    windows = np.asarray(windows)
    if windows.ndim == 2:
        windows = windows[None]
    hooks = [copy.deepcopy(h) for h in hooks]
    lat = []
    for k in range(warmup + repetitions):
        w = windows[k % len(windows)].copy()
        t0 = time.perf_counter()
        ctx = DecodeContext(decoder)
        for h in hooks:
            w = h(w, ctx)
        decoder(w, ctx)
        if k >= warmup:
            lat.append((time.perf_counter() - t0) * 1000.0)
    return latency_stats(np.array(lat))


def write_events(path: str | Path, events: Sequence[StreamEvent]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict()) + "\n")


def write_summary(path: str | Path, result: SessionResult) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2))


def window_count(trials: TrialSet, task: OnlineTaskSpec) -> int:
    window, hop = session_geometry(task, trials.sampling_frequency)
    return (trials.data.shape[2] - window) // hop + 1

