"""Recording ingestion, preprocessing, epoching and a synthetic EEG cohort.

File formats
------------
EEGB (one continuous recording)::

    bytes 0-3   b"EEGB"
    byte  4     version (1)
    bytes 5-8   header length N, uint32 little-endian
    N bytes     UTF-8 JSON header {"fs", "channels", "n_samples", "markers": [{"sample", "label"}]}
                optional keys: "trial_length" (s), "start_offset" (s)
    rest        n_samples * n_channels float32 little-endian, sample-major

Manifest (UTF-8 JSON)::

    {"task": ["left_hand", "right_hand"],
     "entries": [{"subject": "s01", "path": "s01_off.eegb", "role": "offline"}, ...],
     "epoch": {"start_offset": 0.0, "trial_length": 3.0},          # optional
     "preprocess": {"bandpass": [5, 35], "resample": 256}}          # optional

Relative paths resolve against the manifest's directory. Epoch timing falls
back to the ``trial_length``/``start_offset`` header keys written by
:func:`write_trialset`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy import signal

from .errors import ConfigurationError, DomainError, IndexOutOfRangeError, ParseError, ShapeError
from .rap import samples

MAGIC = b"EEGB"
VERSION = 1
ROLES = ("offline", "online")


@dataclass(frozen=True)
class RecordingSpec:
    sampling_frequency: float
    channel_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.sampling_frequency > 0:
            raise DomainError(f"sampling frequency must be positive, got {self.sampling_frequency}")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DomainError("channel names must be unique")

    @property
    def channel_count(self) -> int:
        return len(self.channel_names)


@dataclass(frozen=True)
class Trial:
    data: np.ndarray
    label: int
    sampling_frequency: float

    @property
    def trial_length(self) -> float:
        return self.data.shape[1] / self.sampling_frequency


@dataclass
class TrialSet:
    """Equal-length labeled epochs of one subject and role.

    ``data`` has shape ``(n_trials, n_channels, n_samples)`` and is stored as
    float32, the precision of the on-disk format and of the model.
    """

    data: np.ndarray
    labels: np.ndarray
    sampling_frequency: float
    channel_names: tuple[str, ...]
    subject: str = ""
    role: str = "offline"

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise ShapeError(f"trial data must be (trials, channels, samples), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise ShapeError("one label per trial expected")
        if self.data.shape[1] != len(self.channel_names):
            raise ShapeError(f"{self.data.shape[1]} channels but {len(self.channel_names)} names")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("trial data contains non-finite values")
        self.channel_names = tuple(self.channel_names)
        self.data.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def trial_length(self) -> float:
        return self.n_samples / self.sampling_frequency

    def trials(self) -> list[Trial]:
        return [Trial(x, int(y), self.sampling_frequency) for x, y in zip(self.data, self.labels)]

    def subset(self, index: Sequence[int] | np.ndarray) -> "TrialSet":
        return replace(self, data=self.data[np.asarray(index)], labels=self.labels[np.asarray(index)])

    @classmethod
    def from_trials(cls, trials: Sequence[Trial], channel_names: Sequence[str], **kw) -> "TrialSet":
        if not trials:
            raise ConfigurationError("cannot build a TrialSet from zero trials")
        return cls(
            data=np.stack([t.data for t in trials]),
            labels=np.array([t.label for t in trials]),
            sampling_frequency=trials[0].sampling_frequency,
            channel_names=tuple(channel_names),
            **kw,
        )

    @staticmethod
    def concatenate(sets: Sequence["TrialSet"]) -> "TrialSet":
        if not sets:
            raise ConfigurationError("nothing to concatenate")
        first = sets[0]
        for s in sets[1:]:
            if s.sampling_frequency != first.sampling_frequency or s.channel_names != first.channel_names:
                raise ShapeError("cannot concatenate trial sets with different recording specs")
        return replace(
            first,
            data=np.concatenate([s.data for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
        )


# --------------------------------------------------------------------------- DSP


def bandpass(x: np.ndarray, fs: float, low: float, high: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth bandpass along the last axis (forward-backward)."""
    if not 0 < low < high < fs / 2:
        raise DomainError(f"band [{low}, {high}] Hz must satisfy 0 < low < high < fs/2 = {fs / 2}")
    sos = bandpass_sos(fs, low, high, order)
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def bandpass_sos(fs: float, low: float, high: float, order: int = 4) -> np.ndarray:
    return signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")


def _ratio(src: float, dst: float) -> tuple[int, int]:
    r = Fraction(repr(float(dst))) / Fraction(repr(float(src)))
    r = r.limit_denominator(10_000)
    return r.numerator, r.denominator


def antialias_filter(up: int, down: int, src: float, dst: float, beta: float = 5.0) -> np.ndarray:
    """Kaiser-windowed FIR at ``0.45 * dst`` designed at the upsampled rate.

    Each of the ``up`` polyphase branches is normalized to unit DC gain, so
    constant signals pass through the rational resampler unchanged.
    """
    half_len = 10 * max(up, down)
    cutoff = 0.45 * dst / (up * src / 2)
    h = signal.firwin(2 * half_len + 1, cutoff, window=("kaiser", beta))
    for phase in range(up):
        h[phase::up] /= h[phase::up].sum()
    return h / up


def resample(x: np.ndarray, src: float, dst: float) -> np.ndarray:
    """Polyphase rational downsampling along the last axis.

    Output length is ``round(n * dst / src)`` (half up).
    """
    if not src >= dst > 0:
        if dst > src:
            raise DomainError(f"upsampling {src} -> {dst} Hz is not supported")
        raise DomainError(f"invalid rates {src} -> {dst} Hz")
    x = np.asarray(x, dtype=np.float64)
    if src == dst:
        return x.copy()
    up, down = _ratio(src, dst)
    h = antialias_filter(up, down, src, dst)
    y = signal.resample_poly(x, up, down, axis=-1, window=h, padtype="line")
    n_out = math.floor(Fraction(x.shape[-1] * up, down) + Fraction(1, 2))
    return y[..., :n_out]


def extract_epochs(
    continuous: np.ndarray,
    markers: Iterable[dict],
    start_offset: float,
    trial_length: float,
    fs: float,
) -> list[Trial]:
    """Slice one epoch per marker from a ``(channels, samples)`` recording.

    The epoch of a marker at sample ``m`` is
    ``[m + round(start_offset * fs), m + round(start_offset * fs) + round(trial_length * fs))``.
    """
    continuous = np.asarray(continuous)
    if continuous.ndim != 2:
        raise ShapeError(f"continuous data must be (channels, samples), got {continuous.shape}")
    offset = samples(start_offset, fs)
    length = samples(trial_length, fs)
    if length < 1:
        raise DomainError("trial length must cover at least one sample")
    total = continuous.shape[1]
    out = []
    for i, marker in enumerate(markers):
        start = int(marker["sample"]) + offset
        end = start + length
        if start < 0 or end > total:
            raise IndexOutOfRangeError(
                f"epoch of marker {i} (sample {marker['sample']}) spans [{start}, {end}) outside [0, {total})"
            )
        out.append(Trial(continuous[:, start:end].copy(), int(marker["label"]), fs))
    return out


# --------------------------------------------------------------------------- EEGB


@dataclass
class Recording:
    data: np.ndarray  # (channels, samples) float32
    spec: RecordingSpec
    markers: list[dict]
    extra: dict = field(default_factory=dict)


def write_eegb(path: str | Path, data: np.ndarray, fs: float, channels: Sequence[str],
               markers: Sequence[dict], **extra) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] != len(channels):
        raise ShapeError(f"data must be (channels, samples) with {len(channels)} channels, got {data.shape}")
    header = {
        "fs": fs,
        "channels": list(channels),
        "n_samples": int(data.shape[1]),
        "markers": [{"sample": int(m["sample"]), "label": int(m["label"])} for m in markers],
        **extra,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(data.T).tobytes())


def read_eegb(path: str | Path) -> Recording:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ParseError("bad magic, expected b'EEGB'", path, 0)
    if len(raw) < 9:
        raise ParseError("truncated preamble", path, len(raw))
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", path, 4)
    if 9 + hlen > len(raw):
        raise ParseError(f"header length {hlen} exceeds file size", path, 5)
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed header: {exc}", path, 9) from exc
    for key in ("fs", "channels", "n_samples", "markers"):
        if key not in header:
            raise ParseError(f"header misses '{key}'", path, 9)
    try:
        spec = RecordingSpec(float(header["fs"]), tuple(header["channels"]))
        n = int(header["n_samples"])
        markers = [{"sample": int(m["sample"]), "label": int(m["label"])} for m in header["markers"]]
    except (TypeError, ValueError, KeyError) as exc:
        raise ParseError(f"invalid header field: {exc}", path, 9) from exc
    body = 9 + hlen
    expected = n * spec.channel_count * 4
    if len(raw) - body != expected:
        raise ParseError(
            f"payload holds {len(raw) - body} bytes, header declares {n} samples x {spec.channel_count} channels = {expected}",
            path,
            body,
        )
    data = np.frombuffer(raw, dtype="<f4", offset=body).reshape(n, spec.channel_count).T
    extra = {k: v for k, v in header.items() if k not in ("fs", "channels", "n_samples", "markers")}
    return Recording(np.ascontiguousarray(data, dtype=np.float32), spec, markers, extra)


def write_trialset(path: str | Path, ts: TrialSet) -> None:
    """Store trials back to back; markers point at each trial start."""
    n, _, s = ts.data.shape
    continuous = np.concatenate(list(ts.data), axis=1) if n else np.zeros((len(ts.channel_names), 0))
    markers = [{"sample": i * s, "label": int(y)} for i, y in enumerate(ts.labels)]
    write_eegb(path, continuous, ts.sampling_frequency, ts.channel_names, markers,
               trial_length=s / ts.sampling_frequency, start_offset=0.0)


# --------------------------------------------------------------------------- cohort


@dataclass(frozen=True)
class ManifestEntry:
    subject: str
    path: Path
    role: str


@dataclass(frozen=True)
class CohortManifest:
    task: tuple[str, str]
    entries: tuple[ManifestEntry, ...]
    epoch: dict | None = None
    preprocess: dict | None = None

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})


def parse_manifest(path: str | Path) -> CohortManifest:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed manifest: {exc}", str(path), getattr(exc, "pos", 0)) from exc
    if not isinstance(doc, dict) or "entries" not in doc or "task" not in doc:
        raise ParseError("manifest needs 'task' and 'entries'", str(path), 0)
    task = doc["task"]
    if not (isinstance(task, list) and len(task) == 2):
        raise ParseError("'task' must list exactly two class names", str(path), raw.find(b'"task"'))
    entries = []
    for i, e in enumerate(doc["entries"]):
        try:
            subject, epath, role = str(e["subject"]), e["path"], e["role"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"entry {i} misses {exc}", str(path), raw.find(b'"entries"')) from exc
        if role not in ROLES:
            raise ParseError(f"entry {i}: unknown role {role!r}, expected one of {ROLES}", str(path),
                             max(raw.find(json.dumps(role).encode()), 0))
        p = Path(epath)
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise ParseError(f"entry {i}: file {p} does not exist", str(path), raw.find(b'"entries"'))
        entries.append(ManifestEntry(subject, p, role))
    if not entries:
        raise ParseError("manifest lists no entries", str(path), 0)
    return CohortManifest(tuple(task), tuple(entries), doc.get("epoch"), doc.get("preprocess"))


class Cohort:
    """Trials grouped by subject and role.

    Groups backed by files are read on first access when ``lazy`` is set, and
    every file read is appended to :attr:`read_log`, which lets callers audit
    which recordings a procedure touched.
    """

    def __init__(self, manifest: CohortManifest | None = None, groups: dict | None = None, lazy: bool = False):
        self.manifest = manifest
        self._groups: dict[tuple[str, str], TrialSet] = dict(groups or {})
        self.read_log: list[Path] = []
        if manifest is not None and not lazy:
            for key in self._keys_from_manifest():
                self.trials(*key)

    def _keys_from_manifest(self) -> list[tuple[str, str]]:
        assert self.manifest is not None
        keys = {(e.subject, e.role) for e in self.manifest.entries}
        return sorted(keys, key=lambda k: (k[0], ROLES.index(k[1])))

    @property
    def subjects(self) -> list[str]:
        if self.manifest is not None:
            return self.manifest.subjects
        return sorted({s for s, _ in self._groups})

    def keys(self) -> list[tuple[str, str]]:
        if self.manifest is not None:
            return self._keys_from_manifest()
        return sorted(self._groups, key=lambda k: (k[0], ROLES.index(k[1])))

    def has(self, subject: str, role: str) -> bool:
        return (subject, role) in self.keys()

    def trials(self, subject: str, role: str) -> TrialSet:
        key = (subject, role)
        if key not in self._groups:
            if self.manifest is None or key not in self.keys():
                raise ConfigurationError(f"cohort has no {role} data for subject {subject!r}")
            parts = [self._load_entry(e) for e in self.manifest.entries if (e.subject, e.role) == key]
            self._groups[key] = TrialSet.concatenate(parts)
        return self._groups[key]

    def _load_entry(self, entry: ManifestEntry) -> TrialSet:
        self.read_log.append(entry.path)
        rec = read_eegb(entry.path)
        data, fs = rec.data, rec.spec.sampling_frequency
        markers = rec.markers
        pre = (self.manifest.preprocess if self.manifest else None) or {}
        if "bandpass" in pre:
            lo, hi = pre["bandpass"]
            data = bandpass(data, fs, lo, hi)
        if "resample" in pre and pre["resample"] != fs:
            dst = float(pre["resample"])
            data = resample(data, fs, dst)
            markers = [{"sample": samples(m["sample"] / fs, dst), "label": m["label"]} for m in markers]
            fs = dst
        epoch = (self.manifest.epoch if self.manifest else None) or {}
        offset = epoch.get("start_offset", rec.extra.get("start_offset"))
        length = epoch.get("trial_length", rec.extra.get("trial_length"))
        if offset is None or length is None:
            raise ParseError("no epoch timing in manifest or header", str(entry.path), 9)
        trials = extract_epochs(data, markers, float(offset), float(length), fs)
        return TrialSet.from_trials(trials, rec.spec.channel_names, subject=entry.subject, role=entry.role)


def load_cohort(manifest_path: str | Path, lazy: bool = False) -> Cohort:
    return Cohort(parse_manifest(manifest_path), lazy=lazy)


def write_cohort(directory: str | Path, cohort: Cohort, task: Sequence[str] = ("left_hand", "right_hand")) -> Path:
    """Write every group as an EEGB file plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for subject, role in cohort.keys():
        name = f"{subject}_{role}.eegb"
        write_trialset(directory / name, cohort.trials(subject, role))
        entries.append({"subject": subject, "path": name, "role": role})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"task": list(task), "entries": entries}, indent=2))
    return manifest


# --------------------------------------------------------------------------- synthetic cohort

SYNTH_CHANNELS = ("FC3", "FCz", "FC4", "C3", "Cz", "C4", "CP3", "CP4")
LEFT_MOTOR, RIGHT_MOTOR = 3, 5  # indices of C3 and C4


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic two-class motor-imagery cohort.

    Class 0 (left hand) attenuates the 10-12 Hz rhythm over the right motor
    cortex (C4), class 1 over the left (C3), by a factor
    ``1 - erd_depth * class_separability``.
    """

    subject_count: int = 8
    trials_per_subject: int = 60
    class_separability: float = 1.0
    subject_shift_scale: float = 0.0
    session_shift_scale: float = 0.0
    rng_seed: int = 0
    sampling_frequency: float = 128.0
    trial_length: float = 3.0
    rhythm_amplitude: float = 1.5
    erd_depth: float = 0.6
    amplitude_jitter: float = 0.15

    def __post_init__(self) -> None:
        if self.subject_count < 1 or self.trials_per_subject < 1:
            raise ConfigurationError("subject and trial counts must be at least 1")
        if not 0.0 <= self.class_separability <= 1.0:
            raise ConfigurationError("class_separability must lie in [0, 1]")
        if self.subject_shift_scale < 0 or self.session_shift_scale < 0:
            raise ConfigurationError("shift scales must be non-negative")
        if not 0.0 <= self.erd_depth < 1.0:
            raise ConfigurationError("erd_depth must lie in [0, 1)")


def _pink_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float) -> np.ndarray:
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1 / fs)
    spec *= 1.0 / np.sqrt(np.maximum(f, 1.0))
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _random_spd_mixing(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    if scale == 0:
        return np.eye(n)
    g = rng.standard_normal((n, n)) / np.sqrt(n)
    return scipy.linalg.expm(scale * 0.5 * (g + g.T))


def _synth_trials(rng: np.random.Generator, cfg: SynthConfig, labels: np.ndarray, mixing: np.ndarray) -> np.ndarray:
    fs = cfg.sampling_frequency
    s = samples(cfg.trial_length, fs)
    c = len(SYNTH_CHANNELS)
    n = len(labels)
    pad = int(fs)  # filter transient margin, cropped afterwards
    noise = _pink_noise(rng, (n, c, s), fs)
    sources = rng.standard_normal((n, 2, s + 2 * pad))
    sos = bandpass_sos(fs, 10.0, 12.0)
    sources = signal.sosfiltfilt(sos, sources, axis=-1)[..., pad:-pad]
    sources /= sources.std(axis=-1, keepdims=True)
    gain = cfg.rhythm_amplitude * np.exp(cfg.amplitude_jitter * rng.standard_normal((n, 2)))
    attenuation = 1.0 - cfg.erd_depth * cfg.class_separability
    # class 0 attenuates the right-hemisphere source, class 1 the left one
    gain[labels == 0, 1] *= attenuation
    gain[labels == 1, 0] *= attenuation
    projection = np.zeros((c, 2))
    projection[LEFT_MOTOR, 0] = 1.0
    projection[RIGHT_MOTOR, 1] = 1.0
    projection[[0, 6], 0] = 0.35  # FC3, CP3
    projection[[2, 7], 1] = 0.35  # FC4, CP4
    projection[4, :] = 0.2  # Cz sees both
    clean = noise + np.einsum("cs,ns,nst->nct", projection, gain, sources)
    return np.einsum("cd,ndt->nct", mixing, clean)


def generate_synth_cohort(cfg: SynthConfig) -> Cohort:
    """Deterministic synthetic cohort with offline and online roles per subject."""
    root = np.random.SeedSequence(cfg.rng_seed)
    groups = {}
    c = len(SYNTH_CHANNELS)
    for i, seq in enumerate(root.spawn(cfg.subject_count)):
        rng = np.random.default_rng(seq)
        subject = f"S{i:02d}"
        subject_mix = _random_spd_mixing(rng, c, cfg.subject_shift_scale)
        session_mix = _random_spd_mixing(rng, c, cfg.session_shift_scale)
        for role, mixing in (("offline", subject_mix), ("online", session_mix @ subject_mix)):
            labels = rng.permutation(np.arange(cfg.trials_per_subject) % 2)
            data = _synth_trials(rng, cfg, labels, mixing)
            groups[(subject, role)] = TrialSet(data, labels, cfg.sampling_frequency, SYNTH_CHANNELS, subject, role)
    return Cohort(groups=groups)
