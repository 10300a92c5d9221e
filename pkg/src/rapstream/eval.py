"""Trial- and window-level metrics, electrode discriminancy and paired t-tests.

Scoring rules:

* TAcc: average the window probability rows of a trial; correct when the
  label's mean probability is strictly the largest. A tie at the top counts
  as incorrect.
* uTAcc (majority): each window votes for its argmax class (lowest index on
  ties); correct when the label gets strictly the most votes.
* WAcc: fraction of windows whose row puts the label strictly on top.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .errors import DegenerateTestError, DomainError, IndexOutOfRangeError, ShapeError
from .model import ModelState, forward, zero_electrode


@dataclass(frozen=True)
class TrialPrediction:
    probs: np.ndarray  # (N_w, classes)
    label: int

    def __post_init__(self) -> None:
        p = np.asarray(self.probs)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeError(f"expected (windows, classes) probabilities, got {p.shape}")
        if not 0 <= self.label < p.shape[1]:
            raise IndexOutOfRangeError(f"label {self.label} outside [0, {p.shape[1]})")


def _strict_top(row: np.ndarray, label: int) -> bool:
    others = np.delete(row, label)
    return bool(row[label] > others.max())


def _check(preds: Sequence[TrialPrediction]) -> None:
    if len(preds) == 0:
        raise DomainError("no trial predictions to score")


def trial_correct(pred: TrialPrediction) -> bool:
    return _strict_top(np.asarray(pred.probs, dtype=np.float64).mean(axis=0), pred.label)


def trial_accuracy(preds: Sequence[TrialPrediction]) -> float:
    _check(preds)
    return sum(trial_correct(p) for p in preds) / len(preds)


def majority_correct(pred: TrialPrediction) -> bool:
    probs = np.asarray(pred.probs)
    votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
    return _strict_top(votes, pred.label)


def unaveraged_trial_accuracy(preds: Sequence[TrialPrediction]) -> float:
    _check(preds)
    return sum(majority_correct(p) for p in preds) / len(preds)


def window_hits(pred: TrialPrediction) -> np.ndarray:
    probs = np.asarray(pred.probs)
    return np.array([_strict_top(row, pred.label) for row in probs])


def window_accuracy(preds: Sequence[TrialPrediction]) -> tuple[float, list[float] | None]:
    """Overall window accuracy and the per-window-index accuracy curve.

    The curve is ``None`` when trials have different window counts.
    """
    _check(preds)
    hits = [window_hits(p) for p in preds]
    wacc = float(np.concatenate(hits).mean())
    if len({len(h) for h in hits}) != 1:
        return wacc, None
    return wacc, np.stack(hits).mean(axis=0).tolist()


@dataclass
class MetricReport:
    tacc: float
    utacc: float
    wacc: float
    per_window_accuracy: list[float] | None
    n_trials: int
    n_windows: int

    def percentages(self) -> dict[str, float]:
        return {k: round(100 * getattr(self, k), 1) for k in ("tacc", "utacc", "wacc")}


def evaluate(preds: Sequence[TrialPrediction]) -> MetricReport:
    wacc, curve = window_accuracy(preds)
    return MetricReport(
        tacc=trial_accuracy(preds),
        utacc=unaveraged_trial_accuracy(preds),
        wacc=wacc,
        per_window_accuracy=curve,
        n_trials=len(preds),
        n_windows=int(sum(np.asarray(p.probs).shape[0] for p in preds)),
    )


def predictions_from_array(probs: np.ndarray, labels: Sequence[int]) -> list[TrialPrediction]:
    """Wrap ``(n_trials, N_w, classes)`` probabilities."""
    probs = np.asarray(probs)
    if probs.ndim != 3 or len(probs) != len(labels):
        raise ShapeError(f"expected (trials, windows, classes) for {len(labels)} trials, got {probs.shape}")
    return [TrialPrediction(p, int(y)) for p, y in zip(probs, labels)]


# --------------------------------------------------------------------------- electrode discriminancy

Decoder = Callable[[np.ndarray], np.ndarray]  # (n, C, L) trials -> (n, N_w, classes)


def _as_decoder(decoder) -> Decoder:
    if callable(decoder):
        return decoder
    if isinstance(decoder, ModelState):
        return lambda x: forward(decoder, x, "infer").probs
    raise TypeError("decoder must be a ModelState or a callable returning per-window probabilities")


def eds(decoder, data: np.ndarray, labels: Sequence[int], channel: int, class_label: int | None = None) -> float:
    """TAcc with all channels minus TAcc with ``channel`` zeroed; the sign is kept.

    With ``class_label`` only trials of that class are scored.
    """
    decode = _as_decoder(decoder)
    data = np.asarray(data)
    labels = np.asarray(labels)
    if not 0 <= channel < data.shape[-2]:
        raise IndexOutOfRangeError(f"channel {channel} outside [0, {data.shape[-2]})")
    if class_label is not None:
        keep = labels == class_label
        data, labels = data[keep], labels[keep]
    base = trial_accuracy(predictions_from_array(decode(data), labels))
    zeroed = trial_accuracy(predictions_from_array(decode(zero_electrode(None, data, channel)), labels))
    return base - zeroed


def eds_all(decoder, data: np.ndarray, labels: Sequence[int], class_label: int | None = None) -> list[float]:
    return [eds(decoder, data, labels, c, class_label) for c in range(np.asarray(data).shape[-2])]


# --------------------------------------------------------------------------- statistics


def student_t_sf(t: float, df: float) -> float:
    """``P(T_df > t)`` through the regularized incomplete beta function."""
    if df <= 0:
        raise DomainError("degrees of freedom must be positive")
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def paired_ttest_onesided(a: Sequence[float], b: Sequence[float]) -> dict:
    """One-sided paired t-test of ``mean(a - b) > 0``.

    Returns ``{"t", "p", "n", "df"}``. Raises :class:`DegenerateTestError` when
    the differences have zero spread, rather than reporting p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise DegenerateTestError("a paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    # a spread at rounding level means the differences are constant
    if sd <= 1e-12 * float(np.max(np.abs(d))):
        if np.all(d == 0):
            return {"t": 0.0, "p": 0.5, "n": n, "df": n - 1}
        raise DegenerateTestError(f"all {n} differences equal {d[0]:g}; the t statistic is undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return {"t": t, "p": student_t_sf(t, n - 1), "n": n, "df": n - 1}


# --------------------------------------------------------------------------- reports


@dataclass
class Report:
    method: str
    per_subject: list[dict] = field(default_factory=list)
    curve: list[float] | None = None
    eds: list[float] | None = None

    def summary(self) -> tuple[dict, dict]:
        mean, std = {}, {}
        for k in ("tacc", "utacc", "wacc"):
            vals = [row[k] for row in self.per_subject]
            mean[k] = float(np.mean(vals)) if vals else float("nan")
            std[k] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, std

    def to_dict(self) -> dict:
        mean, std = self.summary()
        return {"method": self.method, "utacc_definition": "majority", "per_subject": self.per_subject,
                "mean": mean, "std": std, "curve": self.curve, "eds": self.eds}


def build_report(method: str, per_subject: Mapping[str, MetricReport], eds_scores: list[float] | None = None) -> Report:
    rows = [{"id": sid, "tacc": r.tacc, "utacc": r.utacc, "wacc": r.wacc} for sid, r in per_subject.items()]
    curves = [r.per_window_accuracy for r in per_subject.values()]
    curve = None
    if curves and all(c is not None for c in curves) and len({len(c) for c in curves}) == 1:
        curve = np.mean(np.array(curves), axis=0).tolist()
    return Report(method, rows, curve, eds_scores)


def write_report_json(path: str | Path, report: Report) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def write_report_csv(path: str | Path, report: Report) -> None:
    """One row per subject plus mean and std rows; percentages to one decimal."""
    mean, std = report.summary()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "id", "tacc_pct", "utacc_majority_pct", "wacc_pct"])
        for row in report.per_subject:
            w.writerow([report.method, row["id"], *(f"{100 * row[k]:.1f}" for k in ("tacc", "utacc", "wacc"))])
        w.writerow([report.method, "mean", *(f"{100 * mean[k]:.1f}" for k in ("tacc", "utacc", "wacc"))])
        w.writerow([report.method, "std", *(f"{100 * std[k]:.1f}" for k in ("tacc", "utacc", "wacc"))])


def metric_report_dict(r: MetricReport) -> dict:
    return asdict(r)
