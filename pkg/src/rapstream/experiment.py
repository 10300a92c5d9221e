"""Cross-subject pipeline: train on sources, adapt to the target, stream its online trials, score.

For every target subject a leave-one-subject-out model is trained per seed
(one per source alignment the requested modes need), optionally adapted,
replayed window by window and scored. Metrics are averaged over seeds per
subject, and per-seed means are kept for seed-level comparisons.

Adaptation data comes from one of two places:

* ``calibration="online"``: single-instance adaptation inside the stream,
  using only windows already seen (hooks);
* ``calibration="offline"``: unsupervised adaptation on the target's
  offline trials (reference fit and/or AdaBN replacement) before streaming.

Fine-tuning always uses the target's labeled offline trials.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adapt
from . import eval as ev
from . import model as nn
from . import stream, train
from .data import Cohort, TrialSet
from .errors import ConfigurationError
from .rap import OnlineTaskSpec, plan_rap

log = logging.getLogger(__name__)

CALIBRATIONS = ("online", "offline")

# layer sizes; the downsampling kernels depend on the sampling rate and are passed separately
ARCHITECTURES = {
    "basenet": {},
    "compact": {"temporal_filters": 8, "temporal_kernel": 32, "second_block_filters": 16, "second_kernel": 8},
}


def build_model_config(channel_count: int, sampling_frequency: float, task: OnlineTaskSpec,
                       downsampling: Sequence[int] = (8,), architecture: str = "basenet", **overrides) -> nn.ModelConfig:
    if architecture not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {architecture!r}; expected one of {sorted(ARCHITECTURES)}")
    plan = plan_rap(sampling_frequency, list(downsampling), task)
    return nn.ModelConfig(channel_count=channel_count, rap_plan=plan, **{**ARCHITECTURES[architecture], **overrides})


@dataclass(frozen=True)
class ExperimentConfig:
    task: OnlineTaskSpec
    modes: tuple[str, ...] = ("none",)
    calibration: str = "online"
    targets: tuple[str, ...] | None = None
    finetune: adapt.FinetuneConfig = adapt.FinetuneConfig()
    adabn_momentum: float = 0.001
    reset_per_trial: bool = False
    electrode_scores: bool = False

    def __post_init__(self) -> None:
        if self.calibration not in CALIBRATIONS:
            raise ConfigurationError(f"calibration must be one of {CALIBRATIONS}, got {self.calibration!r}")
        for m in self.modes:
            adapt.parse_mode(m)

    def parsed_modes(self) -> list[adapt.AdaptationMode]:
        return [adapt.parse_mode(m) for m in self.modes]


@dataclass
class ModeResult:
    """Scores of one adaptation mode: ``per_seed[seed][subject]``."""

    mode: str
    per_seed: dict[int, dict[str, ev.MetricReport]] = field(default_factory=dict)
    eds: dict[int, dict[str, list[float]]] = field(default_factory=dict)

    def subjects(self) -> list[str]:
        first = next(iter(self.per_seed.values()), {})
        return list(first)

    def seed_means(self, metric: str = "tacc") -> dict[int, float]:
        return {seed: float(np.mean([getattr(r, metric) for r in reps.values()])) for seed, reps in self.per_seed.items()}

    def subject_means(self, metric: str = "tacc") -> dict[str, float]:
        return {s: float(np.mean([getattr(reps[s], metric) for reps in self.per_seed.values()]))
                for s in self.subjects()}

    def report(self) -> ev.Report:
        """Per-subject rows averaged over seeds."""
        rows = []
        curves = []
        for s in self.subjects():
            reps = [self.per_seed[seed][s] for seed in self.per_seed]
            rows.append({"id": s, **{k: float(np.mean([getattr(r, k) for r in reps])) for k in ("tacc", "utacc", "wacc")}})
            cs = [r.per_window_accuracy for r in reps]
            curves.append(np.mean(cs, axis=0) if all(c is not None for c in cs) else None)
        curve = None
        if curves and all(c is not None for c in curves) and len({len(c) for c in curves}) == 1:
            curve = np.mean(curves, axis=0).tolist()
        eds = None
        if self.eds:
            eds = np.mean([scores for per_subject in self.eds.values() for scores in per_subject.values()], axis=0).tolist()
        return ev.Report(self.mode, rows, curve, eds)


@dataclass
class ExperimentResult:
    modes: dict[str, ModeResult]
    seeds: tuple[int, ...]

    def table(self) -> list[dict]:
        """One row per mode: mean and std over subjects of the seed-averaged metrics."""
        rows = []
        for name, res in self.modes.items():
            mean, std = res.report().summary()
            rows.append({"method": name, **{f"{k}_mean": mean[k] for k in mean}, **{f"{k}_std": std[k] for k in std}})
        return rows

    def write(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name, res in self.modes.items():
            slug = name.replace("+", "_")
            ev.write_report_json(out / f"report_{slug}.json", res.report())
            ev.write_report_csv(out / f"report_{slug}.csv", res.report())
        per_seed = {name: res.seed_means() for name, res in self.modes.items()}
        (out / "summary.json").write_text(json.dumps({"table": self.table(), "seed_tacc": per_seed,
                                                       "seeds": list(self.seeds)}, indent=2))
        with open(out / "table.csv", "w") as fh:
            fh.write("method,tacc_pct,utacc_majority_pct,wacc_pct\n")
            for row in self.table():
                cells = [f"{100 * row[f'{k}_mean']:.1f} ± {100 * row[f'{k}_std']:.1f}" for k in ("tacc", "utacc", "wacc")]
                fh.write(",".join([row["method"], *cells]) + "\n")


# --------------------------------------------------------------------------- per-target steps


def source_alignment(mode: adapt.AdaptationMode) -> str:
    return mode.alignment or "none"


def _cache_key(model_config: nn.ModelConfig, train_cfg: train.TrainConfig, sources: list[str], alignment: str,
               seed: int, cohort_tag: str) -> str:
    doc = json.dumps({"model": model_config.to_dict(), "train": asdict(train_cfg), "sources": sources,
                      "alignment": alignment, "seed": seed, "cohort": cohort_tag}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def train_source_models(cohort: Cohort, target: str, train_cfg: train.TrainConfig, model_config: nn.ModelConfig,
                        alignment: str, cache_dir: Path | None = None, cohort_tag: str = "") -> dict[int, nn.ModelState]:
    """Seed -> trained LOSO model, reusing checkpoints from ``cache_dir`` when present."""
    cfg = replace(train_cfg, split="cross_subject_loso", source_alignment=alignment)
    sources = train.training_partition(cohort, target, cfg.split)
    states: dict[int, nn.ModelState] = {}
    missing = []
    for seed in cfg.seeds:
        path = None
        if cache_dir is not None:
            path = cache_dir / f"{target}-{alignment}-{_cache_key(model_config, cfg, sources, alignment, seed, cohort_tag)}.rapc"
            if path.exists():
                states[seed] = nn.load_checkpoint(path)
                continue
        missing.append((seed, path))
    if missing:
        result = train.run_training(cohort, target, replace(cfg, seeds=tuple(s for s, _ in missing)), model_config)
        for seed, path in missing:
            states[seed] = result.states[seed]
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                nn.save_checkpoint(path, result.states[seed])
    return {seed: states[seed] for seed in cfg.seeds}


def _stream_probs(trials: TrialSet, state: nn.ModelState, task: OnlineTaskSpec, hooks: list[stream.Hook],
                  reset_per_trial: bool) -> list[np.ndarray]:
    session = stream.SessionConfig(OnlineTaskSpec(task.window_length, task.update_frequency), hooks, reset_per_trial)
    return stream.run_session(trials, stream.ModelDecoder(state), session).trial_probs()


def _window_probs(trials: TrialSet, state: nn.ModelState) -> list[np.ndarray]:
    """Per-window decoding of every trial in one batch; identical to a hook-free stream."""
    cfg = state.config
    windows = adapt.sliding_windows(trials.data, cfg.window_samples, train.window_hop(cfg))
    probs = nn.forward(state, windows, "infer").probs[:, 0]
    return list(probs.reshape(len(trials), -1, probs.shape[-1]))


def adapt_and_decode(state: nn.ModelState, mode: adapt.AdaptationMode, calibration_trials: TrialSet,
                     test_trials: TrialSet, cfg: ExperimentConfig, seed: int) -> list[np.ndarray]:
    """Per-trial window probabilities on ``test_trials`` after adapting ``state`` according to ``mode``."""
    mcfg = state.config
    hop = train.window_hop(mcfg)
    calib = calibration_trials
    offline_ref = None
    if mode.alignment and (mode.finetune or cfg.calibration == "offline"):
        offline_ref = adapt.fit_reference(adapt.sliding_windows(calib.data, mcfg.window_samples, hop), mode.alignment)
        calib = adapt.align_trials(calib, offline_ref)
    if mode.finetune:
        state = adapt.supervised_finetune(state, calib, replace(cfg.finetune, seed=seed))
    if cfg.calibration == "online" or mode.finetune:
        hooks: list[stream.Hook] = []
        if mode.alignment:
            hooks.append(stream.AlignmentHook(mode.alignment))
        if mode.adabn:
            hooks.append(stream.AdaBnHook(cfg.adabn_momentum))
        if not hooks:
            return _window_probs(test_trials, state)
        return _stream_probs(test_trials, state, cfg.task, hooks, cfg.reset_per_trial)
    # unsupervised with target offline data, then a static decoder
    test = test_trials
    if offline_ref is not None:
        test = adapt.align_trials(test_trials, offline_ref)
    if mode.adabn:
        state = adapt.adabn_replace(state, adapt.sliding_windows(calib.data, mcfg.window_samples, hop))
    return _window_probs(test, state)


def run_experiment(cohort: Cohort, model_config: nn.ModelConfig, train_cfg: train.TrainConfig, cfg: ExperimentConfig,
                   cache_dir: str | Path | None = None, cohort_tag: str = "") -> ExperimentResult:
    """Leave-one-subject-out train, adapt, stream and score every target subject."""
    targets = list(cfg.targets) if cfg.targets else [s for s in cohort.subjects if cohort.has(s, "online")]
    if not targets:
        raise ConfigurationError("no target subject has online trials")
    modes = cfg.parsed_modes()
    results = {m.text: ModeResult(m.text) for m in modes}
    cache = Path(cache_dir) if cache_dir is not None else None
    for target in targets:
        calibration = cohort.trials(target, "offline") if any(
            m.finetune or (cfg.calibration == "offline" and (m.alignment or m.adabn)) for m in modes) else None
        test = cohort.trials(target, "online")
        models = {}
        for a in sorted({source_alignment(m) for m in modes}):
            models[a] = train_source_models(cohort, target, train_cfg, model_config, a, cache, cohort_tag)
        for m in modes:
            for seed in train_cfg.seeds:
                state = models[source_alignment(m)][seed]
                probs = adapt_and_decode(state, m, calibration, test, cfg, seed)
                preds = [ev.TrialPrediction(p, int(y)) for p, y in zip(probs, test.labels)]
                results[m.text].per_seed.setdefault(seed, {})[target] = ev.evaluate(preds)
                if cfg.electrode_scores and m.text == "none":
                    results[m.text].eds.setdefault(seed, {})[target] = ev.eds_all(state, test.data, test.labels)
            log.info("target %s mode %s: TAcc %.3f", target, m.text,
                     np.mean([results[m.text].per_seed[s][target].tacc for s in train_cfg.seeds]))
    return ExperimentResult(results, tuple(train_cfg.seeds))


def merge_results(parts: Sequence[ExperimentResult]) -> ExperimentResult:
    """Combine results computed for disjoint target subsets."""
    if not parts:
        raise ConfigurationError("nothing to merge")
    merged = {name: ModeResult(name) for name in parts[0].modes}
    for part in parts:
        for name, res in part.modes.items():
            for seed, reps in res.per_seed.items():
                merged[name].per_seed.setdefault(seed, {}).update(reps)
            for seed, scores in res.eds.items():
                merged[name].eds.setdefault(seed, {}).update(scores)
    return ExperimentResult(merged, parts[0].seeds)
