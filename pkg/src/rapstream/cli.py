"""Command-line entry point: ``rapstream <subcommand> [options]``.

Every subcommand takes ``--json`` (machine-readable stdout), ``--config FILE``
(JSON object of option values; command-line flags win) and ``--print-config``
(dump the resolved options and exit). Exit status: 0 success, 1 domain or
data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adapt, data, experiment, mdm, stream, train
from . import eval as ev
from . import model as nn
from .errors import ConfigurationError, ParseError, RapError
from .rap import OnlineTaskSpec, computational_gain, plan_rap, windows_per_trial

META_OPTIONS = {"command", "json", "config", "print_config", "handler", "verbose"}
CACHE_ENV = "RAPSTREAM_CACHE_DIR"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- shared helpers


def _task(args, trial_length: bool = False) -> OnlineTaskSpec:
    return OnlineTaskSpec(args.window_len, args.update_freq, args.trial_len if trial_length else None)


def _cohort(args) -> data.Cohort:
    return data.load_cohort(args.manifest, lazy=True)


def _model_config(args, ts: data.TrialSet) -> nn.ModelConfig:
    return experiment.build_model_config(ts.data.shape[1], ts.sampling_frequency, _task(args), args.down,
                                         args.architecture)


def _train_config(args) -> train.TrainConfig:
    return train.TrainConfig(learning_rate=args.lr, epochs=args.epochs, warmup_epochs=args.warmup,
                             batch_size=args.batch_size, seeds=tuple(args.seeds), source_alignment=args.alignment)


def _reference_from_meta(state: nn.ModelState) -> adapt.AlignmentReference | None:
    doc = state.meta.get("input_alignment")
    if not doc:
        return None
    return adapt.AlignmentReference.from_matrix(doc["method"], np.array(doc["mean"]), doc.get("sample_count", 1))


def _load_decoder(path: str) -> tuple[stream.Decoder, list[stream.Hook]]:
    """A decoder for a network or MDM checkpoint, plus the fixed input alignment it was adapted with."""
    manifest, _ = nn.read_tensors(path)
    if manifest.get("kind") == "mdm":
        return stream.MdmDecoder(mdm.load_mdm(path)), []
    state = nn.load_checkpoint(path)
    ref = _reference_from_meta(state)
    return stream.ModelDecoder(state), ([stream.StaticAlignmentHook(ref)] if ref is not None else [])


def _decode_trials(state: nn.ModelState, ts: data.TrialSet) -> np.ndarray:
    """``(n, N_w, classes)`` probabilities, joint decoding after the checkpoint's input alignment."""
    ref = _reference_from_meta(state)
    x = adapt.align(ts.data, ref).astype(np.float32) if ref is not None else ts.data
    return nn.forward(state, x, "infer").probs


def _read_numbers(path: str, metric: str) -> list[float]:
    """Values from a JSON list, a report JSON (per-subject ``metric``) or one number per line."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        try:
            return [float(line) for line in text.split() if line.strip()]
        except ValueError as exc:
            raise ParseError(f"expected numbers, one per line: {exc}", path) from exc
    if isinstance(doc, dict) and "per_subject" in doc:
        return [float(row[metric]) for row in doc["per_subject"]]
    if isinstance(doc, list):
        return [float(v) for v in doc]
    raise ParseError("expected a JSON list of numbers or a report with 'per_subject'", path)


def _cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV)
    return Path(value) if value else None


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_plan_rap(args) -> int:
    task = OnlineTaskSpec(args.window_len, args.update_freq, args.trial_len)
    plan = plan_rap(args.fs, args.down, task).to_dict()
    text = f"k={plan['k']} s={plan['s']} f_inter={plan['f_inter']} Hz"
    if args.trial_len is not None:
        text += f"\nwindows per trial: {windows_per_trial(task)}"
    _emit(args, plan, text)
    return 0


def cmd_gain(args) -> int:
    task = _task(args, trial_length=True)
    gain = computational_gain(task)
    _emit(args, {"gain": gain, "windows_per_trial": windows_per_trial(task)}, f"{gain:.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = data.SynthConfig(subject_count=args.subjects, trials_per_subject=args.trials,
                           class_separability=args.separability, subject_shift_scale=args.subject_shift,
                           session_shift_scale=args.session_shift, rng_seed=args.seed,
                           trial_length=args.synth_trial_len)
    manifest = data.write_cohort(args.out, data.generate_synth_cohort(cfg))
    _emit(args, {"manifest": str(manifest), "subjects": args.subjects, "trials_per_subject": args.trials},
          f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cohort = _cohort(args)
    target = args.target
    cfg = replace(_train_config(args), split=args.split)
    first = target if args.split == "within_subject" else next(s for s in cohort.subjects if s != target)
    model_cfg = _model_config(args, cohort.trials(first, "offline"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train.run_training(cohort, target, cfg, model_cfg, log_path=out / "train_log.jsonl")
    paths = {}
    for seed, state in result.states.items():
        paths[seed] = str(out / f"model_seed{seed}.rapc")
        nn.save_checkpoint(paths[seed], state)
    final = {seed: log[-1].loss for seed, log in result.logs.items() if log}
    _emit(args, {"checkpoints": paths, "sources": result.sources, "final_loss": final},
          "\n".join(f"seed {s}: {p}" for s, p in paths.items()))
    return 0


def cmd_adapt(args) -> int:
    mode = adapt.parse_mode(args.mode)
    state = nn.load_checkpoint(args.checkpoint)
    calib = _cohort(args).trials(args.subject, args.role)
    cfg = state.config
    hop = train.window_hop(cfg)
    if mode.alignment:
        ref = adapt.fit_reference(adapt.sliding_windows(calib.data, cfg.window_samples, hop), mode.alignment)
        calib = adapt.align_trials(calib, ref)
        state.meta["input_alignment"] = {"method": ref.method, "mean": ref.mean.tolist(),
                                         "sample_count": ref.sample_count}
    if mode.finetune:
        ft = adapt.FinetuneConfig(epochs=args.ft_epochs, learning_rate=args.ft_lr, batch_size=args.batch_size,
                                  seed=args.seed)
        meta = state.meta
        state = adapt.supervised_finetune(state, calib, ft)
        state.meta = meta
    if mode.adabn:
        state = adapt.adabn_replace(state, adapt.sliding_windows(calib.data, cfg.window_samples, hop))
    state.meta["adaptation"] = mode.text
    nn.save_checkpoint(args.out, state)
    _emit(args, {"checkpoint": str(args.out), "mode": mode.text, "calibration_trials": len(calib)},
          f"wrote {args.out} ({mode.text}, {len(calib)} calibration trials)")
    return 0


def cmd_stream(args) -> int:
    decoder, hooks = _load_decoder(args.checkpoint)
    mode = adapt.parse_mode(args.mode)
    if mode.finetune:
        raise ConfigurationError("fine-tuning is not an online mode; run `adapt` first")
    hooks = hooks + stream.hooks_for_mode(mode, args.adabn_momentum)
    ts = _cohort(args).trials(args.subject, args.role)
    if args.max_trials:
        ts = ts.subset(np.arange(min(args.max_trials, len(ts))))
    session = stream.SessionConfig(_task(args), hooks, args.reset_per_trial, args.real_time)
    result = stream.run_session(ts, decoder, session)
    if args.events:
        stream.write_events(args.events, result.events)
    summary = result.summary()
    if args.summary:
        stream.write_summary(args.summary, result)
    preds = [ev.TrialPrediction(p, int(y)) for p, y in zip(result.trial_probs(), ts.labels)]
    metrics = ev.evaluate(preds)
    summary["metrics"] = {"tacc": metrics.tacc, "utacc": metrics.utacc, "wacc": metrics.wacc}
    lat = summary["latency_ms"]
    _emit(args, summary, f"{summary['events']} events, latency mean {lat['mean']:.2f} ms, p95 {lat['p95']:.2f} ms, "
                         f"{summary['deadline_misses']} deadline misses; TAcc {100 * metrics.tacc:.1f}%")
    if args.strict and args.real_time and summary["deadline_misses"]:
        print(f"rapstream: error: {summary['deadline_misses']} deadline misses in paced mode", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cohort = _cohort(args)
    state = nn.load_checkpoint(args.checkpoint)
    subjects = args.subjects or [s for s in cohort.subjects if cohort.has(s, args.role)]
    reports = {}
    last = None
    for s in subjects:
        ts = cohort.trials(s, args.role)
        if args.events:
            probs = _probs_from_events(args.events, len(ts))
        else:
            probs = _decode_trials(state, ts)
        reports[s] = ev.evaluate(ev.predictions_from_array(probs, ts.labels))
        last = ts
    eds = None
    if args.eds and last is not None:
        eds = ev.eds_all(state, last.data, last.labels)
    report = ev.build_report(args.method, reports, eds)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ev.write_report_json(out / "report.json", report)
        ev.write_report_csv(out / "report.csv", report)
    mean, _ = report.summary()
    _emit(args, report.to_dict(), "\n".join(
        f"{row['id']}: TAcc {100 * row['tacc']:.1f}  uTAcc {100 * row['utacc']:.1f}  WAcc {100 * row['wacc']:.1f}"
        for row in report.per_subject) + f"\nmean: TAcc {100 * mean['tacc']:.1f}")
    return 0


def _probs_from_events(path: str, n_trials: int) -> np.ndarray:
    blocks: dict[int, list] = {}
    with open(path) as fh:
        for i, line in enumerate(fh):
            try:
                e = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {i + 1}: {exc}", path) from exc
            blocks.setdefault(int(e["trial"]), []).append(e["probs"])
    if sorted(blocks) != list(range(n_trials)):
        raise ConfigurationError(f"event log covers trials {sorted(blocks)[:5]}..., expected 0..{n_trials - 1}")
    return np.array([blocks[i] for i in range(n_trials)])


def cmd_eds(args) -> int:
    state = nn.load_checkpoint(args.checkpoint)
    ts = _cohort(args).trials(args.subject, args.role)
    ref = _reference_from_meta(state)
    x = adapt.align(ts.data, ref).astype(np.float32) if ref is not None else ts.data
    if args.channel is not None:
        scores = [ev.eds(state, x, ts.labels, args.channel, args.class_label)]
        names = [ts.channel_names[args.channel]]
    else:
        scores = ev.eds_all(state, x, ts.labels, args.class_label)
        names = list(ts.channel_names)
    _emit(args, {"channels": names, "eds": scores}, "\n".join(f"{n}: {v:+.4f}" for n, v in zip(names, scores)))
    return 0


def cmd_ttest(args) -> int:
    a = _read_numbers(args.a, args.metric)
    b = _read_numbers(args.b, args.metric)
    out = ev.paired_ttest_onesided(a, b)
    _emit(args, out, f"t={out['t']:.4f} df={out['df']} p={out['p']:.4g}")
    return 0


def cmd_bench_gain(args) -> int:
    task = _task(args, trial_length=True)
    cfg = experiment.build_model_config(args.channels, args.fs, task, args.down, args.architecture)
    state = nn.init_state(cfg, seed=args.seed)
    n = round(args.trial_len * args.fs)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, args.channels, n)).astype(np.float32)
    y = rng.integers(0, 2, args.batch)
    res = train.benchmark_training_step(state, x, y, args.repetitions)
    res["theoretical_gain"] = computational_gain(task)
    _emit(args, res, f"joint {res['joint_s'] * 1000:.1f} ms, per-window {res['individual_s'] * 1000:.1f} ms, "
                     f"measured ratio {res['ratio']:.2f} (theoretical {res['theoretical_gain']:.4f})")
    return 0


def _pipeline_chunk(payload: tuple) -> experiment.ExperimentResult:
    manifest, model_cfg, train_cfg, exp_cfg, cache, tag = payload
    return experiment.run_experiment(data.load_cohort(manifest, lazy=True), model_cfg, train_cfg, exp_cfg, cache, tag)


def cmd_pipeline(args) -> int:
    cohort = _cohort(args)
    targets = args.targets or [s for s in cohort.subjects if cohort.has(s, "online")]
    model_cfg = _model_config(args, cohort.trials(targets[0], "online"))
    train_cfg = _train_config(args)
    exp_cfg = experiment.ExperimentConfig(
        _task(args), tuple(args.modes), args.calibration, tuple(targets),
        adapt.FinetuneConfig(args.ft_epochs, args.ft_lr, args.batch_size), args.adabn_momentum,
        args.reset_per_trial, args.eds)
    tag = hashlib.sha256(Path(args.manifest).read_bytes()).hexdigest()[:16]
    cache = _cache_dir()
    if args.jobs > 1 and len(targets) > 1:
        chunks = [replace(exp_cfg, targets=(t,)) for t in targets]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            parts = list(pool.map(_pipeline_chunk, [(args.manifest, model_cfg, train_cfg, c, cache, tag) for c in chunks]))
        result = experiment.merge_results(parts)
    else:
        result = experiment.run_experiment(cohort, model_cfg, train_cfg, exp_cfg, cache, tag)
    result.write(args.out)
    table = result.table()
    _emit(args, {"table": table, "out": str(args.out)}, "\n".join(
        f"{row['method']:>10}: TAcc {100 * row['tacc_mean']:.1f} ± {100 * row['tacc_std']:.1f}  "
        f"uTAcc {100 * row['utacc_mean']:.1f}  WAcc {100 * row['wacc_mean']:.1f}" for row in table))
    return 0


# --------------------------------------------------------------------------- parser


def _add_task(p, trial=False, window_len=1.0, update_freq=16.0):
    p.add_argument("--window-len", type=float, default=window_len, help="window length T_w in seconds")
    p.add_argument("--update-freq", type=float, default=update_freq, help="update frequency f_u in Hz")
    if trial:
        p.add_argument("--trial-len", type=float, required=trial == "required", default=None,
                       help="trial length T_t in seconds")


def _add_model(p):
    p.add_argument("--down", type=int, nargs="*", default=[8], help="downsampling pooling kernels")
    p.add_argument("--architecture", choices=sorted(experiment.ARCHITECTURES), default="basenet")


def _add_training(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--alignment", choices=train.ALIGNMENTS, default="none", help="source-domain alignment")


def _add_data(p, subject=True):
    p.add_argument("--manifest", required=True, help="cohort manifest.json")
    if subject:
        p.add_argument("--subject", required=True)
        p.add_argument("--role", choices=data.ROLES, default="online")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--config", help="JSON file of option values; flags override it")
    common.add_argument("--print-config", action="store_true", help="print the resolved options and exit")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rapstream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan-rap", parents=[common], help="pooling plan for a model and an online task")
    p.add_argument("--fs", type=float, required=True)
    p.add_argument("--down", type=int, nargs="*", default=[8])
    _add_task(p, trial=True)
    p.set_defaults(handler=cmd_plan_rap)

    p = sub.add_parser("gain", parents=[common], help="computational gain of joint decoding")
    _add_task(p, trial="required")
    p.set_defaults(handler=cmd_gain)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials", type=int, default=60)
    p.add_argument("--separability", type=float, default=1.0)
    p.add_argument("--subject-shift", type=float, default=0.0)
    p.add_argument("--session-shift", type=float, default=0.0)
    p.add_argument("--synth-trial-len", type=float, default=3.0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train source models, one per seed")
    _add_data(p, subject=False)
    p.add_argument("--target", help="held-out subject (cross-subject) or the subject (within-subject)")
    p.add_argument("--split", choices=train.SPLITS, default="cross_subject_loso")
    p.add_argument("--out", required=True)
    _add_task(p)
    _add_model(p)
    _add_training(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("adapt", parents=[common], help="adapt a checkpoint with target calibration trials")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.set_defaults(role="offline")
    p.add_argument("--mode", default="adabn", help=" | ".join(adapt.MODES))
    p.add_argument("--ft-epochs", type=int, default=20)
    p.add_argument("--ft-lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser("stream", parents=[common], help="pseudo-online replay with online adaptation")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    _add_task(p)
    p.add_argument("--mode", default="none", help="online mode: none | ea | ra | adabn | ea+adabn | ra+adabn")
    p.add_argument("--adabn-momentum", type=float, default=0.001)
    p.add_argument("--reset-per-trial", action="store_true")
    p.add_argument("--real-time", action="store_true", help="pace ticks on the wall clock")
    p.add_argument("--strict", action="store_true", help="exit 1 on any deadline miss in paced mode")
    p.add_argument("--max-trials", type=int, default=0)
    p.add_argument("--events", help="write the JSON-lines event log here")
    p.add_argument("--summary", help="write the summary JSON here")
    p.set_defaults(handler=cmd_stream)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint (or a stream event log)")
    p.add_argument("--checkpoint", required=True)
    _add_data(p, subject=False)
    p.add_argument("--subjects", nargs="*")
    p.add_argument("--role", choices=data.ROLES, default="online")
    p.add_argument("--events", help="score this event log instead of decoding (one subject)")
    p.add_argument("--method", default="basenet")
    p.add_argument("--eds", action="store_true", help="also compute per-channel EDS on the last subject")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("eds", parents=[common], help="electrode discriminancy scores")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.add_argument("--channel", type=int)
    p.add_argument("--class-label", type=int)
    p.set_defaults(handler=cmd_eds)

    p = sub.add_parser("ttest", parents=[common], help="one-sided paired t-test, mean(a - b) > 0")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", default="tacc", help="metric column when the inputs are reports")
    p.set_defaults(handler=cmd_ttest)

    p = sub.add_parser("bench-gain", parents=[common], help="wall-clock joint vs per-window training step")
    p.add_argument("--fs", type=float, default=256.0)
    p.add_argument("--channels", type=int, default=27)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=3)
    _add_task(p)
    p.add_argument("--trial-len", type=float, default=4.75)
    _add_model(p)
    p.set_defaults(handler=cmd_bench_gain)

    p = sub.add_parser("pipeline", parents=[common], help="train, adapt, stream and score every target subject")
    _add_data(p, subject=False)
    p.add_argument("--targets", nargs="*")
    p.add_argument("--modes", nargs="+", default=["none", "ea"])
    p.add_argument("--calibration", choices=experiment.CALIBRATIONS, default="online")
    p.add_argument("--ft-epochs", type=int, default=20)
    p.add_argument("--ft-lr", type=float, default=1e-4)
    p.add_argument("--adabn-momentum", type=float, default=0.001)
    p.add_argument("--reset-per-trial", action="store_true")
    p.add_argument("--eds", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="parallel target subjects")
    p.add_argument("--out", required=True)
    _add_task(p)
    _add_model(p)
    _add_training(p)
    p.set_defaults(handler=cmd_pipeline)
    return parser


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    if path is not None and command in subparsers:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        sub = subparsers[command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(doc) - known - META_OPTIONS)
        if unknown:
            raise UsageError(f"unknown option(s) in config: {', '.join(unknown)}")
        # config values become defaults, so flags given on the command line win
        for action in sub._actions:
            if action.dest in doc:
                action.required = False
        sub.set_defaults(**{k: v for k, v in doc.items() if k not in META_OPTIONS})
    return parser.parse_args(argv)


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in META_OPTIONS}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"rapstream: usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse: --help exits 0, bad usage exits 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_config:
        print(json.dumps({"command": args.command, **resolved_config(args)}, indent=2, default=str))
        return 0
    try:
        return args.handler(args)
    except (RapError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"rapstream: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
