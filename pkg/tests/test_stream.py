from __future__ import annotations

import json
import time

import numpy as np
import pytest

from rapstream import adapt, data, mdm, model, stream
from rapstream.errors import ConfigurationError, DomainError
from rapstream.rap import OnlineTaskSpec, plan_rap

SYNTH_TASK = OnlineTaskSpec(1.0, 16.0)


def small_state(seed=0):
    cfg = model.ModelConfig(channel_count=8, rap_plan=plan_rap(128, [4], SYNTH_TASK), temporal_filters=4,
                            temporal_kernel=16, second_block_filters=8, second_kernel=4)
    state = model.init_state(cfg, seed=seed)
    # non-trivial running statistics so that the BN layers actually transform
    rng = np.random.default_rng(seed + 100)
    for layer in model.BN_LAYERS:
        m, v = state.bn_stats(layer)
        state.set_bn_stats(layer, rng.normal(scale=0.1, size=m.shape), rng.uniform(0.5, 2.0, size=v.shape))
    return state


@pytest.fixture(scope="module")
def synth_trials():
    cohort = data.generate_synth_cohort(data.SynthConfig(subject_count=1, trials_per_subject=6, rng_seed=3,
                                                         subject_shift_scale=0.5))
    return cohort.trials("S00", "online")


def random_trials(n, channels, samples, fs, seed=0):
    x = np.random.default_rng(seed).standard_normal((n, channels, samples))
    return data.TrialSet(x, np.arange(n) % 2, fs, tuple(f"ch{i}" for i in range(channels)))


class ConstantDecoder(stream.Decoder):
    channel_count = 8

    def __call__(self, window, ctx):
        return np.array([0.25, 0.75])


class RecordingDecoder(stream.Decoder):
    """Returns fixed probabilities and remembers every window it saw."""

    def __init__(self, channels):
        self.channel_count = channels
        self.seen = []

    def __call__(self, window, ctx):
        self.seen.append(window.copy())
        return np.array([0.5, 0.5])


class TestRingBuffer:
    def test_wraps_in_time_order(self):
        buf = stream.RingBuffer(1, 4)
        buf.push(np.arange(3.0)[None])
        buf.push(np.arange(3.0, 6.0)[None])
        np.testing.assert_array_equal(buf.window(), [[2, 3, 4, 5]])
        assert buf.filled == 4

    def test_oversized_chunk_keeps_tail(self):
        buf = stream.RingBuffer(2, 3)
        buf.push(np.arange(10.0).reshape(2, 5))
        np.testing.assert_array_equal(buf.window(), [[2, 3, 4], [7, 8, 9]])

    def test_reset(self):
        buf = stream.RingBuffer(1, 2)
        buf.push(np.ones((1, 2)))
        buf.reset()
        assert buf.filled == 0 and not buf.window().any()


class TestGeometry:
    def test_dreyer_one_trial(self):
        trials = random_trials(1, 27, 1216, 256.0)
        rec = RecordingDecoder(27)
        res = stream.run_session(trials, rec, stream.SessionConfig(OnlineTaskSpec(1.0, 16.0, 4.75)))
        assert len(res.events) == 61
        np.testing.assert_array_equal(rec.seen[0], trials.data[0, :, 0:256])
        np.testing.assert_array_equal(rec.seen[60], trials.data[0, :, 960:1216])
        assert [e.window for e in res.events] == list(range(61))

    def test_window_j_covers_hop_offset(self):
        trials = random_trials(2, 3, 384, 128.0, seed=1)
        rec = RecordingDecoder(3)
        stream.run_session(trials, rec, stream.SessionConfig(SYNTH_TASK))
        for k, w in enumerate(rec.seen):
            i, j = divmod(k, 33)
            np.testing.assert_array_equal(w, trials.data[i, :, 8 * j : 8 * j + 128])

    def test_event_count_conservation(self):
        for n, length in ((1, 128), (3, 384), (4, 200)):
            trials = random_trials(n, 8, length, 128.0)
            res = stream.run_session(trials, ConstantDecoder(), stream.SessionConfig(SYNTH_TASK))
            assert len(res.events) == n * stream.window_count(trials, SYNTH_TASK)
            assert [e.tick for e in res.events] == list(range(len(res.events)))

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            stream.run_session(random_trials(1, 5, 384, 128.0), ConstantDecoder(), stream.SessionConfig(SYNTH_TASK))

    def test_plan_mismatch(self):
        trials = random_trials(1, 8, 384, 128.0)
        with pytest.raises(ConfigurationError, match="RAP plan"):
            stream.run_session(trials, stream.ModelDecoder(small_state()),
                               stream.SessionConfig(OnlineTaskSpec(1.0, 8.0)))

    def test_trial_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            stream.run_session(random_trials(1, 8, 384, 128.0), ConstantDecoder(),
                               stream.SessionConfig(OnlineTaskSpec(1.0, 16.0, 4.0)))

    def test_short_trials(self):
        with pytest.raises(ConfigurationError):
            stream.run_session(random_trials(1, 8, 100, 128.0), ConstantDecoder(), stream.SessionConfig(SYNTH_TASK))


class TestReplayTransparency:
    def test_bit_identical_to_batched_windows(self, synth_trials):
        state = small_state()
        res = stream.run_session(synth_trials, stream.ModelDecoder(state), stream.SessionConfig(SYNTH_TASK))
        windows = adapt.sliding_windows(synth_trials.data, 128, 8)
        batched = model.forward(state, windows, "infer").probs[:, 0]
        assert np.array_equal(res.probs, batched)

    def test_probabilities_normalized(self, synth_trials):
        res = stream.run_session(synth_trials, stream.ModelDecoder(small_state()), stream.SessionConfig(SYNTH_TASK))
        np.testing.assert_allclose(res.probs.sum(axis=1), 1, atol=1e-6)

    def test_trial_probs_blocks(self, synth_trials):
        res = stream.run_session(synth_trials, ConstantDecoder(), stream.SessionConfig(SYNTH_TASK))
        blocks = res.trial_probs()
        assert len(blocks) == len(synth_trials) and all(b.shape == (33, 2) for b in blocks)

    def test_replays_are_identical(self, synth_trials):
        cfg = stream.SessionConfig(SYNTH_TASK, hooks=stream.hooks_for_mode(adapt.parse_mode("ea+adabn")))
        dec = stream.ModelDecoder(small_state())
        a = stream.run_session(synth_trials, dec, cfg)
        b = stream.run_session(synth_trials, dec, cfg)
        assert np.array_equal(a.probs, b.probs)


class TestCausality:
    @pytest.mark.parametrize("mode", ["ea+adabn", "ra"])
    def test_prefix_determinism_fuzz(self, synth_trials, mode):
        dec = stream.ModelDecoder(small_state())
        hooks = stream.hooks_for_mode(adapt.parse_mode(mode))
        full = stream.run_session(synth_trials, dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
        rng = np.random.default_rng(7)
        cuts = rng.choice(len(full), size=20, replace=False)
        for j in cuts:
            part = stream.run_session(synth_trials, dec, stream.SessionConfig(SYNTH_TASK, hooks, max_events=j + 1))
            assert len(part.events) == j + 1
            assert np.array_equal(part.probs, full[: j + 1])

    def test_truncated_samples_give_same_prefix(self, synth_trials):
        # physically remove the samples after window j of a single trial
        dec = stream.ModelDecoder(small_state())
        hooks = stream.hooks_for_mode(adapt.parse_mode("ea+adabn"))
        one = synth_trials.subset([0])
        full = stream.run_session(one, dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
        for j in (0, 5, 17, 31):
            cut = data.TrialSet(one.data[:, :, : 128 + 8 * j], one.labels, one.sampling_frequency, one.channel_names)
            part = stream.run_session(cut, dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
            assert np.array_equal(part, full[: j + 1])

    def test_hooks_only_see_current_and_past(self, synth_trials):
        # a later window changed arbitrarily must not affect earlier events
        dec = stream.ModelDecoder(small_state())
        hooks = stream.hooks_for_mode(adapt.parse_mode("ea+adabn"))
        a = stream.run_session(synth_trials, dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
        x = synth_trials.data.copy()
        x[2] *= 5.0
        altered = data.TrialSet(x, synth_trials.labels, synth_trials.sampling_frequency, synth_trials.channel_names)
        b = stream.run_session(altered, dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
        assert np.array_equal(a[: 2 * 33], b[: 2 * 33])
        assert not np.array_equal(a[2 * 33 :], b[2 * 33 :])


class TestHooks:
    def test_state_persists_across_trials(self, synth_trials):
        dec = stream.ModelDecoder(small_state())
        hooks = stream.hooks_for_mode(adapt.parse_mode("ea"))
        persist = stream.run_session(synth_trials, dec, stream.SessionConfig(SYNTH_TASK, hooks)).trial_probs()
        reset = stream.run_session(synth_trials, dec, stream.SessionConfig(SYNTH_TASK, hooks,
                                                                          reset_per_trial=True)).trial_probs()
        assert np.array_equal(persist[0], reset[0])
        assert not np.array_equal(persist[1], reset[1])
        # with resets every trial restarts from scratch, so it equals a session of that trial alone
        alone = stream.run_session(synth_trials.subset([1]), dec, stream.SessionConfig(SYNTH_TASK, hooks)).probs
        assert np.array_equal(reset[1], alone)

    def test_alignment_hook_matches_online_reference(self, synth_trials):
        rec = RecordingDecoder(8)
        hook = stream.AlignmentHook("euclidean")
        stream.run_session(synth_trials.subset([0]), rec, stream.SessionConfig(SYNTH_TASK, [hook]))
        windows = adapt.sliding_windows(synth_trials.data[:1], 128, 8)
        ref = adapt.AlignmentReference.empty("euclidean")
        for w, seen in zip(windows, rec.seen):
            ref = adapt.update_reference_online(ref, w)
            np.testing.assert_allclose(seen, adapt.align(w, ref), rtol=1e-12, atol=1e-12)
        # the session's hooks are copies; the configured one is untouched
        assert hook.ref.is_empty

    def test_adabn_hook_matches_adabn_forward(self, synth_trials):
        state = small_state()
        res = stream.run_session(synth_trials.subset([0]), stream.ModelDecoder(state),
                                 stream.SessionConfig(SYNTH_TASK, [stream.AdaBnHook(0.01)]))
        ada = adapt.AdaBnState.from_model(state, 0.01)
        for w, ev in zip(adapt.sliding_windows(synth_trials.data[:1], 128, 8), res.events):
            probs, ada = adapt.adabn_forward(state, ada, w)
            np.testing.assert_allclose(ev.probs, np.reshape(probs, -1), rtol=1e-6, atol=1e-7)

    def test_adabn_needs_network(self, synth_trials):
        with pytest.raises(ConfigurationError):
            stream.run_session(synth_trials, ConstantDecoder(), stream.SessionConfig(SYNTH_TASK, [stream.AdaBnHook()]))

    def test_hook_order(self):
        assert [type(h) for h in stream.hooks_for_mode(adapt.parse_mode("ra+adabn"))] == [
            stream.AlignmentHook, stream.AdaBnHook]
        assert stream.hooks_for_mode(adapt.parse_mode("none")) == []


class TestMdmDecoder:
    def test_generic_recentering_stream(self, synth_trials):
        windows = adapt.sliding_windows(synth_trials.data, 128, 8)
        labels = np.repeat(synth_trials.labels, 33)
        source_ref = adapt.fit_reference(windows, "riemannian")
        m = mdm.mdm_fit(adapt.align(windows, source_ref), labels)
        hook = stream.AlignmentHook("riemannian", mdm.gr_start(source_ref, prior_weight=10))
        res = stream.run_session(synth_trials, stream.MdmDecoder(m), stream.SessionConfig(SYNTH_TASK, [hook]))
        assert len(res.events) == len(windows)
        np.testing.assert_allclose(res.probs.sum(axis=1), 1, atol=1e-12)
        # first event: reference moved one step of weight 1/11 from the source reference
        ref = mdm.gr_update(mdm.gr_start(source_ref, 10), windows[0])
        np.testing.assert_allclose(res.events[0].probs, mdm.mdm_predict(adapt.align(windows[0], ref), m), atol=1e-12)


class TestTiming:
    def test_paced_equals_unpaced(self):
        trials = random_trials(1, 8, 192, 128.0, seed=5)  # 1.5 s trial: 9 windows
        dec = stream.ModelDecoder(small_state())
        hooks = stream.hooks_for_mode(adapt.parse_mode("ea+adabn"))
        fast = stream.run_session(trials, dec, stream.SessionConfig(SYNTH_TASK, hooks))
        t0 = time.monotonic()
        paced = stream.run_session(trials, dec, stream.SessionConfig(SYNTH_TASK, hooks, real_time=True))
        wall = time.monotonic() - t0
        assert np.array_equal(fast.probs, paced.probs)
        # last window ends 1.5 s into the stream
        assert 1.5 <= wall < 1.5 + 0.5
        assert all(e.jitter_ms is not None and e.jitter_ms >= 0 for e in paced.events)
        assert all(e.jitter_ms is None for e in fast.events)

    def test_stall_misses_only_that_event(self):
        trials = random_trials(1, 8, 384, 128.0)
        res = stream.run_session(trials, ConstantDecoder(),
                                 stream.SessionConfig(SYNTH_TASK, [stream.StallHook([5], 100.0)]))
        missed = [e.tick for e in res.events if not e.deadline_met]
        assert missed == [5]
        assert res.events[5].latency_ms >= 100.0
        assert res.summary()["deadline_misses"] == 1 and res.summary()["missed_ticks"] == [5]
        assert len(res.events) == 33  # nothing dropped

    def test_deadline_flag_definition(self, synth_trials):
        res = stream.run_session(synth_trials, stream.ModelDecoder(small_state()), stream.SessionConfig(SYNTH_TASK))
        assert res.deadline_ms == 62.5
        assert all(e.deadline_met == (e.latency_ms <= 62.5) and e.latency_ms >= 0 for e in res.events)

    def test_constant_decoder_under_one_ms(self):
        windows = np.random.default_rng(0).standard_normal((4, 8, 128)).astype(np.float32)
        stats = stream.measure_latency(ConstantDecoder(), windows, repetitions=500)
        assert stats["p95"] < 1.0
        assert stats["n"] == 500 and 0 <= stats["mean"] <= stats["max"]

    def test_model_decoder_within_deadline(self, synth_trials):
        windows = adapt.sliding_windows(synth_trials.data[:1], 128, 8)
        stats = stream.measure_latency(stream.ModelDecoder(small_state()), windows,
                                       stream.hooks_for_mode(adapt.parse_mode("ea+adabn")), repetitions=100)
        assert stats["p95"] < 62.5

    def test_zero_repetitions(self):
        with pytest.raises(DomainError):
            stream.measure_latency(ConstantDecoder(), np.zeros((8, 128)), repetitions=0)

    def test_empty_stats(self):
        with pytest.raises(DomainError):
            stream.latency_stats([])


def test_event_and_summary_files(tmp_path, synth_trials):
    res = stream.run_session(synth_trials.subset([0]), ConstantDecoder(), stream.SessionConfig(SYNTH_TASK))
    stream.write_events(tmp_path / "events.jsonl", res.events)
    stream.write_summary(tmp_path / "summary.json", res)
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    assert len(lines) == 33
    first = json.loads(lines[0])
    assert set(first) == {"tick", "trial", "window", "probs", "latency_ms", "deadline_met", "jitter_ms"}
    assert first["probs"] == [0.25, 0.75]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["events"] == 33 and summary["deadline_misses"] == 0
    assert set(summary["latency_ms"]) == {"mean", "p95", "max", "n"}
