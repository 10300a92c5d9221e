from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rapstream import eval as ev
from rapstream.errors import DegenerateTestError, DomainError, IndexOutOfRangeError

# class-1 probabilities [0.6, 0.55, 0.2], label 1
HANDCRAFTED = ev.TrialPrediction(np.array([[0.4, 0.6], [0.45, 0.55], [0.8, 0.2]]), 1)


class TestTrialAccuracy:
    def test_handcrafted_incorrect(self):
        assert ev.trial_accuracy([HANDCRAFTED]) == 0.0

    def test_all_confident(self):
        assert ev.trial_accuracy([ev.TrialPrediction(np.tile([1.0, 0.0], (5, 1)), 0)]) == 1.0

    def test_tie_incorrect(self):
        tie = ev.TrialPrediction(np.array([[0.5, 0.5]]), 0)
        assert ev.trial_accuracy([tie]) == 0.0
        assert ev.trial_accuracy([ev.TrialPrediction(tie.probs, 1)]) == 0.0

    def test_empty(self):
        with pytest.raises(DomainError):
            ev.trial_accuracy([])

    def test_cancelling_offsets_do_not_change_decision(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet([1, 1], size=7)
        offsets = rng.normal(scale=0.05, size=(7, 1)) * np.array([1, -1])
        offsets -= offsets.mean(axis=0)
        for label in (0, 1):
            a = ev.trial_correct(ev.TrialPrediction(p, label))
            b = ev.trial_correct(ev.TrialPrediction(p + offsets, label))
            assert a == b


class TestMajority:
    def test_handcrafted_correct(self):
        assert ev.unaveraged_trial_accuracy([HANDCRAFTED]) == 1.0

    def test_even_split_incorrect(self):
        p = ev.TrialPrediction(np.array([[0.9, 0.1], [0.2, 0.8]]), 0)
        assert ev.unaveraged_trial_accuracy([p]) == 0.0

    def test_confident_agrees_with_tacc(self):
        preds = [ev.TrialPrediction(np.tile(np.eye(2)[k], (4, 1)), y) for k, y in [(0, 0), (1, 0), (1, 1)]]
        assert ev.unaveraged_trial_accuracy(preds) == ev.trial_accuracy(preds)


class TestWindowAccuracy:
    def test_handcrafted(self):
        wacc, curve = ev.window_accuracy([HANDCRAFTED])
        assert wacc == pytest.approx(2 / 3)
        assert curve == [1.0, 1.0, 0.0]

    def test_perfect(self):
        preds = [ev.TrialPrediction(np.tile(np.eye(2)[y], (6, 1)), y) for y in (0, 1, 1)]
        assert ev.window_accuracy(preds)[1] == [1.0] * 6

    def test_ragged_curve_omitted(self):
        preds = [ev.TrialPrediction(np.tile([0.9, 0.1], (n, 1)), 0) for n in (2, 3)]
        wacc, curve = ev.window_accuracy(preds)
        assert wacc == 1.0 and curve is None

    def test_stationary_curve_flat(self):
        rng = np.random.default_rng(3)
        n_trials, n_w, acc = 400, 20, 0.7
        preds = []
        for _ in range(n_trials):
            hit = rng.random(n_w) < acc
            preds.append(ev.TrialPrediction(np.where(hit[:, None], [0.8, 0.2], [0.2, 0.8]), 0))
        _, curve = ev.window_accuracy(preds)
        half_width = 4 * np.sqrt(acc * (1 - acc) / n_trials)
        assert np.all(np.abs(np.array(curve) - acc) < half_width)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
    def test_single_window_trials_agree(self, rows):
        preds = [ev.TrialPrediction(np.array([[1 - p, p]]), y) for p, y in rows]
        rep = ev.evaluate(preds)
        assert rep.tacc == rep.utacc == rep.wacc or any(p == 0.5 for p, _ in rows)
        assert 0 <= rep.tacc <= 1 and 0 <= rep.wacc <= 1


class TestTTest:
    def test_identical(self):
        out = ev.paired_ttest_onesided([0.6, 0.7, 0.8], [0.6, 0.7, 0.8])
        assert out["t"] == 0 and out["p"] == 0.5

    def test_worked_example(self):
        d = np.array([0.1, 0.1, -0.05])
        out = ev.paired_ttest_onesided(d, np.zeros(3))
        assert out["t"] == pytest.approx(1.0, abs=1e-12)
        assert out["df"] == 2
        assert out["p"] == pytest.approx(stats.t.sf(1.0, 2), abs=1e-4)
        # closed form for two degrees of freedom: 1/2 - t / (2 sqrt(t^2 + 2))
        assert out["p"] == pytest.approx(0.5 - 1 / (2 * np.sqrt(3)), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateTestError):
            ev.paired_ttest_onesided([0.3, 0.5], [0.2, 0.4])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=12), st.integers(0, 10_000))
    def test_antisymmetry_and_oracle(self, a, seed):
        a = np.array(a)
        b = np.random.default_rng(seed).uniform(-1, 1, a.size)
        try:
            ab = ev.paired_ttest_onesided(a, b)
        except DegenerateTestError:
            return
        ba = ev.paired_ttest_onesided(b, a)
        assert ab["t"] == pytest.approx(-ba["t"])
        assert ab["p"] + ba["p"] == pytest.approx(1.0)
        ref = stats.ttest_rel(a, b, alternative="greater")
        assert ab["p"] == pytest.approx(ref.pvalue, abs=1e-9)


class TestEds:
    def channel_decoder(self, channel):
        # decides from the sign of the mean of one channel
        def decode(x):
            m = x[:, channel].mean(axis=-1)
            p1 = 1 / (1 + np.exp(-10 * m + 0.5))  # slight class-0 bias breaks ties on silence
            return np.stack([1 - p1, p1], axis=-1)[:, None, :]
        return decode

    def data(self):
        rng = np.random.default_rng(0)
        y = np.arange(40) % 2
        x = rng.standard_normal((40, 4, 50)) * 0.1
        x[:, 2] += np.where(y == 1, 1.0, -1.0)[:, None]
        return x, y

    def test_informative_channel(self):
        x, y = self.data()
        scores = ev.eds_all(self.channel_decoder(2), x, y)
        assert scores[2] > 0 and np.argmax(scores) == 2
        assert scores[0] == scores[1] == scores[3] == 0

    def test_negative_kept(self):
        x, y = self.data()
        x[:, 2] *= -1  # the channel now points the wrong way; zeroing it helps
        assert ev.eds(self.channel_decoder(2), x, y, 2) < 0

    def test_class_variant(self):
        x, y = self.data()
        assert ev.eds(self.channel_decoder(2), x, y, 2, class_label=1) == pytest.approx(1.0)

    def test_bad_channel(self):
        x, y = self.data()
        with pytest.raises(IndexOutOfRangeError):
            ev.eds(self.channel_decoder(0), x, y, 4)

    def test_zero_weight_channel(self):
        from rapstream import model
        from rapstream.rap import OnlineTaskSpec, plan_rap

        cfg = model.ModelConfig(channel_count=4, rap_plan=plan_rap(64, [4], OnlineTaskSpec(1.0, 4.0)),
                                temporal_filters=2, temporal_kernel=8, second_block_filters=4, second_kernel=4)
        state = model.init_state(cfg)
        state.params["spatial.weight"][:, 1] = 0
        x = np.random.default_rng(1).standard_normal((10, 4, 128))
        assert ev.eds(state, x, np.arange(10) % 2, 1) == 0


def test_reports(tmp_path):
    reps = {"S0": ev.evaluate([HANDCRAFTED]), "S1": ev.evaluate([ev.TrialPrediction(HANDCRAFTED.probs, 0)])}
    report = ev.build_report("basenet", reps, eds_scores=[0.1, -0.05])
    ev.write_report_json(tmp_path / "r.json", report)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc) >= {"method", "per_subject", "mean", "std", "curve", "eds"}
    assert doc["per_subject"][0]["id"] == "S0"
    assert doc["curve"] == pytest.approx([0.5, 0.5, 0.5])
    ev.write_report_csv(tmp_path / "r.csv", report)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[1] == ["basenet", "S0", "0.0", "100.0", "66.7"]
    assert rows[-2][1] == "mean"
