from __future__ import annotations

import numpy as np
import pytest

from rapstream import model
from rapstream.errors import (
    ConfigurationError,
    IncompatiblePlanError,
    IndexOutOfRangeError,
    InvalidStateError,
    ParseError,
    ShapeError,
)
from rapstream.rap import OnlineTaskSpec, RapPlan, plan_rap, window_sample_range

DREYER_TASK = OnlineTaskSpec(1.0, 16.0, 4.75)


def dreyer_config(**kw):
    return model.ModelConfig(channel_count=27, rap_plan=plan_rap(256, [8], DREYER_TASK), **kw)


def tiny_config(**kw):
    plan = plan_rap(64, [4], OnlineTaskSpec(1.0, 4.0))
    base = dict(channel_count=3, rap_plan=plan, temporal_filters=2, temporal_kernel=8, depth_multiplier=2,
                second_block_filters=3, second_kernel=4)
    base.update(kw)
    return model.ModelConfig(**base)


@pytest.fixture(scope="module")
def dreyer_state():
    return model.init_state(dreyer_config(), seed=3)


class TestForwardShapes:
    def test_trial_gives_61_rows(self, dreyer_state):
        x = np.random.default_rng(0).standard_normal((27, 1216))
        out = model.forward(dreyer_state, x)
        assert out.probs.shape == (61, 2)
        np.testing.assert_allclose(out.probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_window_gives_one_row(self, dreyer_state):
        out = model.forward(dreyer_state, np.random.default_rng(1).standard_normal((27, 256)))
        assert out.probs.shape == (1, 2)

    def test_zero_input_uniform(self, dreyer_state):
        out = model.forward(dreyer_state, np.zeros((27, 1216)))
        np.testing.assert_allclose(out.probs, 0.5, atol=1e-6)

    @pytest.mark.parametrize("n", [1215, 248, 1224])
    def test_bad_length(self, dreyer_state, n):
        with pytest.raises(ShapeError, match="multiple of 8"):
            model.forward(dreyer_state, np.zeros((27, n)))

    def test_bad_channels(self, dreyer_state):
        with pytest.raises(ShapeError):
            model.forward(dreyer_state, np.zeros((26, 256)))

    def test_position_formula(self, dreyer_state):
        cfg = dreyer_state.config
        for n in (256, 272, 512, 1216):
            expected = (n // 8 - 32) // 2 + 1
            assert cfg.output_positions(n) == expected
            assert model.forward(dreyer_state, np.zeros((2, 27, n))).probs.shape == (2, expected, 2)

    def test_kernel_too_long_for_valid_padding(self):
        with pytest.raises(ConfigurationError, match="valid padding"):
            dreyer_config(temporal_kernel=256, second_kernel=16)


class TestJointIndividual:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_valid_mode_rows_match_windows(self, dreyer_state, seed):
        x = np.random.default_rng(seed).standard_normal((27, 1216)).astype(np.float32)
        joint = model.forward(dreyer_state, x).probs
        windows = np.stack([x[:, slice(*window_sample_range(j, DREYER_TASK, 256))] for j in range(61)])
        single = model.forward(dreyer_state, windows).probs[:, 0]
        assert np.max(np.abs(joint - single)) < 1e-5

    def test_same_mode_interior_close(self):
        state = model.init_state(dreyer_config(padding_mode="same"), seed=3)
        x = np.random.default_rng(4).standard_normal((27, 1216))
        joint = model.forward(state, x).probs
        assert joint.shape == (61, 2)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        state = model.init_state(tiny_config(dropout_rate=0.0), seed=0)
        state.params["bn2.weight"][:] = 1.0
        x = np.random.default_rng(0).standard_normal((16, 3, 128)) * 5 + 2
        res = model.forward(state, x, "train")
        xhat = res.cache.tensors["bn1.xhat"]
        np.testing.assert_allclose(xhat.mean(axis=(0, 2)), 0, atol=1e-3)
        np.testing.assert_allclose(xhat.var(axis=(0, 2)), 1, atol=1e-3)

    def test_running_stats_move(self):
        state = model.init_state(tiny_config(), seed=0)
        before = state.buffers["bn1.running_mean"].copy()
        model.forward(state, np.random.default_rng(0).standard_normal((4, 3, 128)) + 3, "train")
        assert not np.array_equal(before, state.buffers["bn1.running_mean"])
        assert np.all(state.buffers["bn1.running_var"] > 0)


class TestGradients:
    def setup_method(self):
        self.state = model.init_state(tiny_config(dropout_rate=0.0), seed=1).astype(np.float64)
        rng = np.random.default_rng(101)
        self.x = rng.standard_normal((8, 3, 128))
        self.labels = rng.integers(0, 2, 8)
        self.w = rng.standard_normal((8, 5, 2))

    def loss(self, state):
        return model.cross_entropy(model.forward(state, self.x, "train").logits, self.labels)[0]

    def numeric_grads(self, h, name):
        p = self.state.params[name]
        num = np.empty(p.size)
        for i in range(p.size):
            idx = np.unravel_index(i, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            up = self.loss(self.state)
            p[idx] = orig - h
            down = self.loss(self.state)
            p[idx] = orig
            num[i] = (up - down) / (2 * h)
        return num

    def analytic_grads(self):
        res = model.forward(self.state, self.x, "train")
        return model.backward(self.state, res.cache, model.cross_entropy(res.logits, self.labels)[1])

    def test_finite_difference(self):
        grads = self.analytic_grads()
        for name in model.PARAM_NAMES:
            num = self.numeric_grads(1e-3, name)
            rel = np.linalg.norm(grads[name].ravel() - num) / np.linalg.norm(num)
            assert rel < 1e-4, name

    def test_finite_difference_converges(self):
        # shrinking the step removes the truncation error; what remains is the analytic mismatch
        grads = self.analytic_grads()
        for name in ("spatial.weight", "temporal.weight", "conv2.weight", "bn1.bias"):
            num = self.numeric_grads(1e-5, name)
            rel = np.linalg.norm(grads[name].ravel() - num) / np.linalg.norm(num)
            assert rel < 1e-7, name

    def test_zero_upstream(self):
        res = model.forward(self.state, self.x, "train")
        grads = model.backward(self.state, res.cache, np.zeros_like(self.w))
        assert all(np.all(g == 0) for g in grads.values())

    def test_duplicated_batch_doubles(self):
        # a batch of one trial twice vs twice that trial's contribution: BN sees identical statistics
        x1 = self.x[:1]
        w1 = self.w[:1, :, :]
        g1 = model.backward(self.state, model.forward(self.state, x1, "train").cache, w1)
        x2 = np.concatenate([x1, x1])
        g2 = model.backward(self.state, model.forward(self.state, x2, "train").cache, np.concatenate([w1, w1]))
        for name in model.PARAM_NAMES:
            np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-10, atol=1e-12)

    def test_stale_cache(self):
        res = model.forward(self.state, self.x, "train")
        self.state.version += 1
        with pytest.raises(InvalidStateError, match="stale"):
            model.backward(self.state, res.cache, self.w)

    def test_infer_cache_rejected(self):
        res = model.forward(self.state, self.x, "infer")
        with pytest.raises(InvalidStateError):
            model.backward(self.state, res.cache, self.w)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 5, 2))
        labels = np.array([0, 1, 1, 0])
        loss, grad = model.cross_entropy(logits, labels)
        h = 1e-6
        num = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            lp = logits.copy(); lp[idx] += h
            lm = logits.copy(); lm[idx] -= h
            num[idx] = (model.cross_entropy(lp, labels)[0] - model.cross_entropy(lm, labels)[0]) / (2 * h)
        np.testing.assert_allclose(grad, num, atol=1e-6)
        # per trial: mean over positions of -log p(label)
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        ref = -sum(np.log(p[b, :, labels[b]]).mean() for b in range(4))
        assert loss == pytest.approx(ref)


class TestRapSurgery:
    def test_doubling_update_frequency(self, dreyer_state):
        new_plan = plan_rap(256, [8], OnlineTaskSpec(1.0, 32.0, 4.75))
        replanned = model.apply_rap(dreyer_state, new_plan)
        assert replanned.config.rap_plan.strides == (8, 1)
        for k in dreyer_state.params:
            assert replanned.params[k].tobytes() == dreyer_state.params[k].tobytes()
        out = model.forward(replanned, np.zeros((27, 1216)))
        # (152 - 32)/1 + 1 = 2*61 - 1
        assert out.probs.shape[0] == 121

    def test_identical_plan(self, dreyer_state):
        same = model.apply_rap(dreyer_state, dreyer_state.config.rap_plan)
        assert same.config == dreyer_state.config
        for k in dreyer_state.params:
            np.testing.assert_array_equal(same.params[k], dreyer_state.params[k])

    def test_non_integer_stride(self, dreyer_state):
        bad = RapPlan((8, 32), (8, 1.5), 32, 256)
        with pytest.raises(IncompatiblePlanError):
            model.apply_rap(dreyer_state, bad)

    def test_different_downsampling(self, dreyer_state):
        with pytest.raises(IncompatiblePlanError):
            model.apply_rap(dreyer_state, plan_rap(256, [4], DREYER_TASK))


class TestZeroElectrode:
    def test_already_zero_channel(self, dreyer_state):
        x = np.random.default_rng(0).standard_normal((27, 256))
        x[4] = 0
        np.testing.assert_array_equal(model.zero_electrode(dreyer_state, x, 4), x)

    def test_coverage(self):
        x = np.random.default_rng(0).standard_normal((5, 20)) + 10
        zeroed = sum((model.zero_electrode(None, x, c) == 0).astype(int) for c in range(5))
        np.testing.assert_array_equal(zeroed, np.ones_like(x, dtype=int))

    def test_bad_index(self, dreyer_state):
        with pytest.raises(IndexOutOfRangeError):
            model.zero_electrode(dreyer_state, np.zeros((27, 256)), 27)

    def test_original_untouched(self):
        x = np.ones((3, 4))
        model.zero_electrode(None, x, 1)
        assert np.all(x == 1)


class TestDeterminismAndCheckpoint:
    def test_same_seed_bit_identical(self):
        x = np.random.default_rng(0).standard_normal((27, 512))
        a = model.forward(model.init_state(dreyer_config(), seed=9), x).probs
        b = model.forward(model.init_state(dreyer_config(), seed=9), x).probs
        assert a.tobytes() == b.tobytes()

    def test_round_trip(self, tmp_path, dreyer_state):
        path = tmp_path / "m.rapc"
        model.save_checkpoint(path, dreyer_state)
        back = model.load_checkpoint(path)
        assert back.config == dreyer_state.config
        for k in dreyer_state.params:
            assert back.params[k].tobytes() == dreyer_state.params[k].tobytes()
        for k in dreyer_state.buffers:
            assert back.buffers[k].tobytes() == dreyer_state.buffers[k].tobytes()

    def test_truncated(self, tmp_path, dreyer_state):
        path = tmp_path / "m.rapc"
        model.save_checkpoint(path, dreyer_state)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ParseError, match="truncated"):
            model.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.rapc"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ParseError, match="magic"):
            model.load_checkpoint(path)
