import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesbits.arch import parse_arch
from bayesbits.data import Dataset, synth_dataset
from bayesbits.model import Model
from bayesbits.training import (
    DivergenceError,
    TrainConfig,
    fix_gates_and_finetune,
    pareto_front,
    post_train,
    sensitivity_baseline,
    train_joint,
)

from oracles import pareto_points

ARCH = {"input_shape": [16], "num_classes": 4, "layers": "32FC-Softmax", "input_signed": True}


def toy(seed=0, n=600, margin=4.0):
    d = synth_dataset(seed, n + 300, 4, margin=margin)
    return Dataset(d.x[:n], d.y[:n]), Dataset(d.x[n:], d.y[n:])


def cfg(**kw):
    base = dict(epochs=3, batch_size=32, lr_weights=3e-3, lr_gates=1e-2, lr_ranges=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestJoint:
    def test_loss_decreases(self):
        tr, te = toy()
        hist = train_joint(Model(parse_arch(ARCH), seed=0), tr, te, cfg(epochs=4))
        assert hist[-1].train_ce < 0.5 * hist[0].train_ce
        assert hist[-1].accuracy > 0.9

    def test_deterministic(self):
        tr, te = toy()
        runs = []
        for _ in range(2):
            m = Model(parse_arch(ARCH), seed=1)
            h = train_joint(m, tr, te, cfg(mu=0.05, seed=4))
            runs.append((m.weight_checksum(), [r.to_dict() for r in h]))
        assert runs[0] == runs[1]

    def test_mu_sweep_reduces_bops(self):
        tr, te = toy()
        bops = []
        for mu in (0.0, 0.05, 0.5):
            m = Model(parse_arch(ARCH), seed=0)
            train_joint(m, tr, te, cfg(mu=mu, epochs=4, lr_gates=0.1))
            bops.append(m.bops().relative)
        assert bops[0] == 100.0
        assert bops[0] >= bops[1] >= bops[2] and bops[2] < bops[0]

    def test_finetune_keeps_accuracy_and_gates(self):
        tr, te = toy()
        m = Model(parse_arch(ARCH), seed=0)
        first = train_joint(m, tr, te, cfg(mu=0.05))[-1]
        bits = m.effective_bits()
        second = fix_gates_and_finetune(m, tr, te, cfg(finetune_epochs=2, lr_finetune=1e-3))[-1]
        assert m.effective_bits() == bits
        assert all(q.frozen is not None for q in m.quantizers.values())
        assert second.accuracy >= first.accuracy - 0.005

    def test_divergence_raises_with_snapshot(self, monkeypatch):
        tr, te = toy()
        m = Model(parse_arch(ARCH), seed=0)
        orig = m.forward

        def poisoned(x, **kw):
            out = orig(x, **kw)
            out.data = out.data * np.nan
            return out

        monkeypatch.setattr(m, "forward", poisoned)
        with pytest.raises(DivergenceError) as e:
            train_joint(m, tr, te, cfg())
        assert e.value.snapshot["step"] == 0 and "fc1.a" in e.value.snapshot["betas"]


class TestPostTrain:
    @pytest.mark.parametrize("mode", ["post-train-gates", "post-train-gates-and-scales"])
    def test_weights_untouched(self, mode):
        tr, te = toy()
        m = Model(parse_arch(ARCH), seed=0)
        m.set_quantization(False)
        train_joint(m, tr, te, cfg(), calibrate_first=False)
        before = m.weight_checksum()
        biases = {k: b.data.copy() for k, b in m.biases.items()}
        point, hist = post_train(m, tr.subset(200), cfg(epochs=6, mu=0.5, mode=mode, lr_gates=0.5), eval_data=te)
        assert m.weight_checksum() == before
        for k, b in m.biases.items():
            np.testing.assert_array_equal(b.data, biases[k])
        assert point.relative_bops < 100.0 and point.label == mode and len(hist) == 6

    def test_gates_only_keeps_ranges_fixed_after_calibration(self):
        tr, _ = toy()
        m = Model(parse_arch(ARCH), seed=0)
        m.set_quantization(False)
        seen = {}
        post_train(m, tr.subset(100), cfg(epochs=1, mode="post-train-gates"),
                   callback=lambda rec: seen.update({k: float(q.beta.data) for k, q in m.quantizers.items()}))
        m2 = Model(parse_arch(ARCH), seed=0)
        post_train(m2, tr.subset(100), cfg(epochs=0, mode="post-train-gates"))
        assert seen == {k: float(q.beta.data) for k, q in m2.quantizers.items()}

    def test_joint_mode_rejected(self):
        tr, _ = toy()
        with pytest.raises(ValueError):
            post_train(Model(parse_arch(ARCH)), tr, cfg())


class TestPareto:
    def test_hand_example(self):
        pts = [(10, 0.9), (20, 0.95), (15, 0.85), (20, 0.9), (5, 0.5)]
        assert pareto_front(pts) == [(5, 0.5), (10, 0.9), (20, 0.95)]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=12))
    def test_matches_oracle(self, pts):
        assert pareto_front(pts) == pareto_points(pts)


class TestBaseline:
    def test_front_is_subset_of_curve(self):
        tr, te = toy()
        m = Model(parse_arch(ARCH), seed=0)
        m.set_quantization(False)
        train_joint(m, tr, te, cfg(), calibrate_first=False)
        m.set_quantization(True)
        res = sensitivity_baseline(m, te, 2, 16)
        assert sorted(res.order) == sorted(m.quantizers)
        assert len(res.curve) == len(m.quantizers) + 1
        assert set(res.front) <= set(res.curve)
        assert res.curve[-1][0] == pytest.approx(100.0 * 4 / 1024)
        assert all(q.frozen is None for q in m.quantizers.values())


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"epochs": -1}, {"batch_size": 0}, {"lr_gates": 0.0}, {"mu": -0.1},
        {"schedule": "exponential"}, {"mode": "other"}, {"weight_optimizer": "lbfgs"}, {"tau": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(Exception):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"epochs": 1, "learning_rate": 0.1})

    def test_round_trip(self):
        c = TrainConfig(mu=0.2, seed=9)
        assert TrainConfig.from_dict(c.to_dict()) == c
