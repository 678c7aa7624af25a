import numpy as np
import pytest

from refd.errors import ConfigError, DataError, NumericalError
from refd.metrics import f1_per_class, macro_f1
from refd.mlp import forward, load_model, save_model
from refd.synth import SynthConfig, generate_synthetic
from refd.training import (
    TrainConfig,
    adam_step,
    effective_lr,
    init_adam_state,
    train_fake_dispersion,
    train_one_stage,
    train_real_emphasis,
)


@pytest.fixture(scope="module")
def data():
    """Default-scale synthetic data; the trainer examples are calibrated
    against exactly this (seed 42, default SynthConfig)."""
    return generate_synthetic(SynthConfig(seed=42))


def tiny_data(seed=3):
    cfg = SynthConfig(
        seed=seed,
        dim_raw=16,
        per_class_counts={
            "train": {c: 40 for c in range(7)},
            "dev": {c: 20 for c in range(7)},
            "eval": {c: 20 for c in range(8)},
        },
    )
    return generate_synthetic(cfg)


class TestAdam:
    def test_two_step_scalar_oracle(self):
        # constant gradient g: bias correction gives m_hat=g, v_hat=g^2, so
        # every step moves by exactly -lr*g/(|g|+eps); two steps from theta=1
        cfg = TrainConfig(weight_decay=0.0)
        params = {"t": np.array([1.0])}
        state = init_adam_state(params)
        g = {"t": np.array([1.0])}
        for _ in range(2):
            params, state = adam_step(params, g, state, cfg, lr=0.1)
        expected = 1.0 - 2.0 * (0.1 / (1.0 + cfg.eps))
        assert params["t"][0] == pytest.approx(expected, abs=1e-12)
        assert state.t == 2

    def test_zero_grad_zero_decay_is_identity(self):
        cfg = TrainConfig(weight_decay=0.0)
        params = {"a": np.array([3.0, -2.0])}
        state = init_adam_state(params)
        new, _ = adam_step(params, {"a": np.zeros(2)}, state, cfg, lr=0.5)
        np.testing.assert_array_equal(new["a"], params["a"])

    def test_first_step_approaches_sign_step(self):
        cfg = TrainConfig(weight_decay=0.0)
        params = {"a": np.array([0.0, 0.0])}
        state = init_adam_state(params)
        g = {"a": np.array([1e6, -1e6])}
        new, _ = adam_step(params, g, state, cfg, lr=0.1)
        np.testing.assert_allclose(new["a"], [-0.1, 0.1], rtol=1e-9)

    def test_decoupled_weight_decay(self):
        # zero gradient: the only movement is the decay term -lr*wd*theta
        cfg = TrainConfig(weight_decay=0.01)
        params = {"a": np.array([2.0])}
        state = init_adam_state(params)
        new, _ = adam_step(params, {"a": np.zeros(1)}, state, cfg, lr=0.5)
        assert new["a"][0] == pytest.approx(2.0 - 0.5 * 0.01 * 2.0, abs=1e-15)

    def test_nonfinite_grad_rejected(self):
        cfg = TrainConfig()
        params = {"a": np.zeros(1)}
        with pytest.raises(NumericalError):
            adam_step(params, {"a": np.array([np.nan])},
                      init_adam_state(params), cfg)

    def test_functional_no_mutation(self):
        cfg = TrainConfig()
        params = {"a": np.array([1.0])}
        state = init_adam_state(params)
        adam_step(params, {"a": np.array([0.3])}, state, cfg)
        assert params["a"][0] == 1.0 and state.t == 0


class TestSchedule:
    def test_halving_shape(self):
        cfg = TrainConfig(lr=1e-3, lr_halve_every=5)
        for epoch, factor in [(0, 1), (4, 1), (5, 2), (9, 2), (10, 4), (14, 4)]:
            assert effective_lr(cfg, epoch) == pytest.approx(1e-3 / factor)


class TestConfigValidation:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_mixup_needs_batch_of_two(self):
        mats, man = tiny_data()
        y = man.labels("train")
        yd = man.labels("dev")
        with pytest.raises(ConfigError):
            train_fake_dispersion(
                mats["train"].data[y >= 1], y[y >= 1],
                mats["dev"].data[yd >= 1], yd[yd >= 1],
                TrainConfig(batch_size=1, mix_eta=1.0),
            )


class TestRealEmphasis:
    def test_default_cfg_reaches_f1_095(self, data):
        mats, man = data
        y_tr = (man.labels("train") > 0).astype(int)
        y_dev = (man.labels("dev") > 0).astype(int)
        seen = []
        model = train_real_emphasis(
            mats["train"], y_tr, mats["dev"], y_dev, TrainConfig(seed=42),
            callback=lambda **kw: seen.append(kw),
        )
        scores = forward(model, mats["dev"]).oc_scores
        preds = np.where(scores >= 0.98, 0, 1)
        f1 = f1_per_class(preds, y_dev, class_set=[0])[0]
        assert f1 >= 0.95
        # returned checkpoint is the best epoch-end checkpoint
        assert f1 == pytest.approx(max(s["dev_metric"] for s in seen), abs=1e-12)

    def test_deterministic(self):
        mats, man = tiny_data()
        y_tr = (man.labels("train") > 0).astype(int)
        y_dev = (man.labels("dev") > 0).astype(int)
        cfg = TrainConfig(epochs=2, seed=7)
        a = train_real_emphasis(mats["train"], y_tr, mats["dev"], y_dev, cfg)
        b = train_real_emphasis(mats["train"], y_tr, mats["dev"], y_dev, cfg)
        np.testing.assert_array_equal(a.W1, b.W1)
        np.testing.assert_array_equal(a.head_w0, b.head_w0)

    def test_no_real_samples_rejected(self):
        mats, man = tiny_data()
        y = np.ones(mats["train"].n, dtype=int)
        with pytest.raises(DataError):
            train_real_emphasis(mats["train"], y, mats["dev"],
                                np.ones(mats["dev"].n, dtype=int),
                                TrainConfig(epochs=1))

    def test_uncollapsed_labels_rejected(self):
        mats, man = tiny_data()
        with pytest.raises(DataError):
            train_real_emphasis(mats["train"], man.labels("train"),
                                mats["dev"], man.labels("dev"),
                                TrainConfig(epochs=1))


class TestFakeDispersion:
    @staticmethod
    def _fakes(mats, man, split):
        y = man.labels(split)
        keep = y >= 1
        return mats[split].data[keep], y[keep]

    def test_default_cfg_reaches_macro_f1_095(self, data):
        mats, man = data
        x, y = self._fakes(mats, man, "train")
        xd, yd = self._fakes(mats, man, "dev")
        model = train_fake_dispersion(x, y, xd, yd, TrainConfig(seed=42))
        assert model.stage == "FD" and model.class_ids == (1, 2, 3, 4, 5, 6)
        logits = forward(model, xd).logits.data
        preds = np.asarray(model.class_ids)[np.argmax(logits, axis=1)]
        assert macro_f1(f1_per_class(preds, yd, model.class_ids)) >= 0.95

    def test_rejects_real_or_novel_labels(self):
        mats, man = tiny_data()
        x, y = self._fakes(mats, man, "train")
        xd, yd = self._fakes(mats, man, "dev")
        cfg = TrainConfig(epochs=1)
        with pytest.raises(DataError):
            train_fake_dispersion(x, np.where(y == 1, 0, y), xd, yd, cfg)
        with pytest.raises(DataError):
            train_fake_dispersion(x, np.where(y == 1, 7, y), xd, yd, cfg)

    def test_eta_zero_differs_from_mixup_run(self):
        mats, man = tiny_data()
        x, y = self._fakes(mats, man, "train")
        xd, yd = self._fakes(mats, man, "dev")
        a = train_fake_dispersion(x, y, xd, yd, TrainConfig(epochs=2, mix_eta=0.0))
        b = train_fake_dispersion(x, y, xd, yd, TrainConfig(epochs=2, mix_eta=1.0))
        assert not np.array_equal(a.W1, b.W1)

    def test_deterministic(self):
        mats, man = tiny_data()
        x, y = self._fakes(mats, man, "train")
        xd, yd = self._fakes(mats, man, "dev")
        cfg = TrainConfig(epochs=2, seed=11)
        a = train_fake_dispersion(x, y, xd, yd, cfg)
        b = train_fake_dispersion(x, y, xd, yd, cfg)
        for name in ("W1", "b1", "W2", "b2", "head_W", "head_b"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


class TestOneStage:
    def test_default_cfg_reaches_macro_f1_090(self, data):
        mats, man = data
        yt, yd = man.labels("train"), man.labels("dev")
        model = train_one_stage(mats["train"].data, yt, mats["dev"].data, yd,
                                TrainConfig(seed=42))
        assert model.class_ids == (0, 1, 2, 3, 4, 5, 6)
        logits = forward(model, mats["dev"].data).logits.data
        preds = np.argmax(logits, axis=1)
        assert macro_f1(f1_per_class(preds, yd, model.class_ids)) >= 0.90

    def test_checkpoint_round_trip_after_training(self, tmp_path):
        mats, man = tiny_data()
        yt = man.labels("train")
        model = train_one_stage(mats["train"].data, yt, mats["train"].data, yt,
                                TrainConfig(epochs=2))
        p = tmp_path / "m.mlp"
        save_model(model, p)
        back = load_model(p)
        x = mats["train"].data[:10]
        np.testing.assert_array_equal(
            forward(model, x).logits.data, forward(back, x).logits.data
        )
