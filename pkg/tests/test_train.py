import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnergy.data import DatasetSpec, make_splits
from snnergy.model import ConfigError, SNNergy, preset
from snnergy.tensor import Parameter, precision
from snnergy.train import (
    AdamW,
    TrainConfig,
    ablation_sweep,
    clip_grad_norm,
    evaluate,
    load_model,
    lr_at,
    save_model,
    train,
)

TINY_DATA = DatasetSpec(samples_per_class=8, hw=(16, 16))
TINY_MODEL = preset("toy", input_hw=(16, 16))
TINY_TRAIN = TrainConfig(epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def tiny_splits():
    return make_splits(TINY_DATA)


class TestSchedule:
    def test_warmup_is_linear(self):
        vals = [lr_at(s, 100, 10, 1.0) for s in range(10)]
        assert vals == pytest.approx([(s + 1) / 10 for s in range(10)], abs=1e-9)

    def test_endpoints(self):
        assert lr_at(10, 100, 10, 2.0, 0.1) == pytest.approx(0.1 + 0.95 * (1 + math.cos(math.pi / 90)), abs=1e-9)
        assert lr_at(99, 100, 10, 2.0, 0.1) == pytest.approx(0.1, abs=1e-9)

    def test_midpoint(self):
        # Halfway through the cosine phase the rate is the mean of max and min.
        assert lr_at(54, 100, 10, 1.0, 0.0) == pytest.approx(0.5, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(total=st.integers(2, 500), frac=st.floats(0, 0.5), lr=st.floats(1e-5, 1.0))
    def test_bounded_and_non_increasing_after_warmup(self, total, frac, lr):
        warm = int(total * frac)
        vals = [lr_at(s, total, warm, lr) for s in range(total)]
        assert all(0 <= v <= lr * (1 + 1e-12) for v in vals)
        tail = vals[warm:]
        assert all(a >= b - 1e-15 for a, b in zip(tail, tail[1:]))

    def test_scaled_warmup(self):
        assert TrainConfig(epochs=30).effective_warmup_epochs == 2
        assert TrainConfig(epochs=100).effective_warmup_epochs == 5
        assert TrainConfig(epochs=3).effective_warmup_epochs == 1
        assert TrainConfig(warmup_epochs=0).effective_warmup_epochs == 0


class TestOptimizer:
    @settings(max_examples=30, deadline=None)
    @given(lr=st.floats(1e-4, 0.1), wd=st.floats(0, 0.5))
    def test_decoupled_decay_with_zero_gradient(self, lr, wd):
        with precision(np.float64):
            p = Parameter(np.array([1.0, -2.0, 3.0]))
        p.grad = np.zeros(3)
        AdamW([p], lr=lr, weight_decay=wd).step()
        np.testing.assert_array_equal(p.data, np.array([1.0, -2.0, 3.0]) * (1 - lr * wd))

    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([0.0, 0.0], dtype=np.float64))
        p.grad = np.array([3.0, -0.5])
        AdamW([p], lr=0.01, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)

    def test_clip(self):
        p = Parameter(np.zeros(2, dtype=np.float64))
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_no_clip_below_threshold(self):
        p = Parameter(np.zeros(2, dtype=np.float64))
        p.grad = np.array([0.3, 0.4])
        clip_grad_norm([p], 1.0)
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"lr": 0}, {"epochs": 0}, {"warmup_epochs": 200}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_round_trip(self):
        cfg = TrainConfig(lr=1e-3, betas=(0.8, 0.99))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestLoop:
    def test_deterministic(self, tiny_splits):
        _, a = train(TINY_MODEL, TINY_TRAIN, tiny_splits)
        _, b = train(TINY_MODEL, TINY_TRAIN, tiny_splits)
        assert a.epochs == b.epochs
        assert a.test_top1 == b.test_top1
        assert a.firing_rates == b.firing_rates

    def test_metrics_shape(self, tiny_splits):
        _, m = train(TINY_MODEL, TINY_TRAIN, tiny_splits)
        assert [e["epoch"] for e in m.epochs] == [1, 2]
        assert all(0 <= e["val_top1"] <= 1 for e in m.epochs)
        assert 0 <= m.test_top1 <= 1
        assert all(0 <= r <= 1 for r in m.firing_rates.values())

    def test_timestep_mismatch(self, tiny_splits):
        with pytest.raises(ConfigError, match="T="):
            train(TINY_MODEL.replace(timesteps=3), TINY_TRAIN, tiny_splits)

    def test_target_stops_early(self, tiny_splits):
        _, m = train(TINY_MODEL, TINY_TRAIN.replace(epochs=5, target_top1=0.0), tiny_splits)
        assert len(m.epochs) == 1

    def test_evaluate_empty_split(self, tiny_splits):
        with pytest.raises(ValueError):
            evaluate(SNNergy(TINY_MODEL), tiny_splits["val"].subset(np.array([], dtype=int)))

    def test_untrained_model_scores_near_chance(self):
        splits = make_splits(DatasetSpec(samples_per_class=100, hw=(16, 16)))
        ds = splits["train"]
        # Three standard errors of a binomial with p = 0.25 on 280 samples.
        tol = 3 * math.sqrt(0.25 * 0.75 / len(ds))
        for seed in range(3):
            acc = evaluate(SNNergy(TINY_MODEL.replace(seed=seed)), ds)[0]
            assert abs(acc - 0.25) < tol

    def test_checkpoint_round_trip(self, tmp_path, tiny_splits):
        model, _ = train(TINY_MODEL, TINY_TRAIN.replace(epochs=1), tiny_splits)
        save_model(tmp_path / "m.ckpt", model, {"note": "x"})
        back, header = load_model(tmp_path / "m.ckpt")
        assert header["note"] == "x" and back.cfg == model.cfg
        a = evaluate(model, tiny_splits["test"])
        b = evaluate(back, tiny_splits["test"])
        assert a[:2] == b[:2]


class TestAblation:
    def test_rows(self):
        rows = ablation_sweep("pathway", ["spatial"], TINY_MODEL, TINY_TRAIN.replace(epochs=1), TINY_DATA)
        assert rows[0]["kind"] == "pathway" and rows[0]["value"] == "spatial"
        assert set(rows[0]) == {"kind", "value", "seed", "top1", "loss", "test_top1", "wall_s"}

    def test_unknown(self):
        with pytest.raises(ConfigError):
            ablation_sweep("depth", [1], TINY_MODEL, TINY_TRAIN, TINY_DATA)
        with pytest.raises(ConfigError):
            ablation_sweep("pathway", ["both"], TINY_MODEL, TINY_TRAIN, TINY_DATA)
