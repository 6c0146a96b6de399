"""
Tests for the optimizer, schedule and training loops.
"""

import csv
import math

import numpy as np
import pytest

from us_mae import diffcore as dc
from us_mae import training
from us_mae.diffcore import ParamSet
from us_mae.errors import CompatibilityError, NonFiniteError, UsageError
from us_mae.formats import checkpoint_from_bytes, checkpoint_to_bytes
from us_mae.metrics import topk_accuracy
from us_mae.model import init_params, preset, pretrain_forward
from us_mae.patching import MaskBatch, sample_mask
from us_mae.signal_synth import DatasetSpec, dequantize_8bit, generate_dataset
from us_mae.training import (
    LOG_HEADER,
    OptimState,
    Schedule,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    config_from_checkpoint,
    finetune,
    infer_logits,
    limit_examples,
    lr_at,
    params_from_checkpoint,
    pretrain,
    state_from_checkpoint,
    to_checkpoint,
    write_log_csv,
)


class TestSchedule:
    """Test warmup plus cosine decay."""

    def test_reference_points(self):
        schedule = Schedule(base_lr=1e-3, warmup_fraction=0.15, total_steps=100)
        assert schedule.warmup_steps == 15
        assert lr_at(0, schedule) == 0.0
        assert lr_at(15, schedule) == 1e-3
        assert abs(lr_at(100, schedule)) <= 1e-12

    def test_linear_warmup(self):
        schedule = Schedule(base_lr=0.05, warmup_fraction=0.1, total_steps=200)
        assert lr_at(10, schedule) == pytest.approx(0.025)

    def test_monotone_after_warmup(self):
        schedule = Schedule(base_lr=1e-3, warmup_fraction=0.15, total_steps=300)
        values = [lr_at(s, schedule) for s in range(schedule.warmup_steps, 301)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_no_warmup(self):
        assert lr_at(0, Schedule(base_lr=0.01, warmup_fraction=0.0, total_steps=10)) == 0.01

    def test_step_out_of_range(self):
        schedule = Schedule(base_lr=1e-3, warmup_fraction=0.15, total_steps=100)
        with pytest.raises(UsageError):
            lr_at(101, schedule)
        with pytest.raises(UsageError):
            lr_at(-1, schedule)

    @pytest.mark.parametrize("kwargs", [
        {"base_lr": 0.0, "warmup_fraction": 0.1, "total_steps": 10},
        {"base_lr": 1e-3, "warmup_fraction": 1.0, "total_steps": 10},
        {"base_lr": 1e-3, "warmup_fraction": 0.1, "total_steps": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(UsageError):
            Schedule(**kwargs).validate()

    def test_mode_defaults(self):
        assert TrainConfig(mode="pretrain").schedule(100) == Schedule(1e-3, 0.15, 100)
        assert TrainConfig(mode="finetune").schedule(100) == Schedule(0.05, 0.10, 100)
        assert TrainConfig(mode="scratch", base_lr=1e-3).schedule(100).base_lr == 1e-3


class TestAdamW:
    """Test the optimizer update."""

    def _scalar(self, value):
        params = ParamSet({"theta": [value]})
        return params, OptimState.fresh(params, weight_decay=0.0)

    def test_decay_only_with_zero_gradient(self):
        params = ParamSet({"w": [2.0, -4.0]})
        state = OptimState.fresh(params, weight_decay=1e-4)
        adamw_step(params, state, lr=0.1)
        np.testing.assert_allclose(params["w"].data, [2.0 * (1 - 1e-5), -4.0 * (1 - 1e-5)], rtol=1e-6)
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params, state = self._scalar(1.0)
        params["theta"].grad[:] = 1.0
        adamw_step(params, state, lr=0.1)
        assert params["theta"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_converges_on_quadratic(self):
        params, state = self._scalar(1.0)
        for _ in range(100):
            params.zero_grad()
            theta = params["theta"]
            dc.total(dc.mul(theta, theta)).backward()
            adamw_step(params, state, lr=0.05)
        assert abs(params["theta"].data[0]) < 0.2

    def test_non_finite_gradient(self):
        params, state = self._scalar(1.0)
        params["theta"].grad[:] = np.nan
        with pytest.raises(NonFiniteError):
            adamw_step(params, state, lr=0.1)
        assert state.step == 0

    def test_state_must_cover_params(self):
        params, _ = self._scalar(1.0)
        with pytest.raises(UsageError):
            adamw_step(params, OptimState.fresh(ParamSet({"other": [1.0]})), lr=0.1)

    def test_clip_global_norm(self):
        params = ParamSet({"a": [0.0], "b": [0.0]})
        params["a"].grad[:] = 3.0
        params["b"].grad[:] = 4.0
        assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
        assert params["a"].grad[0] == pytest.approx(0.6)
        assert params["b"].grad[0] == pytest.approx(0.8)

    def test_clip_leaves_small_gradients(self):
        params = ParamSet({"a": [0.0]})
        params["a"].grad[:] = 0.5
        clip_grad_norm(params, 1.0)
        assert params["a"].grad[0] == 0.5


def short_run(**overrides):
    values = {"epochs": 2, "batch_size": 16, "seed": 3}
    values.update(overrides)
    return TrainConfig(**values)


class TestPretrain:
    """Test the masked-reconstruction loop."""

    def test_log_rows(self, tiny_config, small_signals):
        result = pretrain(small_signals[:32], small_signals[32:], tiny_config, short_run())
        assert [(e, s, m) for e, s, m, _ in result.log] == [
            (0, "train", "loss"), (0, "val", "loss"), (1, "train", "loss"), (1, "val", "loss"),
        ]
        assert result.best_epoch in (0, 1)
        assert result.state.step == 4
        assert "dec.head.w" in result.params

    def test_reproducible(self, tiny_config, small_signals):
        first = pretrain(small_signals, None, tiny_config, short_run(epochs=1))
        second = pretrain(small_signals, None, tiny_config, short_run(epochs=1))
        assert first.log == second.log
        for name in first.params:
            assert np.array_equal(first.params[name].data, second.params[name].data)

    def test_seed_changes_run(self, tiny_config, small_signals):
        first = pretrain(small_signals, None, tiny_config, short_run(epochs=1, seed=0))
        second = pretrain(small_signals, None, tiny_config, short_run(epochs=1, seed=1))
        assert first.log != second.log

    def test_learns_constant_signal(self, tiny_config):
        signals = np.full((8, 512), 0.5, dtype=np.float32)
        result = pretrain(signals, None, tiny_config, TrainConfig(
            epochs=40, batch_size=8, seed=0, base_lr=3e-2, warmup_fraction=0.1
        ))
        history = result.history("train", "loss")
        assert history[-1] < 0.6 * history[0]

    def test_last_step_uses_positive_rate(self, tiny_config, small_signals, monkeypatch):
        rates = []
        apply = training.adamw_step

        def recording(params, state, lr):
            rates.append(lr)
            apply(params, state, lr)

        monkeypatch.setattr(training, "adamw_step", recording)
        pretrain(small_signals, None, tiny_config, short_run(epochs=3, batch_size=16))
        assert len(rates) == 9
        assert rates[0] == 0.0
        assert rates[-1] > 0.0

    def test_single_step_run_updates_weights(self, tiny_config, small_signals):
        start = init_params(tiny_config, seed=3, decoder=True)
        result = pretrain(small_signals, None, tiny_config, short_run(epochs=1, batch_size=64))
        assert result.state.step == 1
        assert any(not np.array_equal(start[name].data, result.params[name].data) for name in start)

    def test_length_mismatch(self, tiny_config):
        with pytest.raises(UsageError):
            pretrain(np.zeros((4, 256), dtype=np.uint8), None, tiny_config, short_run())

    def test_incompatible_start(self, tiny_config, small_signals):
        params = init_params(preset("S"), seed=0)
        with pytest.raises(CompatibilityError):
            pretrain(small_signals, None, tiny_config, short_run(), params=params)

    def test_log_csv(self, tiny_config, small_signals, tmp_path):
        result = pretrain(small_signals, None, tiny_config, short_run(epochs=1))
        path = tmp_path / "log.csv"
        write_log_csv(str(path), result.log)
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == LOG_HEADER
        assert rows[1][:3] == ["0", "train", "loss"]


class TestCheckpointState:
    """Test resuming from checkpoints."""

    def _grads(self, params, config, signals):
        rng = np.random.default_rng(0)
        plan = MaskBatch.from_plans([sample_mask(config.patch_count, 0.75, rng) for _ in signals])
        params.zero_grad()
        loss, _ = pretrain_forward(params, config, signals, plan)
        loss.backward()

    def test_optimizer_round_trip_is_bitwise(self, tiny_config, small_signals):
        train_config = short_run(epochs=1)
        result = pretrain(small_signals, None, tiny_config, train_config)
        checkpoint = to_checkpoint(result.params, tiny_config, train_config, 0, {}, result.state)
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint))

        params = result.params
        state = result.state
        params_again = params_from_checkpoint(restored)
        state_again = state_from_checkpoint(restored)
        assert config_from_checkpoint(restored) == tiny_config

        signals = dequantize_8bit(small_signals[:4])
        self._grads(params, tiny_config, signals)
        self._grads(params_again, tiny_config, signals)
        adamw_step(params, state, 1e-3)
        adamw_step(params_again, state_again, 1e-3)
        assert state.step == state_again.step
        for name in params:
            assert np.array_equal(params[name].data, params_again[name].data)

    def test_without_optimizer_state(self, tiny_config):
        checkpoint = to_checkpoint(init_params(tiny_config, seed=0), tiny_config)
        assert state_from_checkpoint(checkpoint) is None

    def test_missing_model_metadata(self):
        from us_mae.formats import Checkpoint

        with pytest.raises(CompatibilityError):
            config_from_checkpoint(Checkpoint(tensors={}, metadata={}))

    def test_reloaded_logits_are_bitwise(self, tiny_config, small_signals):
        params = init_params(tiny_config, seed=4, decoder=False, classifier=True)
        restored = params_from_checkpoint(
            checkpoint_from_bytes(checkpoint_to_bytes(to_checkpoint(params, tiny_config, kind="finetune")))
        )
        assert np.array_equal(
            infer_logits(params, tiny_config, small_signals), infer_logits(restored, tiny_config, small_signals)
        )


class TestFinetune:
    """Test supervised fine-tuning."""

    def test_chance_level_before_training(self, tiny_config, rng):
        signals = rng.integers(0, 256, size=(2000, 512)).astype(np.uint8)
        labels = np.arange(2000) % 200
        params = init_params(tiny_config, seed=0, decoder=False, classifier=True)
        top1 = topk_accuracy(infer_logits(params, tiny_config, signals), labels, 1)
        assert 0.0 <= top1 <= 0.01

    def test_runs_and_reports(self, tiny_config, small_signals, small_labels):
        result = finetune(
            small_signals, small_labels, small_signals[:16], small_labels[:16],
            tiny_config, short_run(mode="finetune", base_lr=1e-3),
            encoder=init_params(tiny_config, seed=1),
        )
        assert "cls.head.w" in result.params
        assert "dec.head.w" not in result.params
        assert result.report.count == 16
        assert result.best_report is not None
        metrics = {m for e, s, m, _ in result.log if e == 0 and s == "val"}
        assert metrics == {"loss", "top1", "top5", "tof_mae_ns"}

    def test_scratch_ignores_encoder(self, tiny_config, small_signals, small_labels):
        config = short_run(mode="scratch", epochs=1, base_lr=1e-3)
        ignored = finetune(small_signals, small_labels, None, None, tiny_config, config,
                           encoder=init_params(tiny_config, seed=9))
        fresh = finetune(small_signals, small_labels, None, None, tiny_config, config)
        for name in fresh.params:
            assert np.array_equal(ignored.params[name].data, fresh.params[name].data)

    def test_single_step_run_updates_weights(self, tiny_config, small_signals, small_labels):
        start = init_params(tiny_config, seed=3, decoder=False, classifier=True)
        result = finetune(small_signals, small_labels, None, None, tiny_config,
                          short_run(mode="scratch", epochs=1, batch_size=64, base_lr=1e-3))
        assert result.state.step == 1
        assert not np.array_equal(start["cls.head.w"].data, result.params["cls.head.w"].data)

    def test_incompatible_encoder(self, tiny_config, small_signals, small_labels):
        with pytest.raises(CompatibilityError):
            finetune(small_signals, small_labels, None, None, tiny_config,
                     short_run(mode="finetune"), encoder=init_params(preset("S"), seed=0))

    def test_needs_labels(self, tiny_config, small_signals):
        with pytest.raises(UsageError):
            finetune(small_signals, None, None, None, tiny_config, short_run(mode="finetune"))

    def test_label_range(self, tiny_config, small_signals):
        labels = np.full(len(small_signals), 200)
        with pytest.raises(UsageError):
            finetune(small_signals, labels, None, None, tiny_config, short_run(mode="finetune"))

    def test_limit_subsample(self):
        picked = limit_examples(48, 10, seed=0)
        assert picked.size == 10
        assert np.all(np.diff(picked) > 0)
        assert np.array_equal(picked, limit_examples(48, 10, seed=0))
        assert limit_examples(48, None, seed=0).tolist() == list(range(48))


def desk_data(count, seed):
    records = generate_dataset(DatasetSpec.from_profile("synthetic", count=count, seed=seed), workers=4)
    return np.stack([r.samples for r in records]), np.array([r.label for r in records])


@pytest.mark.slow
class TestDeskScale:
    """Long runs reproducing the direction of the published results."""

    def test_pretraining_halves_reconstruction_error(self):
        train, _ = desk_data(8000, seed=100)
        val, _ = desk_data(1000, seed=101)
        result = pretrain(train, val, preset("S"), TrainConfig(epochs=30, batch_size=256, seed=0))
        history = result.history("val", "loss")
        assert history[-1] < 0.5 * history[0]
        drops = sum(b <= a for a, b in zip(history, history[1:]))
        assert drops >= 0.8 * (len(history) - 1)

    def test_pretrained_beats_scratch(self):
        unlabeled, _ = desk_data(8000, seed=200)
        train, train_labels = desk_data(4000, seed=201)
        val, val_labels = desk_data(1000, seed=202)
        config = preset("S")
        encoder = pretrain(unlabeled, None, config, TrainConfig(epochs=30, batch_size=256, seed=0)).best_params
        scores = {"finetune": [], "scratch": []}
        for mode in scores:
            for seed in range(3):
                result = finetune(
                    train, train_labels, val, val_labels, config,
                    TrainConfig(epochs=30, batch_size=256, seed=seed, mode=mode, base_lr=1e-3),
                    encoder=encoder,
                )
                scores[mode].append((result.report.top1, result.report.topk))
        tuned = np.mean(scores["finetune"], axis=0)
        scratch = np.mean(scores["scratch"], axis=0)
        assert tuned[0] - scratch[0] >= 0.05
        assert tuned[1] > scratch[1]

    def test_larger_patches_classify_better(self):
        unlabeled, _ = desk_data(8000, seed=300)
        train, train_labels = desk_data(4000, seed=301)
        val, val_labels = desk_data(1000, seed=302)
        top1 = {}
        for patch_size in (8, 32):
            config = preset("S", patch_size=patch_size)
            encoder = pretrain(unlabeled, None, config, TrainConfig(epochs=30, batch_size=256, seed=0)).best_params
            runs = [
                finetune(train, train_labels, val, val_labels, config,
                         TrainConfig(epochs=30, batch_size=256, seed=seed, mode="finetune", base_lr=1e-3),
                         encoder=encoder).report.top1
                for seed in range(3)
            ]
            top1[patch_size] = float(np.mean(runs))
        assert top1[32] > top1[8]
        assert math.isfinite(top1[8])
