#!/usr/bin/env python3
"""Tests for the Nadam optimizer and the early-stopped training loop"""

import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path to import the package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from inceptoformer.data import Segment, SynthSpec, segment_all, synth_dataset
from inceptoformer.errors import ConfigError, ContractError, DimensionError, NumericalError
from inceptoformer.model import ModelConfig, build
from inceptoformer.tensor import Tensor
from inceptoformer.training import (
    NadamState,
    TrainConfig,
    batch_indices,
    clip_grad_norm,
    fold_seed,
    nadam_apply,
    stack_segments,
    train,
    write_history,
)

# 18 signals so real segments fit, everything else as small as it goes
SMALL = ModelConfig(segment_len=8, filters_per_stream=2, kernel_sizes=(1, 3), cascade_depth=1,
                    temporal_heads=1, spatial_heads=1, ff_expansion=1, reduced_dim=2,
                    classifier_widths=(4,))


def small_segments(n, seed=0, length=8):
    rng = np.random.default_rng(seed)
    return [Segment(f"s{i}", rng.normal(size=(length, 18)) + (i % 2), i % 2, f"S{i}") for i in range(n)]


def param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


class StubValidation:
    """Replays a fixed validation-loss sequence and snapshots the weights it sees."""

    def __init__(self, losses):
        self.losses = list(losses)
        self.snapshots = []
        self.rng_states = []

    def __call__(self, model):
        self.snapshots.append(model.state_dict())
        self.rng_states.append(model.dropout_rng.bit_generator.state)
        return self.losses[len(self.snapshots) - 1], 0.5


class TestNadam(unittest.TestCase):
    def test_zero_gradient_leaves_weights(self):
        w = param([1.0, -2.0])
        state = NadamState([w.shape], learning_rate=0.1)
        for _ in range(3):
            nadam_apply([w], [np.zeros(2)], state)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        self.assertEqual(state.step, 3)

    def test_first_step_value(self):
        w = param([1.0])
        nadam_apply([w], [np.ones(1)], NadamState([w.shape], learning_rate=0.1))
        self.assertAlmostEqual(w.data[0], 0.852632, places=6)

    def test_constant_gradient_step_tends_to_learning_rate(self):
        w = param([0.0])
        state = NadamState([w.shape], learning_rate=0.01)
        for _ in range(200):
            before = w.data[0]
            nadam_apply([w], [np.array([2.5])], state)
        self.assertAlmostEqual(before - w.data[0], 0.01, delta=1e-6)

    def test_quadratic_bowl(self):
        w = param([0.0, 6.0, -2.0])
        state = NadamState([w.shape], learning_rate=0.02)
        for _ in range(2000):
            nadam_apply([w], [2.0 * (w.data - 3.0)], state)
        self.assertLess(np.abs(w.data - 3.0).max(), 0.1)

    def test_none_gradient_counts_as_zero(self):
        w = param([1.0])
        nadam_apply([w], [None], NadamState([w.shape]))
        self.assertEqual(w.data[0], 1.0)

    def test_non_finite_gradient_names_parameter(self):
        w, b = param([1.0]), param([0.0])
        with self.assertRaises(NumericalError) as ctx:
            nadam_apply([w, b], [np.ones(1), np.array([np.nan])], NadamState([(1,), (1,)]),
                        names=["dense.weight", "dense.bias"])
        self.assertIn("dense.bias", str(ctx.exception))
        self.assertEqual(w.data[0], 1.0)

    def test_shape_mismatch(self):
        w = param([1.0, 2.0])
        with self.assertRaises(DimensionError):
            nadam_apply([w], [np.ones(3)], NadamState([w.shape]))

    def test_length_mismatch(self):
        with self.assertRaises(ContractError):
            nadam_apply([param([1.0])], [np.ones(1)], NadamState([]))

    def test_payload_round_trip(self):
        w = param(np.ones((2, 3)))
        state = NadamState([w.shape], learning_rate=0.1)
        nadam_apply([w], [np.full((2, 3), 0.5)], state)
        again = NadamState.from_payload(state.to_payload())
        self.assertEqual(again.step, 1)
        self.assertEqual(again.learning_rate, 0.1)
        np.testing.assert_array_equal(again.m[0], state.m[0])
        np.testing.assert_array_equal(again.v[0], state.v[0])


class TestHelpers(unittest.TestCase):
    def test_clip_grad_norm(self):
        clipped, norm = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
        self.assertEqual(norm, 5.0)
        np.testing.assert_allclose(np.concatenate(clipped), [0.6, 0.8])
        unchanged, _ = clip_grad_norm([np.array([0.3])], 1.0)
        np.testing.assert_array_equal(unchanged[0], [0.3])

    def test_fold_seeds_are_stable_and_distinct(self):
        self.assertEqual(fold_seed(7, 2), fold_seed(7, 2))
        self.assertEqual(len({fold_seed(7, i) for i in range(10)}), 10)

    def test_trailing_single_sample_is_merged(self):
        self.assertEqual([len(b) for b in batch_indices(129, 64)], [64, 65])
        self.assertEqual([len(b) for b in batch_indices(130, 64)], [64, 64, 2])
        self.assertEqual([len(b) for b in batch_indices(1, 64)], [1])

    def test_shuffled_batches_cover_everything(self):
        batches = batch_indices(50, 8, np.random.default_rng(0))
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(50)))

    def test_stack_segments_layout(self):
        inputs, labels = stack_segments(small_segments(3))
        self.assertEqual(inputs.shape, (3, 18, 8))
        np.testing.assert_array_equal(labels, [0, 1, 0])

    def test_config_validation(self):
        for bad in ({"batch_size": 0}, {"early_stop_patience": 0}, {"learning_rate": 0.0},
                    {"beta1": 1.0}, {"grad_clip": -1.0}):
            with self.assertRaises(ConfigError):
                TrainConfig(**bad).validate()
        with self.assertRaises(ConfigError):
            TrainConfig.from_dict({"epochs": 3})


class TestTrain(unittest.TestCase):
    def setUp(self):
        self.train_set = small_segments(12)
        self.val_set = small_segments(4, seed=1)

    def test_zero_epochs_returns_initial_weights(self):
        model = build(SMALL)
        initial = model.state_dict()
        result = train(model, self.train_set, self.val_set, TrainConfig(max_epochs=0))
        self.assertEqual(result.history, [])
        self.assertEqual(result.best_epoch, 0)
        for name, value in initial.items():
            np.testing.assert_array_equal(model.state_dict()[name], value)

    def test_patience_one_stops_after_first_regression(self):
        model = build(SMALL)
        stub = StubValidation([1.0, 0.9, 0.8, 0.85, 0.7, 0.6])
        config = TrainConfig(batch_size=4, learning_rate=1e-2, max_epochs=20, early_stop_patience=1)
        result = train(model, self.train_set, self.val_set, config, val_loss_fn=stub)
        self.assertTrue(result.stopped_early)
        self.assertEqual(len(result.history), 4)
        self.assertEqual(result.best_epoch, 3)
        self.assertEqual(result.best_val_loss, 0.8)
        for name, value in stub.snapshots[2].items():
            np.testing.assert_array_equal(model.state_dict()[name], value)

    def test_sub_delta_improvement_moves_snapshot_but_not_patience(self):
        stub = StubValidation([1.0, 0.99995, 0.9999, 0.5])
        config = TrainConfig(batch_size=4, max_epochs=10, early_stop_patience=2, early_stop_min_delta=1e-4)
        result = train(build(SMALL), self.train_set, self.val_set, config, val_loss_fn=stub)
        self.assertEqual(len(result.history), 3)
        self.assertEqual(result.best_epoch, 3)

    def test_runs_to_max_epochs_without_regression(self):
        stub = StubValidation([1.0, 0.5, 0.25])
        result = train(build(SMALL), self.train_set, self.val_set,
                       TrainConfig(batch_size=4, max_epochs=3), val_loss_fn=stub)
        self.assertFalse(result.stopped_early)
        self.assertEqual(result.best_epoch, 3)
        self.assertEqual(result.optimizer.step, 9)

    def test_optimizer_and_dropout_rng_follow_best_epoch(self):
        model = build(SMALL)
        stub = StubValidation([0.5, 0.9, 0.9, 0.9])
        config = TrainConfig(batch_size=4, max_epochs=10, early_stop_patience=3)
        result = train(model, self.train_set, self.val_set, config, val_loss_fn=stub)
        self.assertEqual(result.best_epoch, 1)
        self.assertEqual(len(result.history), 4)
        self.assertEqual(result.optimizer.step, 3)
        self.assertEqual(model.dropout_rng.bit_generator.state, stub.rng_states[0])

    def test_continue_from_saved_optimizer(self):
        model = build(SMALL)
        config = TrainConfig(batch_size=4, learning_rate=1e-2, max_epochs=1)
        first = train(model, self.train_set, self.val_set, config)
        saved = NadamState.from_payload(first.optimizer.to_payload())
        second = train(model, self.train_set, self.val_set, config, optimizer=saved)
        self.assertEqual(second.optimizer.step, 6)
        self.assertEqual(first.optimizer.step, 3)

    def test_non_finite_validation_loss(self):
        stub = StubValidation([1.0, float("nan")])
        with self.assertRaises(NumericalError) as ctx:
            train(build(SMALL), self.train_set, self.val_set, TrainConfig(batch_size=4, max_epochs=5),
                  val_loss_fn=stub)
        self.assertIn("validation loss at epoch 2", str(ctx.exception))

    def test_same_seed_same_run(self):
        config = TrainConfig(batch_size=4, learning_rate=1e-2, max_epochs=2, seed=3)
        first = train(build(SMALL, seed=1), self.train_set, self.val_set, config)
        second = train(build(SMALL, seed=1), self.train_set, self.val_set, config)
        strip = [(r.train_loss, r.val_loss, r.train_acc, r.val_acc) for r in first.history]
        self.assertEqual(strip, [(r.train_loss, r.val_loss, r.train_acc, r.val_acc) for r in second.history])
        for name, value in first.best_state.items():
            np.testing.assert_array_equal(second.best_state[name], value)

    def test_non_finite_input_is_reported(self):
        broken = small_segments(4)
        broken[0].values[0, 0] = np.nan
        with self.assertRaises(NumericalError) as ctx:
            train(build(SMALL), broken, self.val_set, TrainConfig(batch_size=4, max_epochs=1))
        self.assertIn("epoch 1", str(ctx.exception))

    def test_empty_split(self):
        with self.assertRaises(ConfigError):
            train(build(SMALL), [], self.val_set, TrainConfig())

    def test_history_csv(self):
        stub = StubValidation([1.0, 0.5])
        result = train(build(SMALL), self.train_set, self.val_set,
                       TrainConfig(batch_size=4, max_epochs=2), val_loss_fn=stub)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "history.csv"
            write_history(path, result.history)
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "wall_ms"])
        self.assertEqual(frame["val_loss"].tolist(), [1.0, 0.5])


@pytest.mark.slow
class TestTrainability(unittest.TestCase):
    def setUp(self):
        if os.environ.get("RUN_SLOW_CHECKS") != "1":
            pytest.skip("Set RUN_SLOW_CHECKS=1 to run slow training checks")

    def test_separable_surrogates_are_learned(self):
        records = synth_dataset(SynthSpec(n_subjects_per_class=3, n_timesteps=400, n_classes=2, seed=2))
        segments = segment_all(records, length=20, overlap=0.0)
        rng = np.random.default_rng(0)
        order = rng.permutation(len(segments))
        val = [segments[i] for i in order[:20]]
        training = [segments[i] for i in order[20:]]
        config = ModelConfig(segment_len=20, filters_per_stream=4, reduced_dim=4, classifier_widths=(16,))
        result = train(build(config), training, val,
                       TrainConfig(batch_size=16, learning_rate=1e-3, max_epochs=30, early_stop_patience=5))
        self.assertLess(result.best_val_loss, result.history[0].val_loss)
        self.assertGreaterEqual(max(r.val_acc for r in result.history), 0.8)

    def test_noise_free_walks_are_fit_exactly(self):
        records = synth_dataset(SynthSpec(n_subjects_per_class=4, n_timesteps=250, noise_std=0.0, seed=0))
        segments = segment_all(records)
        self.assertEqual(len(segments), 64)
        config = ModelConfig(filters_per_stream=4)
        result = train(build(config), segments, segments,
                       TrainConfig(learning_rate=1e-4, max_epochs=200, early_stop_patience=200))
        self.assertLessEqual(len(result.history), 200)
        self.assertEqual(max(r.train_acc for r in result.history), 1.0)


if __name__ == "__main__":
    unittest.main()
