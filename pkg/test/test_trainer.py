#!/usr/bin/env python3
"""
Optimizer, scheduler, batching, training and evaluation drivers
"""

import unittest
import sys
import os
import tempfile

import numpy as np

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import load_config
from corpus import DatasetError, make_synthetic_corpus
from dataset import SceneFeatures, get_manifest_store, read_wav, synthesize_dataset
from parameter_store import CheckpointError, ParameterStore
from run_log import read_events
from stft_frontend import SILENCE_CLASS
from trainer import (
    FeatureCache,
    NonFiniteGradientError,
    OptimizerState,
    PlateauScheduler,
    adam_step,
    bucket_batches,
    collate,
    config_sidecar,
    evaluate,
    evaluate_baseline,
    format_records,
    frame_records,
    gradient_check,
    infer,
    infer_arrays,
    load_model,
    mean_loss,
    train,
)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

# a one-block network without the CRN keeps training runs short
TINY = {
    "data.train_scenes": "3",
    "data.dev_scenes": "1",
    "data.test_scenes": "2",
    "data.min_duration": "3.0",
    "data.max_duration": "3.5",
    "scene.t60_choices": "0.2",
    "scene.max_order": "2",
    "model.use_enhancement": "false",
    "model.blocks": "1",
    "model.glu_freq_strides": "2",
    "train.batch": "2",
    "train.epochs": "2",
}


class OptimizerTest(unittest.TestCase):

    def test_zero_gradient_leaves_parameters(self):
        store = ParameterStore({"w": np.array([1.0, -2.0])})
        state = OptimizerState.create(store, 0.01)
        updated, state = adam_step(store, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(updated["w"], store["w"])
        self.assertEqual(state.step, 1)

    def test_first_step_moves_by_lr(self):
        store = ParameterStore({"w": np.array([1.0, -2.0, 0.5])})
        state = OptimizerState.create(store, 0.01)
        updated, _ = adam_step(store, {"w": np.array([3.0, -0.2, 40.0])}, state)
        np.testing.assert_allclose(updated["w"] - store["w"], [-0.01, 0.01, -0.01], rtol=1e-5)

    def test_quadratic_bowl(self):
        store = ParameterStore({"w": np.array([3.0, -4.0])})
        state = OptimizerState.create(store, 0.1)
        for _ in range(500):
            store, state = adam_step(store, {"w": 2.0 * store["w"]}, state)
        self.assertLess(float(np.max(np.abs(store["w"]))), 0.2)

    def test_missing_gradient_counts_as_zero(self):
        store = ParameterStore({"w": np.ones(2), "b": np.ones(1)})
        updated, _ = adam_step(store, {"w": np.ones(2)}, OptimizerState.create(store, 0.1))
        np.testing.assert_array_equal(updated["b"], np.ones(1))

    def test_non_finite_gradient(self):
        store = ParameterStore({"w": np.ones(2)})
        with self.assertRaises(NonFiniteGradientError):
            adam_step(store, {"w": np.array([np.nan, 0.0])}, OptimizerState.create(store, 0.1))

    def test_plateau_halving(self):
        scheduler = PlateauScheduler(0.01, factor=0.5, patience=2)
        self.assertEqual(scheduler.step(1.0), 0.01)
        self.assertEqual(scheduler.step(1.0), 0.01)
        self.assertEqual(scheduler.step(1.2), 0.005)
        self.assertEqual(scheduler.step(0.5), 0.005)


class BatchingTest(unittest.TestCase):

    def test_buckets_cover_every_entry(self):
        entries = [{"id": f"s{i}", "frames": f} for i, f in enumerate([50, 10, 30, 20, 40])]
        chunks = bucket_batches(entries, 2, np.random.default_rng(0))
        self.assertEqual(sorted(e["id"] for chunk in chunks for e in chunk), sorted(e["id"] for e in entries))
        self.assertEqual(sorted(len(chunk) for chunk in chunks), [1, 2, 2])
        for chunk in chunks:
            frames = [e["frames"] for e in chunk]
            self.assertEqual(frames, sorted(frames))

    def test_collate_truncates(self):
        def features(frames, anchor_frames):
            return SceneFeatures("x", np.ones((12, frames, 4)), np.ones((12, frames, 4)), np.ones((anchor_frames, 4)), np.zeros(frames, dtype=int), 0)

        batch = collate([features(7, 3), features(5, 6)])
        self.assertEqual(batch.raw.shape, (2, 12, 5, 4))
        self.assertEqual(batch.anchor.shape, (2, 3, 4))
        self.assertEqual(batch.labels.shape, (2, 5))
        self.assertEqual(batch.raw.dtype, np.float32)

    def test_joint_loss_gradients(self):
        report = gradient_check(frames=4, anchor_frames=3)
        self.assertTrue(report.passed, report.failing())


class TrainingTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        corpus_dir = os.path.join(cls.tmp.name, "corpus")
        pool = make_synthetic_corpus(corpus_dir, speakers=6, utterances=2, seed=7, min_duration=3.0, max_duration=3.5)
        cls.config = load_config(overrides=dict(TINY, **{"data.corpus_dir": corpus_dir}), use_environment=False)
        cls.data_dir = os.path.join(cls.tmp.name, "data")
        synthesize_dataset(cls.config, seed=1, out_dir=cls.data_dir, pool=pool, workers=1, quiet=True)
        cls.checkpoint = os.path.join(cls.tmp.name, "runs", "tiny.ckpt")
        cls.result = train(cls.config, cls.data_dir, cls.checkpoint, quiet=True)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_result_and_artifacts(self):
        self.assertEqual(self.result.epochs_run, 2)
        self.assertEqual(len(self.result.history), 2)
        self.assertTrue(np.isfinite(self.result.best_dev_loss))
        self.assertTrue(os.path.exists(self.checkpoint))
        self.assertTrue(os.path.exists(config_sidecar(self.checkpoint)))
        epochs = read_events(self.checkpoint + ".log.jsonl", "epoch")
        self.assertEqual([e["epoch"] for e in epochs], [1, 2])
        self.assertIsNotNone(epochs[0]["dev_loss"])
        self.assertEqual(epochs[0]["train_mse"], 0.0)
        start = read_events(self.checkpoint + ".log.jsonl", "start")[0]
        self.assertEqual(start["initial_train_mse"], 0.0)
        self.assertAlmostEqual(start["initial_train_loss"], self.result.initial_train["total"])
        self.assertGreater(self.result.initial_train["ce"], 0.0)

    def test_training_is_deterministic(self):
        again = os.path.join(self.tmp.name, "runs", "again.ckpt")
        train(self.config, self.data_dir, again, quiet=True)
        first, second = ParameterStore.load(self.checkpoint), ParameterStore.load(again)
        for name, array in first.items():
            np.testing.assert_array_equal(array, second[name])

    def test_stops_below_min_lr(self):
        config = load_config(overrides=dict(TINY, **{"train.min_lr": "1.0", "train.epochs": "5"}), use_environment=False)
        result = train(config, self.data_dir, os.path.join(self.tmp.name, "runs", "stop.ckpt"), quiet=True)
        self.assertEqual(result.epochs_run, 1)
        self.assertEqual(len(read_events(os.path.join(self.tmp.name, "runs", "stop.ckpt.log.jsonl"), "stop")), 1)

    def test_load_model_uses_sidecar(self):
        model, config = load_model(self.checkpoint)
        self.assertEqual(config.model, self.config.model)
        self.assertEqual(model.count_parameters(), ParameterStore.load(self.checkpoint).count())
        with self.assertRaises(CheckpointError):
            load_model(os.path.join(self.tmp.name, "absent.ckpt"))
        with self.assertRaises(CheckpointError):
            load_model(self.checkpoint, load_config(use_environment=False))

    def test_evaluate(self):
        report = evaluate(self.checkpoint, self.data_dir, quiet=True)
        self.assertEqual(report.utterances, 2)
        self.assertTrue(0.0 <= report.vde <= 1.0)
        self.assertTrue(0.0 <= report.ar <= 1.0)

    def test_reference_predictors(self):
        oracle = evaluate_baseline("oracle", self.data_dir, self.config)
        self.assertEqual((oracle.vde, oracle.ar), (0.0, 1.0))
        silence = evaluate_baseline("silence", self.data_dir, self.config)
        self.assertEqual(silence.ar, 0.0)
        srp = evaluate_baseline("srp-phat", self.data_dir, self.config)
        self.assertTrue(0.0 <= srp.ar <= 1.0)
        with self.assertRaises(ValueError):
            evaluate_baseline("music", self.data_dir, self.config)

    def test_infer(self):
        entry = get_manifest_store(self.data_dir).get_entries("test")[0]
        mix = os.path.join(self.data_dir, entry["mix"])
        anchor = os.path.join(self.data_dir, entry["anchor"])
        out_path = os.path.join(self.tmp.name, "doa.txt")
        records = infer(self.checkpoint, mix, anchor, out_path=out_path)
        self.assertEqual(len(records), entry["frames"])
        self.assertEqual(records[1][0], 0.01)
        for _, cls, angle in records:
            self.assertEqual(angle, None if cls == SILENCE_CLASS else 10 * cls)
        with open(out_path) as handle:
            self.assertEqual(len(handle.read().splitlines()), entry["frames"])
        model, _ = load_model(self.checkpoint)
        with self.assertRaises(DatasetError):
            infer_arrays(model, read_wav(mix)[:4], read_wav(anchor)[0])


class FrameRecordTest(unittest.TestCase):

    def test_records(self):
        records = frame_records(np.array([9, 36, 0]))
        self.assertEqual(records, [(0.0, 9, 90), (0.01, 36, None), (0.02, 0, 0)])
        self.assertEqual(format_records(records).splitlines()[1], "0.01\t36\tsilence")


class AnechoicPipelineTest(unittest.TestCase):
    """SRP-PHAT on anechoic single-speaker scenes checks simulation, steering and metrics together"""

    def test_srp_phat_accuracy(self):
        with tempfile.TemporaryDirectory() as tmp:
            corpus_dir = os.path.join(tmp, "corpus")
            pool = make_synthetic_corpus(corpus_dir, speakers=6, utterances=2, seed=3, min_duration=3.0, max_duration=4.0)
            config = load_config(
                os.path.join(CONFIG_DIR, "anechoic.cfg"),
                overrides={"data.corpus_dir": corpus_dir, "data.test_scenes": "4", "data.max_duration": "4.0"},
                use_environment=False,
            )
            data_dir = os.path.join(tmp, "data")
            synthesize_dataset(config, seed=0, out_dir=data_dir, pool=pool, quiet=True)
            report = evaluate_baseline("srp-phat", data_dir, config)
            self.assertEqual(report.utterances, 4)
            self.assertGreaterEqual(report.ar, 0.9)


@unittest.skipUnless(os.getenv("RTSDOA_SLOW_TESTS"), "set RTSDOA_SLOW_TESTS=1 for the overfit run")
class OverfitTest(unittest.TestCase):

    def test_tiny_overfit(self):
        with tempfile.TemporaryDirectory() as tmp:
            corpus_dir = os.path.join(tmp, "corpus")
            pool = make_synthetic_corpus(corpus_dir, speakers=12, utterances=2, seed=0, min_duration=3.0, max_duration=4.0)
            config = load_config(
                os.path.join(CONFIG_DIR, "overfit.cfg"), overrides={"data.corpus_dir": corpus_dir}, use_environment=False
            )
            data_dir = os.path.join(tmp, "data")
            synthesize_dataset(config, seed=0, out_dir=data_dir, pool=pool, quiet=True)
            checkpoint = os.path.join(tmp, "overfit.ckpt")
            result = train(config, data_dir, checkpoint, quiet=True)
            model, _ = load_model(checkpoint)
            entries = get_manifest_store(data_dir).get_entries("train")
            final = mean_loss(model.store, config.model, entries, FeatureCache(data_dir), config.train.batch)
            self.assertGreater(result.initial_train["mse"], 0.0)
            self.assertLessEqual(final["mse"], result.initial_train["mse"] / 10.0)
            report = evaluate(checkpoint, data_dir, split="train", pooled=True)
            self.assertGreaterEqual(report.ar, 0.9)


if __name__ == '__main__':
    unittest.main()
