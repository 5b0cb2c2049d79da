#!/usr/bin/env python3
"""
Joint loss terms and the VDE / AR metrics
"""

import unittest
import sys
import os
import json
import math
import tempfile

import numpy as np

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numeric_core as nc
from loss_metrics import (
    N_CLASSES,
    aggregate_metrics,
    ar,
    circular_distance,
    cross_entropy,
    decode,
    joint_loss,
    mse_complex,
    mse_loss,
    vde,
)
from numeric_core import ShapeError
from parameter_store import ParameterStore

SILENCE = 36


class LossTest(unittest.TestCase):

    def test_mse_examples(self):
        target = np.zeros((6, 4, 5), dtype=complex)
        self.assertEqual(mse_complex(target, target), 0.0)
        self.assertAlmostEqual(mse_complex(target, np.full((6, 4, 5), 1 + 1j)), 2.0)
        stack = nc.constant(np.ones((12, 4, 5)))
        self.assertAlmostEqual(float(mse_loss(nc.constant(np.zeros((12, 4, 5))), stack).data), 2.0)

    def test_mse_matches_loop(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
        y_hat = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
        total = 0.0
        for value, estimate in zip(y.reshape(-1), y_hat.reshape(-1)):
            total += (value.real - estimate.real) ** 2 + (value.imag - estimate.imag) ** 2
        self.assertAlmostEqual(mse_complex(y, y_hat), total / y.size, places=12)

    def test_mse_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            mse_complex(np.zeros((2, 3)), np.zeros((3, 2)))
        with self.assertRaises(ShapeError):
            mse_loss(nc.constant(np.zeros((4, 3))), nc.constant(np.zeros((4, 2))))

    def test_uniform_logits(self):
        self.assertAlmostEqual(cross_entropy(np.zeros((5, N_CLASSES)), np.arange(5)), math.log(37), places=12)

    def test_confident_logits(self):
        logits = np.zeros((3, N_CLASSES))
        labels = np.array([4, 36, 0])
        logits[np.arange(3), labels] = 200.0
        self.assertLess(cross_entropy(logits, labels), 1e-12)
        self.assertGreaterEqual(cross_entropy(logits, labels), 0.0)

    def test_cross_entropy_matches_loop(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((7, N_CLASSES))
        labels = rng.integers(0, N_CLASSES, 7)
        expected = np.mean([np.log(np.sum(np.exp(row))) - row[c] for row, c in zip(logits, labels)])
        self.assertAlmostEqual(cross_entropy(logits, labels), expected, places=12)

    def test_out_of_range_label(self):
        with self.assertRaises(ValueError):
            cross_entropy(np.zeros((2, N_CLASSES)), np.array([0, 37]))

    def test_joint_loss_without_enhancement(self):
        loss, report = joint_loss(nc.constant(np.zeros((1, 4, N_CLASSES))), np.zeros((1, 4), dtype=np.int64))
        self.assertEqual(report.mse, 0.0)
        self.assertAlmostEqual(report.total, math.log(37))
        self.assertAlmostEqual(float(loss.data), report.ce)

    def test_joint_gradient_is_sum_of_parts(self):
        rng = np.random.default_rng(2)
        store = ParameterStore({"logits": rng.standard_normal((1, 5, N_CLASSES)), "enhanced": rng.standard_normal((1, 4, 5, 3))})
        target = rng.standard_normal((1, 4, 5, 3))
        labels = rng.integers(0, N_CLASSES, (1, 5))

        def gradients(fn):
            graph = nc.Graph(fn, store)
            return nc.backward(graph, nc.forward(graph)["output"])

        joint = gradients(lambda p: joint_loss(p["logits"], labels, nc.constant(target), p["enhanced"])[0])
        ce_only = gradients(lambda p: joint_loss(p["logits"], labels)[0])
        mse_only = gradients(lambda p: mse_loss(nc.constant(target), p["enhanced"]))
        np.testing.assert_allclose(joint["logits"], ce_only["logits"], atol=1e-12)
        np.testing.assert_allclose(joint["enhanced"], mse_only["enhanced"], atol=1e-12)
        report = nc.grad_check(
            nc.Graph(lambda p: joint_loss(p["logits"], labels, nc.constant(target), p["enhanced"])[0], store)
        )
        self.assertTrue(report.passed, report.failing())

    def test_decode(self):
        logits = np.zeros((2, N_CLASSES))
        logits[0, 7] = 1.0
        logits[1, [3, 17]] = 5.0
        np.testing.assert_array_equal(decode(logits), [7, 3])
        random = np.random.default_rng(3).standard_normal((20, N_CLASSES))
        np.testing.assert_array_equal(decode(random), [int(np.argmax(row)) for row in random])


class MetricTest(unittest.TestCase):

    def test_vde(self):
        truth = np.array([0, 0, 36, 36, 5, 5, 5, 36, 9, 9])
        self.assertEqual(vde(truth, truth), 0.0)
        pred = truth.copy()
        pred[0] = 36
        pred[2] = 4
        self.assertAlmostEqual(vde(pred, truth), 0.2)
        self.assertEqual(vde(pred, truth), vde(truth, pred))

    def test_vde_matches_loop(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 37, 50)
        truth = rng.integers(0, 37, 50)
        mismatches = sum(1 for p, t in zip(pred, truth) if (p == 36) != (t == 36))
        self.assertAlmostEqual(vde(pred, truth), mismatches / 50)

    def test_vde_length_mismatch(self):
        with self.assertRaises(ValueError):
            vde(np.zeros(3, dtype=int), np.zeros(4, dtype=int))

    def test_ar_examples(self):
        truth = np.array([36, 4, 5, 36])
        self.assertEqual(ar(truth, truth), 1.0)
        self.assertEqual(ar(np.array([35]), np.array([0])), 1.0)
        self.assertEqual(ar(np.array([1]), np.array([0])), 1.0)
        self.assertEqual(ar(np.array([2]), np.array([0])), 0.0)
        self.assertEqual(ar(np.array([36, 12]), np.array([36, 9])), 0.0)
        self.assertEqual(ar(np.array([36]), np.array([9])), 0.0)

    def test_ar_needs_voiced_frames(self):
        with self.assertRaises(ValueError):
            ar(np.array([3, 36]), np.array([36, 36]))

    def test_ar_rotation_invariance(self):
        rng = np.random.default_rng(5)
        truth = rng.integers(0, 36, 60)
        pred = (truth + rng.integers(-2, 3, 60)) % 36
        base = ar(pred, truth)
        for k in (1, 7, 35):
            self.assertEqual(ar((pred + k) % 36, (truth + k) % 36), base)

    def test_circular_distance(self):
        self.assertEqual(circular_distance(0, 350), 10)
        self.assertEqual(circular_distance(90, 270), 180)

    def test_aggregate_per_sir(self):
        truth_a = np.array([36, 3, 3, 3])
        truth_b = np.array([9, 9, 36, 36])
        records = [
            (truth_a, truth_a, -5),
            (np.array([36, 3, 20, 36]), truth_a, 5),
            (np.array([9, 9, 36, 36]), truth_b, 5),
        ]
        report = aggregate_metrics(records)
        self.assertEqual(report.utterances, 3)
        self.assertEqual(report.per_sir["-5"], {"vde": 0.0, "ar": 1.0, "utterances": 1})
        self.assertAlmostEqual(report.per_sir["5"]["vde"], 0.125)
        self.assertAlmostEqual(report.per_sir["5"]["ar"], (1 / 3 + 1.0) / 2)
        self.assertAlmostEqual(report.ar, (1.0 + 1 / 3 + 1.0) / 3)

    def test_aggregate_pooled(self):
        records = [
            (np.array([3, 3]), np.array([3, 3]), 0),
            (np.array([36, 9, 9, 9, 9, 9]), np.array([9, 9, 9, 9, 9, 9]), 0),
        ]
        self.assertAlmostEqual(aggregate_metrics(records, pooled=True).ar, 7 / 8)
        self.assertAlmostEqual(aggregate_metrics(records).ar, (1.0 + 5 / 6) / 2)

    def test_all_silent_utterance_counts_for_vde_only(self):
        records = [
            (np.array([36, 36]), np.array([36, 36]), 0),
            (np.array([4, 4]), np.array([4, 4]), 0),
        ]
        report = aggregate_metrics(records)
        self.assertEqual(report.vde, 0.0)
        self.assertEqual(report.ar, 1.0)

    def test_oracle_and_silence_predictors(self):
        rng = np.random.default_rng(6)
        records_oracle, records_silent = [], []
        voiced = 0
        total = 0
        for sir in range(-5, 6):
            truth = np.where(rng.random(30) < 0.7, rng.integers(0, 36, 30), SILENCE)
            truth[0] = 3
            voiced += int(np.sum(truth != SILENCE))
            total += truth.size
            records_oracle.append((truth, truth, sir))
            records_silent.append((np.full(30, SILENCE), truth, sir))
        oracle = aggregate_metrics(records_oracle)
        self.assertEqual((oracle.vde, oracle.ar), (0.0, 1.0))
        self.assertTrue(all(bucket["vde"] == 0.0 and bucket["ar"] == 1.0 for bucket in oracle.per_sir.values()))
        silent = aggregate_metrics(records_silent, pooled=True)
        self.assertEqual(silent.ar, 0.0)
        self.assertAlmostEqual(silent.vde, voiced / total)

    def test_report_json(self):
        report = aggregate_metrics([(np.array([1, 36]), np.array([1, 36]), 2)])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.json")
            report.save(path)
            with open(path) as handle:
                data = json.load(handle)
        self.assertEqual(data["per_sir"]["2"]["ar"], 1.0)
        self.assertFalse(data["pooled"])


if __name__ == '__main__':
    unittest.main()
