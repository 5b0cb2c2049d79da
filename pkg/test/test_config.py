#!/usr/bin/env python3
"""
Config files, environment overrides and validation
"""

import unittest
import sys
import os
import tempfile
from unittest.mock import patch

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (
    LARGE_MODEL,
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    config_to_text,
    load_config,
    save_config,
)
from model import count_parameters

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


class LoadConfigTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = os.path.join(self.tmp.name, "exp.cfg")
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_defaults(self):
        config = load_config(use_environment=False)
        self.assertEqual(config, ExperimentConfig())
        self.assertEqual(config.scene.room_dims, (5.0, 6.0, 3.0))
        self.assertEqual(config.train.lr, 0.01)
        self.assertEqual(config.model.blocks, 5)

    def test_file_values(self):
        path = self.write("# comment\nmodel.enh_channels=64\nscene.moving=false\nscene.directions=0,9\ntrain.lr=0.005\n")
        config = load_config(path, use_environment=False)
        self.assertEqual(config.model.enh_channels, 64)
        self.assertFalse(config.scene.moving)
        self.assertEqual(config.scene.directions, (0, 9))
        self.assertEqual(config.train.lr, 0.005)

    def test_environment_then_overrides(self):
        path = self.write("train.epochs=5\n")
        with patch.dict(os.environ, {"RTSDOA_TRAIN_EPOCHS": "7", "RTSDOA_DATA_WORKERS": "3"}):
            config = load_config(path)
            self.assertEqual((config.train.epochs, config.data.workers), (7, 3))
            config = load_config(path, overrides={"train.epochs": "9"})
            self.assertEqual(config.train.epochs, 9)
            self.assertEqual(load_config(path, use_environment=False).train.epochs, 5)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            load_config(self.write("model.width=3\n"), use_environment=False)
        with self.assertRaises(ConfigError):
            load_config(overrides={"optimizer.lr": "1"}, use_environment=False)

    def test_bad_values(self):
        with self.assertRaises(ConfigError):
            load_config(overrides={"train.lr": "fast"}, use_environment=False)
        with self.assertRaises(ConfigError):
            load_config(overrides={"scene.moving": "maybe"}, use_environment=False)
        with self.assertRaises(ConfigError):
            load_config(overrides={"train.lr": "-1"}, use_environment=False)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, "absent.cfg"), use_environment=False)

    def test_text_round_trip(self):
        config = load_config(overrides={"model.input_mode": "magnitude", "scene.directions": "3,4"}, use_environment=False)
        path = os.path.join(self.tmp.name, "saved.cfg")
        save_config(config, path)
        self.assertEqual(load_config(path, use_environment=False), config)
        self.assertIn("model.input_mode=magnitude\n", config_to_text(config))


class ValidationTest(unittest.TestCase):

    def test_model_rules(self):
        with self.assertRaises(ConfigError):
            ModelConfig(input_mode="phase").validate()
        with self.assertRaises(ConfigError):
            ModelConfig(blocks=4).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(heads=3).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(classes=36).validate()

    def test_scene_rules(self):
        with self.assertRaises(ConfigError):
            load_config(overrides={"scene.anchor_mode": "echo"}, use_environment=False)
        with self.assertRaises(ConfigError):
            load_config(overrides={"scene.directions": "40"}, use_environment=False)
        with self.assertRaises(ConfigError):
            load_config(overrides={"scene.directions": "4"}, use_environment=False)
        config = load_config(overrides={"scene.directions": "4", "scene.moving": "false"}, use_environment=False)
        self.assertEqual(config.scene.directions, (4,))


class ShippedConfigTest(unittest.TestCase):

    def test_all_configs_load(self):
        for name in sorted(os.listdir(CONFIG_DIR)):
            with self.subTest(config=name):
                load_config(os.path.join(CONFIG_DIR, name), use_environment=False)

    def test_network_sizes(self):
        standard = load_config(os.path.join(CONFIG_DIR, "standard.cfg"), use_environment=False)
        large = load_config(os.path.join(CONFIG_DIR, "large.cfg"), use_environment=False)
        self.assertEqual(large.model, LARGE_MODEL)
        self.assertEqual(count_parameters(standard.model), 136153)
        self.assertEqual(count_parameters(large.model), 1482569)


if __name__ == '__main__':
    unittest.main()
