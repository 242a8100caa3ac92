#!/usr/bin/env python3
# Tests for run configuration resolution and snapshots

import os
import sys
import json
import unittest
import tempfile
from pathlib import Path

# Add project root to path to import the utils package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from utils.errors import ArtifactNotFoundError, ConfigError
from utils.run_config import (SNAPSHOT_NAME, RunConfig, coerce_value, env_overrides, load_run_config,
                              load_snapshot, snapshot_text, write_snapshot)


class TestCoercion(unittest.TestCase):
    """String and JSON values converted to field types"""

    def test_scalar_types(self):
        self.assertEqual(coerce_value('s', '7'), 7)
        self.assertEqual(coerce_value('quantile_p', '0.01'), 0.01)
        self.assertIs(coerce_value('clamp_negative', 'yes'), True)
        self.assertIs(coerce_value('clamp_negative', False), False)
        self.assertEqual(coerce_value('layer', 'conv3'), 'conv3')

    def test_lists(self):
        self.assertEqual(coerce_value('x_sweep', '5, 10,20'), [5, 10, 20])
        self.assertEqual(coerce_value('annotation_rates', [0.5, 0.75]), [0.5, 0.75])
        self.assertEqual(coerce_value('layers', 'conv2,conv4'), ['conv2', 'conv4'])

    def test_bad_values(self):
        for name, raw in (('s', 'many'), ('s', 2.5), ('clamp_negative', 'maybe'), ('x_sweep', 'a,b')):
            with self.assertRaises(ConfigError):
                coerce_value(name, raw)
        with self.assertRaises(ConfigError):
            coerce_value('no_such_key', '1')


class TestLoadRunConfig(unittest.TestCase):
    """Precedence of defaults, environment, file and flags"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_defaults(self):
        cfg = load_run_config(use_env=False)
        self.assertEqual(cfg, RunConfig())
        self.assertEqual(cfg.quantile_p, 0.005)
        self.assertEqual(cfg.iou_threshold, 0.04)
        self.assertEqual(cfg.x_sweep, [5, 10, 20])

    def test_precedence(self):
        config_file = self.dir / 'run.json'
        config_file.write_text(json.dumps({'s': 3, 'p_images': 20}), encoding='utf-8')
        environ = {'FILTERLEX_S': '2', 'FILTERLEX_TOP_X': '4', 'FILTERLEX_P_IMAGES': '8', 'HOME': '/root'}
        cfg = load_run_config(config_file, overrides={'p_images': 12, 'top_k': None}, environ=environ)
        self.assertEqual(cfg.s, 3)
        self.assertEqual(cfg.top_x, 4)
        self.assertEqual(cfg.p_images, 12)
        self.assertEqual(cfg.top_k, 10)

    def test_unknown_environment_key_is_ignored(self):
        with self.assertLogs('utils.run_config', level='WARNING'):
            overrides = env_overrides({'FILTERLEX_NOPE': '1', 'FILTERLEX_SEED': '4'})
        self.assertEqual(overrides, {'seed': 4})

    def test_invalid_values_fail_validation(self):
        for overrides in ({'quantile_p': 0}, {'iou_threshold': 1.0}, {'strategy': 'saliency'}, {'s': 0},
                          {'annotation_rates': [0.5, 1.0]}, {'synth_preset': 'huge'}):
            with self.assertRaises(ConfigError):
                load_run_config(overrides=overrides, use_env=False)

    def test_config_file_errors(self):
        with self.assertRaises(ArtifactNotFoundError):
            load_run_config(self.dir / 'missing.json', use_env=False)
        bad = self.dir / 'bad.json'
        bad.write_text('[1, 2]', encoding='utf-8')
        with self.assertRaises(ConfigError):
            load_run_config(bad, use_env=False)


class TestSnapshots(unittest.TestCase):
    """Config snapshots next to run outputs"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_snapshot_excludes_output_location(self):
        a = RunConfig(out='one')
        b = RunConfig(out='two')
        self.assertEqual(snapshot_text('explain', a), snapshot_text('explain', b))
        self.assertNotIn('"out"', snapshot_text('explain', a))

    def test_write_and_load(self):
        cfg = RunConfig(out=str(self.dir / 'run'), s=3, layers=['conv2'])
        path = write_snapshot('evaluate', cfg)
        self.assertEqual(path.name, SNAPSHOT_NAME)
        command, loaded = load_snapshot(path)
        self.assertEqual(command, 'evaluate')
        self.assertEqual(loaded, cfg)

        _, moved = load_snapshot(path, out=str(self.dir / 'elsewhere'))
        self.assertEqual(moved.out, str(self.dir / 'elsewhere'))

    def test_identical_rerun_is_allowed(self):
        cfg = RunConfig(out=str(self.dir / 'run'))
        write_snapshot('explain', cfg)
        write_snapshot('explain', cfg)

    def test_different_run_in_same_directory(self):
        write_snapshot('explain', RunConfig(out=str(self.dir / 'run')))
        with self.assertRaises(ConfigError):
            write_snapshot('explain', RunConfig(out=str(self.dir / 'run'), s=9))
        with self.assertRaises(ConfigError):
            write_snapshot('evaluate', RunConfig(out=str(self.dir / 'run')))

    def test_not_a_snapshot(self):
        path = self.dir / 'other.json'
        path.write_text('{"config": {}}', encoding='utf-8')
        with self.assertRaises(ConfigError):
            load_snapshot(path)


if __name__ == '__main__':
    unittest.main()
