#!/usr/bin/env python3
# Tests for the two-group bias audit

import os
import sys
import json
import unittest
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

# Add project root to path to import the utils package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from utils.errors import ConfigError, UndefinedStatisticError
from utils.backbone import FeatureSet
from utils.reference_data import parse_manifest_lines
from utils.probe import ProbeStrategy
from utils.bias_audit import (GROUP_A, GROUP_B, GroupedDataset, annotation_ratios, audit, concept_ratio,
                              concept_ratios_from_rows, filter_disparity, group_counts, group_ratio,
                              qualified_images, validate_against_annotations, write_bias_csv, write_bias_report)
from tests.helper import constant_thresholds, fixed_explainer, make_table


def grouped_manifest(groups, concepts=None):
    """One 8x8 entry per (id, group) pair; concepts maps id -> annotated concepts"""
    concepts = concepts or {}
    lines = []
    for image_id, group in groups:
        record = {'id': image_id, 'image': f"{image_id}.png", 'height': 8, 'width': 8,
                  'annotations': [{'concept': c} for c in concepts.get(image_id, [])]}
        if group is not None:
            record['group'] = group
        lines.append(json.dumps(record))
    return parse_manifest_lines(lines, Path('.'))


def six_images():
    return grouped_manifest([('a0', 'A'), ('a1', 'A'), ('a2', 'A'), ('b0', 'B'), ('b1', 'B'), ('b2', 'B')])


class TestGroupedDataset(unittest.TestCase):
    """Group labels taken from the manifest"""

    def test_unlabelled_and_mixed_entries_are_excluded(self):
        manifest = grouped_manifest([('x', 'a'), ('y', ' B '), ('z', None), ('w', 'AB')])
        groups = GroupedDataset.from_manifest(manifest)
        self.assertEqual(groups.group_of, {'x': GROUP_A, 'y': GROUP_B})
        self.assertEqual(groups.excluded, 2)
        self.assertEqual(groups.manifest.ids, ['x', 'y'])

    def test_empty_group(self):
        with self.assertRaises(ConfigError):
            GroupedDataset.from_manifest(grouped_manifest([('x', 'A'), ('y', 'A')]))

    def test_swapped(self):
        groups = GroupedDataset.from_manifest(grouped_manifest([('x', 'A'), ('y', 'B'), ('z', 'B')]))
        swapped = groups.swapped()
        self.assertEqual(swapped.sizes, {GROUP_A: 2, GROUP_B: 1})
        self.assertEqual(swapped.members(GROUP_A), {'y', 'z'})


class TestDisparity(unittest.TestCase):
    """Per-filter group statistics"""

    def setUp(self):
        self.groups = GroupedDataset.from_manifest(six_images())

    def test_qualified_images_are_strict(self):
        values = np.zeros((3, 1, 2, 2), dtype=np.float32)
        values[0, 0, 0, 0] = 0.5
        values[1, 0, 1, 1] = 0.6
        features = FeatureSet('conv2', ['a0', 'a1', 'b0'], values)
        self.assertEqual(qualified_images(features, 0, 0.5), {'a1'})

    def test_disparity_examples(self):
        self.assertEqual(filter_disparity({'a0', 'a1', 'a2'}, self.groups), (100.0, 0.0, 100.0))
        pct_a, pct_b, disparity = filter_disparity({'a0', 'b0', 'b1'}, self.groups)
        self.assertAlmostEqual(pct_a, 100 / 3)
        self.assertAlmostEqual(pct_b, 200 / 3)
        self.assertAlmostEqual(disparity, 100 / 3)
        self.assertEqual(filter_disparity(set(), self.groups), (0.0, 0.0, 0.0))

    def test_disparity_is_symmetric_under_swap(self):
        qualified = {'a0', 'b0', 'b1'}
        pct_a, pct_b, d = filter_disparity(qualified, self.groups)
        self.assertEqual(filter_disparity(qualified, self.groups.swapped()), (pct_b, pct_a, d))

    def test_ratios(self):
        self.assertEqual(group_counts({'a0', 'b0', 'b1', 'zz'}, self.groups), (1, 2))
        self.assertAlmostEqual(group_ratio(1, 2), 1 / 3)
        self.assertIsNone(group_ratio(0, 0))
        self.assertAlmostEqual(concept_ratio([0.2, None, 0.6]), 0.4)
        self.assertIsNone(concept_ratio([None]))

    def test_disparity_invariant_under_duplication(self):
        qualified = {'a0', 'b0', 'b1'}
        doubled_ids = [(i, g) for image_id, g in self.groups.group_of.items() for i in (image_id, image_id + '_copy')]
        doubled = GroupedDataset.from_manifest(grouped_manifest(doubled_ids))
        doubled_qualified = qualified | {i + '_copy' for i in qualified}
        self.assertEqual(filter_disparity(doubled_qualified, doubled), filter_disparity(qualified, self.groups))
        self.assertEqual(group_ratio(*group_counts(doubled_qualified, doubled)),
                         group_ratio(*group_counts(qualified, self.groups)))

    def test_concept_ratio_within_filter_ratios(self):
        rng = np.random.default_rng(8)
        rows = [{'filter': u, 'top_word': ['disc', 'roof'][u % 2], 'ratio': round(float(rng.random()), 6)}
                for u in range(12)]
        rows.append({'filter': 12, 'top_word': 'disc', 'ratio': None})
        ratios = concept_ratios_from_rows(rows)
        for word in ('disc', 'roof'):
            own = [r['ratio'] for r in rows if r['top_word'] == word and r['ratio'] is not None]
            self.assertGreaterEqual(ratios[word]['ratio'], min(own) - 1e-6)
            self.assertLessEqual(ratios[word]['ratio'], max(own) + 1e-6)
            self.assertEqual(ratios[word]['n_filters'], 6)



class TestValidation(unittest.TestCase):
    """Correlation of discovered and reference ratios"""

    def test_perfect_and_reversed(self):
        discovered = {'x': 0.1, 'y': 0.5, 'z': 0.9, 'only_here': 0.3}
        rho, scatter = validate_against_annotations(discovered, {'x': 0.1, 'y': 0.5, 'z': 0.9})
        self.assertAlmostEqual(rho, 1.0)
        self.assertEqual(scatter['concept'].tolist(), ['x', 'y', 'z'])
        rho, _ = validate_against_annotations(discovered, {'x': 0.9, 'y': 0.5, 'z': 0.1})
        self.assertAlmostEqual(rho, -1.0)

    def test_too_few_shared_concepts(self):
        with self.assertRaises(UndefinedStatisticError):
            validate_against_annotations({'x': 0.1, 'y': 0.2}, {'x': 0.3, 'y': 0.4, 'z': 0.5})

    def test_zero_variance(self):
        with self.assertLogs('utils.bias_audit', level='WARNING'):
            rho, scatter = validate_against_annotations({'x': 0.5, 'y': 0.5, 'z': 0.5},
                                                        {'x': 0.1, 'y': 0.5, 'z': 0.9})
        self.assertIsNone(rho)
        self.assertEqual(len(scatter), 3)

    def test_annotation_ratios(self):
        manifest = grouped_manifest([('a0', 'A'), ('a1', 'A'), ('b0', 'B'), ('n', None)],
                                    {'a0': ['door', 'door'], 'a1': ['door', 'roof'], 'b0': ['roof'], 'n': ['sky']})
        ratios = annotation_ratios(GroupedDataset.from_manifest(manifest))
        self.assertEqual(ratios, {'door': 1.0, 'roof': 0.5})


class TestAudit(unittest.TestCase):
    """Full audit with a fixed-output explainer"""

    def setUp(self):
        self.groups = GroupedDataset.from_manifest(six_images())
        values = np.zeros((6, 3, 2, 2), dtype=np.float32)
        ids = self.groups.manifest.ids
        for i, image_id in enumerate(ids):
            if image_id.startswith('a'):
                values[i, 0, 0, 0] = 1.0
            if image_id in ('a0', 'b0', 'b1'):
                values[i, 1, 1, 1] = 1.0
            values[i, 2] = 0.2
        self.features = FeatureSet('conv2', ids, values)
        self.table = make_table(['square', 'disc', 'roof'], dim=8, seed=0)
        self.explainer = fixed_explainer(self.table, 'square', in_channels=3)
        self.thresholds = constant_thresholds(3, 0.5)

    def run_audit(self, groups, **kwargs):
        return audit(None, self.explainer, self.table, groups, self.features, self.thresholds,
                     ProbeStrategy('original'), s=1, p=6, x=1, top_k=2, **kwargs)

    def test_ranking_and_ratios(self):
        report = self.run_audit(self.groups)
        self.assertEqual([r['filter'] for r in report.rows], [0, 1, 2])
        self.assertEqual([r['filter'] for r in report.top_rows], [0, 1])
        self.assertEqual(report.rows[0]['ratio'], 1.0)
        self.assertAlmostEqual(report.rows[1]['ratio'], 1 / 3, places=6)
        self.assertIsNone(report.rows[2]['ratio'])
        self.assertEqual(report.rows[0]['top_word'], 'square')
        self.assertEqual(report.concept_ratios['square']['n_filters'], 2)
        self.assertAlmostEqual(report.concept_ratios['square']['ratio'], 2 / 3, places=5)

    def test_relabelling_mirrors_ratios(self):
        report = self.run_audit(self.groups)
        swapped = self.run_audit(self.groups.swapped())
        self.assertEqual([r['filter'] for r in swapped.rows], [r['filter'] for r in report.rows])
        for a, b in zip(report.rows, swapped.rows):
            self.assertEqual(a['disparity'], b['disparity'])
            if a['ratio'] is not None:
                self.assertAlmostEqual(b['ratio'], 1 - a['ratio'], places=5)
        self.assertAlmostEqual(swapped.concept_ratios['square']['ratio'],
                               1 - report.concept_ratios['square']['ratio'], places=5)

    def test_correlation_skipped_with_one_concept(self):
        with self.assertLogs('utils.bias_audit', level='WARNING'):
            report = self.run_audit(self.groups, reference={'square': 0.6, 'disc': 0.2, 'roof': 0.4})
        self.assertIsNone(report.rho)

    def test_outputs(self):
        report = self.run_audit(self.groups)
        with tempfile.TemporaryDirectory() as tmp:
            saved = json.loads(write_bias_report(report, Path(tmp) / 'bias_report.json').read_text(encoding='utf-8'))
            rows = pd.read_csv(write_bias_csv(report, Path(tmp) / 'bias_filters.csv'))
        self.assertEqual([r['filter'] for r in saved['top_filters']], [0, 1])
        self.assertIsNone(saved['rho'])
        self.assertEqual(list(rows.columns), ['filter', 'top_word', 'pct_a', 'pct_b', 'disparity', 'n_a', 'n_b',
                                              'ratio'])


if __name__ == '__main__':
    unittest.main()
